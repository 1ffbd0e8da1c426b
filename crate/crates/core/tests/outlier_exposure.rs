//! Outlier-exposure training on synthetic data.

use panda_core::evaluation::NORMAL_LABEL;
use panda_core::trainer::train_oe;
use panda_core::{
    make_synthetic, roc_auc, run_one_class_experiment, AdapterParams, FeatureMatrix, OEHead, PipelineConfig, SgdConfig,
    SyntheticSpec, TrainConfig, Variant,
};

// The benchmark step size: with the default rate the clipped head barely
// moves in a fixed-length run on data this small.
const LEARNING_RATE: f64 = 2.0;

fn anomalous(test: &FeatureMatrix) -> Vec<bool> {
    test.labels().unwrap().iter().map(|&l| l != NORMAL_LABEL).collect()
}

#[test]
fn exposure_near_the_anomalies_beats_unadapted_knn() {
    let spec = SyntheticSpec::default();
    let data = make_synthetic(&spec).unwrap();
    // same class means, but fresh anomaly draws: only the sample counts differ
    let wider = make_synthetic(&SyntheticSpec {
        samples_per_class: 2 * spec.samples_per_class,
        ..spec
    })
    .unwrap();
    let idx: Vec<usize> = (0..wider.test.n())
        .filter(|&i| wider.test.labels().unwrap()[i] != NORMAL_LABEL)
        .collect();
    let oe = wider.test.select(&idx).unwrap();
    assert!(!oe.rows().any(|r| data.test.rows().any(|t| t == r)));

    let cfg = |variant| PipelineConfig {
        variant,
        aux: Some(data.aux.clone()),
        oe: Some(oe.clone()),
        oe_sgd: SgdConfig {
            learning_rate: LEARNING_RATE,
            ..SgdConfig::OUTLIER_EXPOSURE
        },
        seed: 2,
        ..PipelineConfig::default()
    };
    let base = run_one_class_experiment(&data.train, &data.test, NORMAL_LABEL, &cfg(Variant::Unadapted)).unwrap();
    let oe_run =
        run_one_class_experiment(&data.train, &data.test, NORMAL_LABEL, &cfg(Variant::OutlierExposure)).unwrap();
    assert!(oe_run.auc > base.auc, "oe {} vs unadapted {}", oe_run.auc, base.auc);
}

#[test]
fn untrained_head_scores_at_chance_over_seeds() {
    let data = make_synthetic(&SyntheticSpec {
        samples_per_class: 100,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let psi0 = AdapterParams::glorot(&AdapterParams::default_widths(16), 3).unwrap();
    let labels = anomalous(&data.test);
    let cfg = TrainConfig {
        total_minibatches: 0,
        ..TrainConfig::outlier_exposure(0)
    };
    let aucs: Vec<f64> = (0..24u64)
        .map(|seed| {
            let h0 = OEHead::random(16, seed);
            let (run, head) = train_oe(&psi0, &h0, &data.train, &data.aux, &cfg).unwrap();
            assert_eq!(head, h0);
            assert_eq!(run.params, psi0);
            roc_auc(&head.scores(&psi0, &data.test).unwrap(), &labels).unwrap()
        })
        .collect();
    let n = aucs.len() as f64;
    let mean = aucs.iter().sum::<f64>() / n;
    let sd = (aucs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    // heads w and -w are equally likely, so the expected AUC is exactly one half
    assert!((mean - 0.5).abs() < 3.0 * sd / n.sqrt(), "mean {mean}, sd {sd}");
}
