//! Effect of the elastic penalty strength on the collapse-prone benchmark.

use panda_core::adapter::{pretrain_classifier, Pretrained};
use panda_core::evaluation::{SyntheticData, NORMAL_LABEL};
use panda_core::objectives::{ewc_penalty, fisher_diagonal};
use panda_core::scoring::center_distance_score;
use panda_core::trainer::{adapt, Adapted, BATCH_SIZE, EWC_MINIBATCHES};
use panda_core::{
    make_synthetic, AdaptConfig, AdaptMode, AdapterParams, ClassifierHead, FisherDiagonal, SgdConfig, SyntheticSpec,
    TrainConfig,
};

const SEED: u64 = 2;
// step length is lr * clip once clipping is active
const LEARNING_RATE: f64 = 2.0;
// Steps large enough for the unregularized features to collapse outright.
// At LEARNING_RATE the drop shows in kNN AUC but the mean-distance ratio
// only plateaus.
const COLLAPSE_LEARNING_RATE: f64 = 50.0;

struct Bench {
    data: SyntheticData,
    pre: Pretrained,
    fisher: FisherDiagonal,
}

fn bench() -> Bench {
    let spec = SyntheticSpec {
        seed: SEED,
        ..SyntheticSpec::default()
    };
    let data = make_synthetic(&spec).unwrap();
    let a0 = AdapterParams::glorot(&AdapterParams::default_widths(spec.d), SEED + 10).unwrap();
    let h0 = ClassifierHead::glorot(spec.d, spec.num_aux_classes, SEED + 11).unwrap();
    let pre = pretrain_classifier(a0, h0, &data.aux, SgdConfig::PRETRAINING, 2000, BATCH_SIZE, SEED + 12).unwrap();
    let fisher = fisher_diagonal(&pre.adapter, &pre.head, &data.aux, 100, BATCH_SIZE, SEED + 13).unwrap();
    Bench { data, pre, fisher }
}

fn run(b: &Bench, lambda: f64, learning_rate: f64) -> Adapted {
    let cfg = TrainConfig {
        adapt: AdaptConfig {
            lambda,
            mode: AdaptMode::Ewc,
            ..AdaptConfig::default()
        },
        sgd: SgdConfig {
            learning_rate,
            ..SgdConfig::ADAPTATION
        },
        total_minibatches: EWC_MINIBATCHES,
        ..TrainConfig::ewc(SEED + 20)
    };
    adapt(&b.pre.adapter, &b.data.train, Some(&b.fisher), &cfg).unwrap()
}

/// Mean anomalous over mean normal distance to the center.
fn separation(b: &Bench, r: &Adapted, p: &AdapterParams) -> f64 {
    let c = r.center.as_ref().unwrap();
    let s = center_distance_score(c, &p.forward(&b.data.test).unwrap()).unwrap();
    let (mut a, mut na, mut n, mut nn) = (0.0, 0, 0.0, 0);
    for (v, &l) in s.iter().zip(b.data.test.labels().unwrap()) {
        if l == NORMAL_LABEL {
            n += v;
            nn += 1;
        } else {
            a += v;
            na += 1;
        }
    }
    (a / na as f64) / (n / nn as f64)
}

#[test]
fn stronger_penalty_keeps_parameters_closer() {
    let b = bench();
    let runs: Vec<Adapted> = [0.0, 1e2, 1e4, 1e6]
        .into_iter()
        .map(|l| run(&b, l, LEARNING_RATE))
        .collect();
    // the weighted drift sum F (theta - theta*)^2
    let drift: Vec<f64> = runs
        .iter()
        .map(|r| ewc_penalty(&r.params, &b.pre.adapter, &b.fisher, 2.0).unwrap().0)
        .collect();
    for w in drift.windows(2) {
        assert!(w[1] <= w[0], "drift not monotone in lambda: {drift:?}");
    }
    for r in &runs {
        let first = &r.bank.checkpoints()[0];
        assert_eq!((first.minibatch_index, &first.params), (0, &b.pre.adapter));
    }
}

#[test]
fn penalty_reduces_the_collapse_of_anomaly_distances() {
    let b = bench();
    // anomaly/normal distance ratio relative to its value at psi0
    let trace = |lambda: f64| -> Vec<f64> {
        let r = run(&b, lambda, COLLAPSE_LEARNING_RATE);
        let s0 = separation(&b, &r, &b.pre.adapter);
        let mut t: Vec<f64> = r
            .bank
            .checkpoints()
            .iter()
            .map(|c| separation(&b, &r, &c.params) / s0)
            .collect();
        t.push(separation(&b, &r, &r.params) / s0);
        t
    };
    let (free, ewc) = (trace(0.0), trace(1e4));
    let peak = free.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (free_end, ewc_end) = (*free.last().unwrap(), *ewc.last().unwrap());
    assert!(peak > 1.2, "no initial rise: peak {peak}");
    assert!(free_end < peak - 0.2, "no fall after the peak: {peak} -> {free_end}");
    assert!(
        free_end < ewc_end,
        "final ratio without penalty {free_end}, with 1e4 {ewc_end}"
    );
}
