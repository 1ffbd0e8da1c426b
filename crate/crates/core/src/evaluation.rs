//! ROC-AUC, synthetic benchmarks and the one-class experiment protocol.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::{self, Write as _};
use core::str::FromStr;

use rand_distr::{Distribution, StandardNormal};

use crate::adapter::{pretrain_classifier, AdapterParams, ClassifierHead, SgdConfig};
use crate::error::{Error, Result};
use crate::features::{one_class_split, FeatureMatrix};
use crate::objectives::{center_init, fisher_diagonal, AdaptConfig, AdaptMode, CenterVector, OEHead};
use crate::rng;
use crate::scoring::{
    center_distance_score, fill_normalizers, kmeans_fit, kmeans_score, knn_score, ses_score_with, whitening_apply,
    whitening_fit, Gallery, NormalizerKind, SesConfig, DEFAULT_K, NORMALIZER_VAL_FRACTION, WHITENING_EPSILON,
};
use crate::trainer::{
    adapt, train_jo, train_oe, Adapted, CheckpointBank, TrainConfig, TrainError, BATCH_SIZE, EWC_MINIBATCHES,
    FIXED_STOP_MINIBATCHES,
};

/// Area under the ROC curve: the probability that a random anomalous sample
/// scores above a random normal one, ties counting one half. Computed from
/// average ranks (Mann-Whitney U).
pub fn roc_auc(scores: &[f64], anomalous: &[bool]) -> Result<f64> {
    if scores.len() != anomalous.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            anomalous.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("scores contain NaN".into()));
    }
    let n_pos = anomalous.iter().filter(|&&a| a).count();
    let n_neg = anomalous.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument(
            "ROC-AUC needs both normal and anomalous samples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share their average
        let avg = (i + 1 + j) as f64 / 2.0;
        let positives = order[i..j].iter().filter(|&&k| anomalous[k]).count();
        rank_sum += avg * positives as f64;
        i = j;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Scores, labels and AUC of one experiment run.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub scores: Vec<f64>,
    pub anomalous: Vec<bool>,
    pub auc: f64,
    /// `key=value` echo of the run configuration.
    pub metadata: Vec<(String, String)>,
}

// ---------------------------------------------------------------------------
// Synthetic benchmark

/// Label of the normal class in generated train and test sets.
pub const NORMAL_LABEL: u32 = 0;
/// Label of displaced anomalies in generated test sets.
pub const ANOMALY_LABEL: u32 = 1;

/// Parameters of the seeded Gaussian-blob benchmark.
///
/// The plain layout uses every dimension for class structure. The
/// collapse-prone layout splits the dimensions into three groups:
///
/// * semantic: auxiliary classes differ here and anomalies are displaced
///   here, while the normal class is tight;
/// * nuisance: the normal class varies widely, nothing else differs;
/// * residual: tiny, uninformative variance.
///
/// Compactness training first removes the nuisance spread, which helps, and
/// then keeps shrinking the semantic directions until mostly residual noise
/// is left, which destroys the margin between normal and anomalous samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub d: usize,
    /// Number of labeled auxiliary classes used for pretraining.
    pub num_aux_classes: usize,
    /// Rows per auxiliary class, normal training rows, and test rows of each kind.
    pub samples_per_class: usize,
    pub anomaly_displacement: f64,
    pub collapse_prone: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 2,
            d: 16,
            num_aux_classes: 8,
            samples_per_class: 300,
            anomaly_displacement: 1.0,
            collapse_prone: true,
        }
    }
}

const CLASS_RADIUS: f64 = 3.0;
const AUX_STD: f64 = 1.0;
const PLAIN_NORMAL_STD: f64 = 0.5;
const SEMANTIC_STD: f64 = 0.2;
const NUISANCE_STD: f64 = 1.5;
const RESIDUAL_STD: f64 = 0.05;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 || self.num_aux_classes < 1 || self.samples_per_class < 1 {
            return Err(Error::InvalidArgument(format!(
                "synthetic spec needs d >= 2 and positive counts, got d={} classes={} samples={}",
                self.d, self.num_aux_classes, self.samples_per_class
            )));
        }
        if !(self.anomaly_displacement.is_finite() && self.anomaly_displacement >= 0.0) {
            return Err(Error::InvalidArgument(
                "anomaly displacement must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Sizes of the semantic, nuisance and residual groups.
    fn groups(&self) -> (usize, usize) {
        if self.collapse_prone {
            let sem = (3 * self.d / 8).max(1);
            (sem, 3 * self.d / 8)
        } else {
            (self.d, 0)
        }
    }

    fn normal_std(&self, j: usize) -> f64 {
        let (sem, nuis) = self.groups();
        match (self.collapse_prone, j) {
            (false, _) => PLAIN_NORMAL_STD,
            (true, j) if j < sem => SEMANTIC_STD,
            (true, j) if j < sem + nuis => NUISANCE_STD,
            _ => RESIDUAL_STD,
        }
    }
}

/// Generated benchmark data.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    /// Normal training rows, all labeled [`NORMAL_LABEL`].
    pub train: FeatureMatrix,
    /// Normal rows followed by anomalies ([`ANOMALY_LABEL`]).
    pub test: FeatureMatrix,
    /// Auxiliary rows labeled `0..num_aux_classes`.
    pub aux: FeatureMatrix,
}

fn gauss(r: &mut rng::EngineRng) -> f64 {
    StandardNormal.sample(r)
}

fn scale_to(v: &mut [f64], length: f64) {
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x *= length / norm);
    }
}

pub fn make_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let (sem, _) = spec.groups();
    let d = spec.d;
    let m = spec.samples_per_class;
    let mut r = rng::seeded(spec.seed);

    // class 0 is the normal class, 1..=C the auxiliary ones
    let means: Vec<Vec<f64>> = (0..=spec.num_aux_classes)
        .map(|_| {
            let mut mean: Vec<f64> = (0..sem).map(|_| gauss(&mut r)).collect();
            scale_to(&mut mean, CLASS_RADIUS);
            mean.resize(d, 0.0);
            mean
        })
        .collect();
    let draw = |mean: &[f64], normal: bool, r: &mut rng::EngineRng, out: &mut Vec<f64>| {
        for (j, mu) in mean.iter().enumerate() {
            let sd = if normal { spec.normal_std(j) } else { AUX_STD };
            out.push(mu + sd * gauss(r));
        }
    };

    let mut aux = Vec::with_capacity(spec.num_aux_classes * m * d);
    let mut aux_labels = Vec::with_capacity(spec.num_aux_classes * m);
    for (c, mean) in means.iter().enumerate().skip(1) {
        for _ in 0..m {
            draw(mean, false, &mut r, &mut aux);
            aux_labels.push((c - 1) as u32);
        }
    }
    let mut train = Vec::with_capacity(m * d);
    for _ in 0..m {
        draw(&means[0], true, &mut r, &mut train);
    }
    let mut test = Vec::with_capacity(2 * m * d);
    for _ in 0..m {
        draw(&means[0], true, &mut r, &mut test);
    }
    for _ in 0..m {
        let mut shifted = means[0].clone();
        let mut dir: Vec<f64> = (0..sem).map(|_| gauss(&mut r)).collect();
        scale_to(&mut dir, spec.anomaly_displacement);
        shifted.iter_mut().zip(&dir).for_each(|(a, b)| *a += b);
        draw(&shifted, true, &mut r, &mut test);
    }
    let mut test_labels = vec![NORMAL_LABEL; m];
    test_labels.resize(2 * m, ANOMALY_LABEL);
    Ok(SyntheticData {
        train: FeatureMatrix::new(m, d, train)?.with_labels(vec![NORMAL_LABEL; m])?,
        test: FeatureMatrix::new(2 * m, d, test)?.with_labels(test_labels)?,
        aux: FeatureMatrix::new(spec.num_aux_classes * m, d, aux)?.with_labels(aux_labels)?,
    })
}

// ---------------------------------------------------------------------------
// One-class protocol

/// Which adaptation the pipeline runs before scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Unadapted,
    PandaEwc,
    PandaSes,
    FixedStop,
    JointOptimization,
    OutlierExposure,
    Whitening,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Unadapted,
        Variant::PandaEwc,
        Variant::PandaSes,
        Variant::FixedStop,
        Variant::JointOptimization,
        Variant::OutlierExposure,
        Variant::Whitening,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Unadapted => "unadapted",
            Variant::PandaEwc => "panda-ewc",
            Variant::PandaSes => "panda-ses",
            Variant::FixedStop => "fixed-stop",
            Variant::JointOptimization => "jo",
            Variant::OutlierExposure => "oe",
            Variant::Whitening => "whitening",
        }
    }

    pub fn default_scorer(self) -> Scorer {
        match self {
            Variant::PandaSes => Scorer::Ses,
            Variant::OutlierExposure => Scorer::OeLogit,
            _ => Scorer::Knn,
        }
    }

    /// Minibatch budget when the configuration does not override it.
    pub fn default_minibatches(self) -> usize {
        match self {
            Variant::Unadapted | Variant::Whitening => 0,
            Variant::FixedStop | Variant::OutlierExposure => FIXED_STOP_MINIBATCHES,
            Variant::PandaEwc | Variant::PandaSes | Variant::JointOptimization => EWC_MINIBATCHES,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant `{s}`")))
    }
}

/// Anomaly score applied to the adapted features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scorer {
    Center,
    Knn,
    KMeans,
    Ses,
    OeLogit,
}

impl Scorer {
    pub const ALL: [Scorer; 5] = [
        Scorer::Center,
        Scorer::Knn,
        Scorer::KMeans,
        Scorer::Ses,
        Scorer::OeLogit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scorer::Center => "center",
            Scorer::Knn => "knn",
            Scorer::KMeans => "kmeans",
            Scorer::Ses => "ses",
            Scorer::OeLogit => "oe-logit",
        }
    }
}

impl fmt::Display for Scorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scorer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scorer::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scorer `{s}`")))
    }
}

/// Where the initial feature map comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum Psi0Source {
    /// Pretrain a fresh default-width adapter with a softmax head on the
    /// auxiliary data.
    Pretrain { minibatches: usize },
    /// Use an existing extractor. The head is needed for EWC and JO.
    Given {
        adapter: AdapterParams,
        head: Option<ClassifierHead>,
    },
    /// Raw input features, no head.
    Identity,
}

/// Minibatch budget for pretraining when nothing else is configured.
pub const DEFAULT_PRETRAIN_MINIBATCHES: usize = 2000;
pub const DEFAULT_KMEANS_MEANS: usize = 10;
pub const DEFAULT_FISHER_MINIBATCHES: usize = 100;

/// Everything [`run_one_class_experiment`] needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub variant: Variant,
    /// `None` picks [`Variant::default_scorer`].
    pub scorer: Option<Scorer>,
    pub psi0: Psi0Source,
    /// Labeled auxiliary data for pretraining, the Fisher diagonal and JO.
    /// When absent, the non-target rows of the training set are used and
    /// relabeled to `0..C`.
    pub aux: Option<FeatureMatrix>,
    /// Outlier-exposure rows; defaults to the auxiliary rows.
    pub oe: Option<FeatureMatrix>,
    pub pretrain_sgd: SgdConfig,
    pub adapt_sgd: SgdConfig,
    pub oe_sgd: SgdConfig,
    pub lambda: f64,
    pub alpha: f64,
    /// Overrides [`Variant::default_minibatches`].
    pub minibatches: Option<usize>,
    pub batch_size: usize,
    pub checkpoint_interval: Option<usize>,
    pub fisher_minibatches: usize,
    pub k: usize,
    pub kmeans_means: usize,
    pub whitening_epsilon: f64,
    pub normalizer: NormalizerKind,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            variant: Variant::PandaEwc,
            scorer: None,
            psi0: Psi0Source::Pretrain {
                minibatches: DEFAULT_PRETRAIN_MINIBATCHES,
            },
            aux: None,
            oe: None,
            pretrain_sgd: SgdConfig::PRETRAINING,
            adapt_sgd: SgdConfig::ADAPTATION,
            oe_sgd: SgdConfig::OUTLIER_EXPOSURE,
            lambda: AdaptConfig::DEFAULT_LAMBDA,
            alpha: 1.0,
            minibatches: None,
            batch_size: BATCH_SIZE,
            checkpoint_interval: None,
            fisher_minibatches: DEFAULT_FISHER_MINIBATCHES,
            k: DEFAULT_K,
            kmeans_means: DEFAULT_KMEANS_MEANS,
            whitening_epsilon: WHITENING_EPSILON,
            normalizer: NormalizerKind::KnnDistance,
            seed: 0,
        }
    }
}

// Sub-seeds, so that every stage draws from its own stream.
const SEED_ADAPTER_INIT: u64 = 10;
const SEED_HEAD_INIT: u64 = 11;
const SEED_PRETRAIN: u64 = 12;
const SEED_FISHER: u64 = 13;
const SEED_OE_HEAD: u64 = 14;
const SEED_TRAIN: u64 = 20;
const SEED_KMEANS: u64 = 30;
const SEED_NORMALIZER: u64 = 40;

impl PipelineConfig {
    pub fn scorer(&self) -> Scorer {
        self.scorer.unwrap_or(self.variant.default_scorer())
    }

    pub fn total_minibatches(&self) -> usize {
        self.minibatches.unwrap_or(self.variant.default_minibatches())
    }

    fn metadata(&self, normal_class: u32) -> Vec<(String, String)> {
        let mut m = vec![
            ("normal_class".to_string(), normal_class.to_string()),
            ("variant".to_string(), self.variant.name().to_string()),
            ("scorer".to_string(), self.scorer().name().to_string()),
            ("seed".to_string(), self.seed.to_string()),
            ("k".to_string(), self.k.to_string()),
            ("minibatches".to_string(), self.total_minibatches().to_string()),
            ("batch_size".to_string(), self.batch_size.to_string()),
        ];
        match self.variant {
            Variant::PandaEwc => m.push(("lambda".into(), format!("{}", self.lambda))),
            Variant::JointOptimization => m.push(("alpha".into(), format!("{}", self.alpha))),
            _ => {}
        }
        if self.variant != Variant::Unadapted && self.variant != Variant::Whitening {
            let sgd = if self.variant == Variant::OutlierExposure {
                self.oe_sgd
            } else {
                self.adapt_sgd
            };
            m.push(("lr".into(), format!("{}", sgd.learning_rate)));
        }
        m
    }

    fn train_config(&self, mode: AdaptMode) -> TrainConfig {
        TrainConfig {
            adapt: AdaptConfig {
                lambda: self.lambda,
                alpha: self.alpha,
                mode,
            },
            sgd: if self.variant == Variant::OutlierExposure {
                self.oe_sgd
            } else {
                self.adapt_sgd
            },
            total_minibatches: self.total_minibatches(),
            batch_size: self.batch_size,
            checkpoint_interval: self.checkpoint_interval,
            ..TrainConfig::ewc(self.seed.wrapping_add(SEED_TRAIN))
        }
    }
}

fn flatten(e: TrainError) -> Error {
    match e {
        TrainError::Invalid(e) => e,
        TrainError::Aborted(a) => a.error,
    }
}

/// Rows whose label differs from `normal_class`, relabeled to consecutive
/// class indices in label order. `None` when no such row exists.
pub fn auxiliary_rows(train: &FeatureMatrix, normal_class: u32) -> Result<Option<FeatureMatrix>> {
    let labels = train.require_labels()?;
    let keep: Vec<usize> = (0..train.n()).filter(|&i| labels[i] != normal_class).collect();
    if keep.is_empty() {
        return Ok(None);
    }
    let mut remap = BTreeMap::new();
    for &i in &keep {
        remap.insert(labels[i], 0u32);
    }
    for (next, v) in remap.values_mut().enumerate() {
        *v = next as u32;
    }
    let relabeled = keep.iter().map(|&i| remap[&labels[i]]).collect();
    Ok(Some(train.select(&keep)?.with_labels(relabeled)?))
}

fn num_classes(aux: &FeatureMatrix) -> Result<usize> {
    Ok(aux.require_labels()?.iter().max().map_or(0, |&m| m as usize + 1))
}

/// A fitted pipeline: initial and final extractor plus everything a scorer
/// may need.
struct Fitted {
    adapted: Adapted,
    oe_head: Option<OEHead>,
}

fn fit(
    train: &FeatureMatrix,
    aux: Option<&FeatureMatrix>,
    oe: Option<&FeatureMatrix>,
    cfg: &PipelineConfig,
) -> Result<Fitted> {
    let need_aux =
        || aux.ok_or_else(|| Error::InvalidArgument(format!("variant {} needs labeled auxiliary data", cfg.variant)));
    let seed = cfg.seed;
    let (psi0, head) = match &cfg.psi0 {
        Psi0Source::Identity => (AdapterParams::identity(train.d()), None),
        Psi0Source::Given { adapter, head } => (adapter.clone(), head.clone()),
        Psi0Source::Pretrain { minibatches } => {
            let aux = need_aux()?;
            let c = num_classes(aux)?;
            let a0 = AdapterParams::glorot(
                &AdapterParams::default_widths(train.d()),
                seed.wrapping_add(SEED_ADAPTER_INIT),
            )?;
            let h0 = ClassifierHead::glorot(train.d(), c, seed.wrapping_add(SEED_HEAD_INIT))?;
            let pre = pretrain_classifier(
                a0,
                h0,
                aux,
                cfg.pretrain_sgd,
                *minibatches,
                cfg.batch_size,
                seed.wrapping_add(SEED_PRETRAIN),
            )?;
            (pre.adapter, Some(pre.head))
        }
    };
    let need_head = || {
        head.as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("variant {} needs a classifier head", cfg.variant)))
    };
    let mut oe_head = None;
    let adapted = match cfg.variant {
        Variant::Unadapted | Variant::Whitening => Adapted {
            params: psi0.clone(),
            bank: CheckpointBank::new(&psi0, 1),
            run: crate::trainer::TrainRun {
                config: cfg.train_config(AdaptMode::Unregularized),
                loss_trace: Vec::new(),
            },
            center: Some(center_init(&psi0, train)?),
        },
        Variant::PandaEwc => {
            let f = fisher_diagonal(
                &psi0,
                need_head()?,
                need_aux()?,
                cfg.fisher_minibatches,
                cfg.batch_size,
                seed.wrapping_add(SEED_FISHER),
            )?;
            adapt(&psi0, train, Some(&f), &cfg.train_config(AdaptMode::Ewc)).map_err(flatten)?
        }
        Variant::PandaSes | Variant::FixedStop => {
            adapt(&psi0, train, None, &cfg.train_config(AdaptMode::Unregularized)).map_err(flatten)?
        }
        Variant::JointOptimization => {
            let tcfg = cfg.train_config(AdaptMode::Unregularized);
            train_jo(&psi0, need_head()?, need_aux()?, train, &tcfg)
                .map_err(flatten)?
                .0
        }
        Variant::OutlierExposure => {
            let oe = oe
                .or(aux)
                .ok_or_else(|| Error::InvalidArgument("outlier exposure needs OE samples".into()))?;
            let h0 = OEHead::random(psi0.output_dim(), seed.wrapping_add(SEED_OE_HEAD));
            let tcfg = cfg.train_config(AdaptMode::Unregularized);
            let (a, h) = train_oe(&psi0, &h0, train, oe, &tcfg).map_err(flatten)?;
            oe_head = Some(h);
            a
        }
    };
    Ok(Fitted { adapted, oe_head })
}

fn score(fitted: &mut Fitted, train: &FeatureMatrix, test: &FeatureMatrix, cfg: &PipelineConfig) -> Result<Vec<f64>> {
    let params = &fitted.adapted.params;
    let whiten = cfg.variant == Variant::Whitening;
    let features = |x: &FeatureMatrix| params.forward(x);
    let (g, q) = if whiten {
        let g = features(train)?;
        let t = whitening_fit(&g, cfg.whitening_epsilon)?;
        (whitening_apply(&t, &g)?, whitening_apply(&t, &features(test)?)?)
    } else {
        (features(train)?, features(test)?)
    };
    match cfg.scorer() {
        Scorer::Center => {
            let c = match (&fitted.adapted.center, whiten) {
                (Some(c), false) => c.clone(),
                _ => CenterVector::new(g.column_mean())?,
            };
            center_distance_score(&c, &q)
        }
        Scorer::Knn => knn_score(&Gallery::new(g), &q, cfg.k),
        Scorer::KMeans => {
            let m = kmeans_fit(&Gallery::new(g), cfg.kmeans_means, cfg.seed.wrapping_add(SEED_KMEANS))?;
            kmeans_score(&m, &q)
        }
        Scorer::Ses => {
            if whiten {
                return Err(Error::InvalidArgument(
                    "the SES scorer is not defined on whitened features".into(),
                ));
            }
            let ses = SesConfig {
                kind: cfg.normalizer,
                k: cfg.k,
                val_fraction: NORMALIZER_VAL_FRACTION,
                seed: cfg.seed.wrapping_add(SEED_NORMALIZER),
                center: fitted.adapted.center.clone(),
            };
            fill_normalizers(&mut fitted.adapted.bank, train, &ses)?;
            ses_score_with(&fitted.adapted.bank, train, test, &ses)
        }
        Scorer::OeLogit => {
            let h = fitted.oe_head.as_ref().ok_or_else(|| {
                Error::InvalidArgument("the oe-logit scorer needs the outlier-exposure variant".into())
            })?;
            h.scores(params, test)
        }
    }
}

/// Runs one variant of the one-class protocol: rows of `normal_class` in
/// `train` are the normal training set, every test row with another label is
/// anomalous. Deterministic given `cfg.seed`.
pub fn run_one_class_experiment(
    train: &FeatureMatrix,
    test: &FeatureMatrix,
    normal_class: u32,
    cfg: &PipelineConfig,
) -> Result<ScoreReport> {
    let split = one_class_split(train, test, normal_class)?;
    let aux = match &cfg.aux {
        Some(a) => Some(a.clone()),
        None => auxiliary_rows(train, normal_class)?,
    };
    let mut fitted = fit(&split.train, aux.as_ref(), cfg.oe.as_ref(), cfg)?;
    let scores = score(&mut fitted, &split.train, &split.test, cfg)?;
    let auc = roc_auc(&scores, &split.anomalous)?;
    Ok(ScoreReport {
        scores,
        anomalous: split.anomalous,
        auc,
        metadata: cfg.metadata(normal_class),
    })
}

// ---------------------------------------------------------------------------
// Reporting

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    pub auc: f64,
}

/// Per-class AUCs and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
    pub average: f64,
}

/// Collects reports into a table. Rows are labeled by the `normal_class`
/// metadata entry, falling back to the report position.
pub fn report(rs: &[ScoreReport]) -> Result<SummaryTable> {
    if rs.is_empty() {
        return Err(Error::InvalidArgument("no reports to summarize".into()));
    }
    let rows: Vec<SummaryRow> = rs
        .iter()
        .enumerate()
        .map(|(i, r)| SummaryRow {
            label: r
                .metadata
                .iter()
                .find(|(k, _)| k == "normal_class")
                .map_or_else(|| i.to_string(), |(_, v)| v.clone()),
            auc: r.auc,
        })
        .collect();
    let average = rows.iter().map(|r| r.auc).sum::<f64>() / rows.len() as f64;
    Ok(SummaryTable { rows, average })
}

impl SummaryTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,auc\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.6}", r.label, r.auc);
        }
        let _ = writeln!(out, "average,{:.6}", self.average);
        out
    }

    /// Aligned table with AUC in percent.
    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .chain([5, "average".len()])
            .max()
            .unwrap_or(5);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>7}", "class", "AUC %");
        for r in &self.rows {
            let _ = writeln!(out, "{:<width$}  {:>7.1}", r.label, 100.0 * r.auc);
        }
        let _ = writeln!(out, "{:<width$}  {:>7.1}", "average", 100.0 * self.average);
        out
    }
}

impl fmt::Display for SummaryTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::{knn_score, Gallery};
    use proptest::prelude::*;

    fn pairs_oracle(scores: &[f64], anomalous: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut total = 0.0;
        for (i, &a) in anomalous.iter().enumerate() {
            for (j, &b) in anomalous.iter().enumerate() {
                if a && !b {
                    total += 1.0;
                    wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        core::cmp::Ordering::Greater => 1.0,
                        core::cmp::Ordering::Equal => 0.5,
                        core::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        wins / total
    }

    #[test]
    fn auc_fixtures() {
        assert_eq!(
            roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(),
            0.75
        );
        assert_eq!(
            roc_auc(&[0.0, 1.0, 2.0, 3.0], &[false, false, true, true]).unwrap(),
            1.0
        );
        assert_eq!(
            roc_auc(&[0.5; 6], &[false, true, false, true, true, false]).unwrap(),
            0.5
        );
    }

    #[test]
    fn auc_argument_errors() {
        assert!(roc_auc(&[1.0, 2.0], &[false, false]).is_err());
        assert!(roc_auc(&[1.0, 2.0], &[true]).is_err());
        assert!(roc_auc(&[f64::NAN, 2.0], &[true, false]).is_err());
    }

    fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..300).prop_flat_map(|n| {
            (
                proptest::collection::vec((-20i32..20).prop_map(|v| f64::from(v) / 4.0), n),
                proptest::collection::vec(any::<bool>(), n),
            )
                .prop_map(|(s, mut l)| {
                    l[0] = true;
                    l[1] = false;
                    (s, l)
                })
        })
    }

    proptest! {
        #[test]
        fn auc_matches_pair_counting((s, l) in scored_labels()) {
            let got = roc_auc(&s, &l).unwrap();
            prop_assert!((got - pairs_oracle(&s, &l)).abs() < 1e-12);
        }

        #[test]
        fn auc_is_invariant_under_increasing_maps((s, l) in scored_labels()) {
            let mapped: Vec<f64> = s.iter().map(|v| libm::exp(*v) * 3.0 + v * v * v).collect();
            prop_assert_eq!(roc_auc(&s, &l).unwrap(), roc_auc(&mapped, &l).unwrap());
        }

        #[test]
        fn negated_scores_complement((s, l) in scored_labels()) {
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            let sum = roc_auc(&s, &l).unwrap() + roc_auc(&neg, &l).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn large_auc_matches_pair_counting() {
        let mut r = rng::seeded(8);
        let l: Vec<bool> = (0..2000).map(|i| i % 3 == 0).collect();
        let s: Vec<f64> = l
            .iter()
            .map(|&a| libm::round(4.0 * (gauss(&mut r) + if a { 0.7 } else { 0.0 })))
            .collect();
        assert!((roc_auc(&s, &l).unwrap() - pairs_oracle(&s, &l)).abs() < 1e-12);
    }

    fn report_with(auc: f64, class: &str) -> ScoreReport {
        ScoreReport {
            scores: vec![],
            anomalous: vec![],
            auc,
            metadata: vec![("normal_class".into(), class.into())],
        }
    }

    #[test]
    fn report_averages() {
        let one = report(&[report_with(0.8, "3")]).unwrap();
        assert_eq!(one.average, 0.8);
        assert_eq!(one.rows[0].label, "3");
        let two = report(&[report_with(0.9, "0"), report_with(1.0, "1")]).unwrap();
        assert!((two.average - 0.95).abs() < 1e-15);
        assert_eq!(two.to_csv(), "class,auc\n0,0.900000\n1,1.000000\naverage,0.950000\n");
        let text = two.to_text();
        assert!(text.contains("average     95.0"), "{text}");
        assert_eq!(text.lines().count(), 4);
        assert!(report(&[]).is_err());
    }

    #[test]
    fn synthetic_shapes_and_determinism() {
        let spec = SyntheticSpec {
            samples_per_class: 20,
            ..SyntheticSpec::default()
        };
        let a = make_synthetic(&spec).unwrap();
        assert_eq!(a, make_synthetic(&spec).unwrap());
        assert_eq!((a.train.n(), a.test.n(), a.aux.n()), (20, 40, 160));
        assert_eq!(a.aux.labels().unwrap().iter().max(), Some(&7));
        assert_eq!(
            a.test.labels().unwrap().iter().filter(|&&l| l == ANOMALY_LABEL).count(),
            20
        );
        let other = make_synthetic(&SyntheticSpec { seed: 3, ..spec }).unwrap();
        assert_ne!(a.train, other.train);
    }

    #[test]
    fn synthetic_spec_validation() {
        let bad = [
            SyntheticSpec {
                d: 1,
                ..SyntheticSpec::default()
            },
            SyntheticSpec {
                num_aux_classes: 0,
                ..SyntheticSpec::default()
            },
            SyntheticSpec {
                samples_per_class: 0,
                ..SyntheticSpec::default()
            },
            SyntheticSpec {
                anomaly_displacement: -1.0,
                ..SyntheticSpec::default()
            },
        ];
        for s in bad {
            assert!(matches!(make_synthetic(&s), Err(Error::InvalidArgument(_))));
        }
        let tiny = SyntheticSpec {
            d: 2,
            ..SyntheticSpec::default()
        };
        assert!(make_synthetic(&tiny).is_ok());
    }

    fn raw_knn_auc(data: &SyntheticData) -> f64 {
        let g = Gallery::new(data.train.clone());
        let s = knn_score(&g, &data.test, 2).unwrap();
        let l: Vec<bool> = data.test.labels().unwrap().iter().map(|&l| l != NORMAL_LABEL).collect();
        roc_auc(&s, &l).unwrap()
    }

    #[test]
    fn zero_displacement_is_chance() {
        let aucs: Vec<f64> = (0..20)
            .map(|seed| {
                raw_knn_auc(
                    &make_synthetic(&SyntheticSpec {
                        seed,
                        samples_per_class: 100,
                        anomaly_displacement: 0.0,
                        ..SyntheticSpec::default()
                    })
                    .unwrap(),
                )
            })
            .collect();
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        // one run has standard error near 0.04; the mean of 20 near 0.01
        assert!((mean - 0.5).abs() < 0.03, "mean {mean}");
        assert!(aucs.iter().all(|a| (a - 0.5).abs() < 0.15), "{aucs:?}");
    }

    #[test]
    fn large_displacement_separates() {
        for collapse_prone in [false, true] {
            let data = make_synthetic(&SyntheticSpec {
                anomaly_displacement: 30.0,
                samples_per_class: 60,
                collapse_prone,
                ..SyntheticSpec::default()
            })
            .unwrap();
            assert!(raw_knn_auc(&data) > 0.99);
        }
    }

    fn quick(variant: Variant) -> PipelineConfig {
        PipelineConfig {
            variant,
            psi0: Psi0Source::Pretrain { minibatches: 300 },
            minibatches: Some(200),
            fisher_minibatches: 10,
            seed: 5,
            ..PipelineConfig::default()
        }
    }

    fn small_data(displacement: f64) -> SyntheticData {
        make_synthetic(&SyntheticSpec {
            samples_per_class: 60,
            anomaly_displacement: displacement,
            collapse_prone: false,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn unadapted_knn_on_separable_data() {
        let data = small_data(6.0);
        let cfg = PipelineConfig {
            aux: Some(data.aux.clone()),
            ..quick(Variant::Unadapted)
        };
        let r = run_one_class_experiment(&data.train, &data.test, NORMAL_LABEL, &cfg).unwrap();
        assert!(r.auc > 0.95, "auc {}", r.auc);
        assert_eq!(r.scores.len(), data.test.n());
        assert!(r.metadata.contains(&("variant".into(), "unadapted".into())));
    }

    #[test]
    fn every_variant_runs_and_is_deterministic() {
        let data = small_data(1.5);
        for v in Variant::ALL {
            let cfg = PipelineConfig {
                aux: Some(data.aux.clone()),
                ..quick(v)
            };
            let a = run_one_class_experiment(&data.train, &data.test, NORMAL_LABEL, &cfg).unwrap();
            let b = run_one_class_experiment(&data.train, &data.test, NORMAL_LABEL, &cfg).unwrap();
            assert_eq!(a, b, "{v}");
            assert!((0.0..=1.0).contains(&a.auc));
        }
    }

    #[test]
    fn every_scorer_runs_where_defined() {
        let data = small_data(1.5);
        for s in [Scorer::Center, Scorer::Knn, Scorer::KMeans, Scorer::Ses] {
            let cfg = PipelineConfig {
                aux: Some(data.aux.clone()),
                scorer: Some(s),
                ..quick(Variant::FixedStop)
            };
            run_one_class_experiment(&data.train, &data.test, NORMAL_LABEL, &cfg).unwrap();
        }
        let cfg = PipelineConfig {
            aux: Some(data.aux.clone()),
            scorer: Some(Scorer::OeLogit),
            ..quick(Variant::FixedStop)
        };
        assert!(run_one_class_experiment(&data.train, &data.test, NORMAL_LABEL, &cfg).is_err());
    }

    #[test]
    fn whitening_variant_is_knn_on_whitened_features() {
        let data = small_data(1.5);
        let psi0 = AdapterParams::glorot(&AdapterParams::default_widths(16), 1).unwrap();
        let cfg = PipelineConfig {
            variant: Variant::Whitening,
            psi0: Psi0Source::Given {
                adapter: psi0.clone(),
                head: None,
            },
            ..PipelineConfig::default()
        };
        let r = run_one_class_experiment(&data.train, &data.test, NORMAL_LABEL, &cfg).unwrap();
        let g = psi0.forward(&data.train).unwrap();
        let t = whitening_fit(&g, WHITENING_EPSILON).unwrap();
        let gw = whitening_apply(&t, &g).unwrap();
        let qw = whitening_apply(&t, &psi0.forward(&data.test).unwrap()).unwrap();
        let s = knn_score(&Gallery::new(gw), &qw, 2).unwrap();
        assert_eq!(r.scores, s);
    }

    #[test]
    fn all_normal_test_set_is_an_argument_error() {
        let data = small_data(1.0);
        let test = data.train.clone();
        let cfg = PipelineConfig {
            variant: Variant::Unadapted,
            psi0: Psi0Source::Identity,
            ..PipelineConfig::default()
        };
        assert!(matches!(
            run_one_class_experiment(&data.train, &test, NORMAL_LABEL, &cfg),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn missing_head_or_aux_is_reported() {
        let data = small_data(1.0);
        let given = Psi0Source::Given {
            adapter: AdapterParams::identity(16),
            head: None,
        };
        for v in [Variant::PandaEwc, Variant::JointOptimization] {
            let cfg = PipelineConfig {
                variant: v,
                psi0: given.clone(),
                aux: Some(data.aux.clone()),
                ..PipelineConfig::default()
            };
            assert!(run_one_class_experiment(&data.train, &data.test, NORMAL_LABEL, &cfg).is_err());
        }
        let cfg = PipelineConfig {
            variant: Variant::Unadapted,
            ..PipelineConfig::default()
        };
        // no auxiliary rows anywhere, so pretraining cannot run
        assert!(run_one_class_experiment(&data.train, &data.test, NORMAL_LABEL, &cfg).is_err());
    }

    #[test]
    fn auxiliary_rows_relabel_consecutively() {
        let m = FeatureMatrix::from_rows(&[[0.0], [1.0], [2.0], [3.0], [4.0]])
            .unwrap()
            .with_labels(vec![5, 2, 9, 2, 5])
            .unwrap();
        let aux = auxiliary_rows(&m, 9).unwrap().unwrap();
        assert_eq!(aux.labels().unwrap(), &[1, 0, 0, 1]);
        assert_eq!(aux.as_slice(), &[0.0, 1.0, 3.0, 4.0]);
        let only = m.select(&[2]).unwrap();
        assert!(auxiliary_rows(&only, 9).unwrap().is_none());
    }

    #[test]
    fn names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        for s in Scorer::ALL {
            assert_eq!(s.name().parse::<Scorer>().unwrap(), s);
        }
        assert!("nope".parse::<Scorer>().is_err());
    }
}
