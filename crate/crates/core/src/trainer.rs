//! Feature adaptation runs: compactness training with an optional elastic
//! penalty, joint optimization with the pretraining task, and outlier
//! exposure. Every run snapshots the adapter into a checkpoint bank.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::adapter::{snapshot, AdapterParams, Checkpoint, ClassifierHead, OptState, SgdConfig};
use crate::error::{check_dim, Error, Result};
use crate::features::FeatureMatrix;
use crate::objectives::{
    center_init, compactness_loss, ewc_penalty, joint_loss, oe_loss, AdaptConfig, AdaptMode, CenterVector,
    FisherDiagonal, OEHead,
};
use crate::rng::BatchSampler;

/// Snapshots of the adapter taken during one run, starting with the
/// pretrained parameters at minibatch 0.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointBank {
    checkpoints: Vec<Checkpoint>,
    interval: usize,
}

impl CheckpointBank {
    pub fn new(psi0: &AdapterParams, interval: usize) -> Self {
        Self {
            checkpoints: vec![snapshot(psi0, 0)],
            interval,
        }
    }

    /// Rebuilds a bank from stored checkpoints, checking the ordering.
    pub fn from_checkpoints(checkpoints: Vec<Checkpoint>, interval: usize) -> Result<Self> {
        let mut it = checkpoints.into_iter();
        let first = it
            .next()
            .ok_or_else(|| Error::InvalidArgument("a checkpoint bank cannot be empty".into()))?;
        let mut bank = Self {
            checkpoints: vec![first],
            interval,
        };
        for c in it {
            bank.push(c)?;
        }
        Ok(bank)
    }

    pub fn push(&mut self, ckpt: Checkpoint) -> Result<()> {
        let last = self.checkpoints.last().map_or(0, |c| c.minibatch_index);
        if ckpt.minibatch_index <= last {
            return Err(Error::InvalidArgument(format!(
                "checkpoint index {} does not follow {last}",
                ckpt.minibatch_index
            )));
        }
        self.checkpoints.push(ckpt);
        Ok(())
    }

    pub fn checkpoints(&self) -> &[Checkpoint] {
        &self.checkpoints
    }

    pub fn checkpoints_mut(&mut self) -> &mut [Checkpoint] {
        &mut self.checkpoints
    }

    pub fn interval(&self) -> usize {
        self.interval
    }

    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkpoints.is_empty()
    }

    /// Keeps only the first checkpoint.
    pub fn truncate_to_initial(&mut self) {
        self.checkpoints.truncate(1);
    }
}

/// Minibatches of EWC-regularized adaptation.
pub const EWC_MINIBATCHES: usize = 7800;
/// Minibatches of unregularized adaptation with a fixed stopping point.
pub const FIXED_STOP_MINIBATCHES: usize = 2300;
pub const BATCH_SIZE: usize = 32;
/// Snapshot cadence in passes over the training set.
pub const CHECKPOINT_EPOCHS: usize = 5;
/// Snapshots are kept only while the run has seen at most this many samples.
pub const SES_SAMPLE_CAP: u64 = 150_000;

/// Everything that determines an adaptation run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adapt: AdaptConfig,
    pub sgd: SgdConfig,
    pub total_minibatches: usize,
    pub batch_size: usize,
    /// Minibatches between snapshots; `None` means every
    /// [`CHECKPOINT_EPOCHS`] passes over the training set.
    pub checkpoint_interval: Option<usize>,
    /// Upper bound on samples seen for a snapshot to be retained.
    pub sample_cap: Option<u64>,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults for adaptation under the elastic penalty.
    pub fn ewc(seed: u64) -> Self {
        Self {
            adapt: AdaptConfig::default(),
            sgd: SgdConfig::ADAPTATION,
            total_minibatches: EWC_MINIBATCHES,
            batch_size: BATCH_SIZE,
            checkpoint_interval: None,
            sample_cap: Some(SES_SAMPLE_CAP),
            seed,
        }
    }

    /// Unregularized adaptation stopped after a fixed number of minibatches.
    pub fn fixed_stop(seed: u64) -> Self {
        Self {
            adapt: AdaptConfig {
                mode: AdaptMode::Unregularized,
                ..AdaptConfig::default()
            },
            total_minibatches: FIXED_STOP_MINIBATCHES,
            ..Self::ewc(seed)
        }
    }

    /// Outlier-exposure defaults.
    pub fn outlier_exposure(seed: u64) -> Self {
        Self {
            sgd: SgdConfig::OUTLIER_EXPOSURE,
            ..Self::fixed_stop(seed)
        }
    }

    fn validate(&self) -> Result<()> {
        self.adapt.validate()?;
        self.sgd.validate()?;
        if self.batch_size == 0 || self.checkpoint_interval == Some(0) {
            return Err(Error::InvalidArgument(
                "batch size and checkpoint interval must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Snapshot interval for a training set of `n` rows.
    pub fn interval_for(&self, n: usize) -> usize {
        self.checkpoint_interval
            .unwrap_or_else(|| CHECKPOINT_EPOCHS * n.div_ceil(self.batch_size.max(1)))
            .max(1)
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    /// Zero-based minibatch number; the loss is measured before the update.
    pub minibatch: u64,
    pub loss: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub loss_trace: Vec<TraceEntry>,
}

/// Result of a completed run.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapted {
    pub params: AdapterParams,
    pub bank: CheckpointBank,
    pub run: TrainRun,
    pub center: Option<CenterVector>,
}

/// A run stopped by a numeric failure, with everything gathered so far.
#[derive(Debug, Clone, PartialEq)]
pub struct Aborted {
    pub error: Error,
    pub params: AdapterParams,
    pub bank: CheckpointBank,
    pub run: TrainRun,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    /// Bad inputs; nothing was trained.
    Invalid(Error),
    /// Training started and then hit a non-finite loss or gradient.
    Aborted(Box<Aborted>),
}

impl TrainError {
    pub fn error(&self) -> &Error {
        match self {
            TrainError::Invalid(e) => e,
            TrainError::Aborted(a) => &a.error,
        }
    }
}

impl From<Error> for TrainError {
    fn from(e: Error) -> Self {
        TrainError::Invalid(e)
    }
}

impl core::fmt::Display for TrainError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TrainError::Invalid(e) => write!(f, "{e}"),
            TrainError::Aborted(a) => write!(
                f,
                "training aborted after {} minibatches: {}",
                a.run.loss_trace.len(),
                a.error
            ),
        }
    }
}

impl core::error::Error for TrainError {}

/// Shared bookkeeping of a run: samplers, trace, snapshots.
struct RunState {
    bank: CheckpointBank,
    trace: Vec<TraceEntry>,
    interval: usize,
    cap: Option<u64>,
    batch_size: usize,
}

impl RunState {
    fn new(psi0: &AdapterParams, cfg: &TrainConfig, n: usize) -> Self {
        let interval = cfg.interval_for(n);
        Self {
            bank: CheckpointBank::new(psi0, interval),
            trace: Vec::with_capacity(cfg.total_minibatches),
            interval,
            cap: cfg.sample_cap,
            batch_size: cfg.batch_size,
        }
    }

    /// Called after minibatch `done` (1-based) has been applied.
    fn after_step(&mut self, params: &AdapterParams, done: usize) {
        let within_cap = self
            .cap
            .is_none_or(|cap| (done as u64) * (self.batch_size as u64) <= cap);
        if done.is_multiple_of(self.interval) && within_cap {
            self.bank
                .push(snapshot(params, done as u64))
                .expect("snapshot indices increase");
        }
    }

    fn abort(self, error: Error, params: AdapterParams, cfg: &TrainConfig) -> TrainError {
        TrainError::Aborted(Box::new(Aborted {
            error,
            params,
            bank: self.bank,
            run: TrainRun {
                config: cfg.clone(),
                loss_trace: self.trace,
            },
        }))
    }

    fn finish(self, params: AdapterParams, cfg: &TrainConfig, center: Option<CenterVector>) -> Adapted {
        Adapted {
            params,
            bank: self.bank,
            run: TrainRun {
                config: cfg.clone(),
                loss_trace: self.trace,
            },
            center,
        }
    }
}

fn non_finite(what: &str, minibatch: usize) -> Error {
    Error::Numeric(format!("non-finite {what} at minibatch {minibatch}"))
}

/// Compactness adaptation of `psi0` on normal training data, regularized
/// according to `cfg.adapt.mode`. The center is computed from `psi0` once
/// and held fixed.
pub fn adapt(
    psi0: &AdapterParams,
    train: &FeatureMatrix,
    fisher: Option<&FisherDiagonal>,
    cfg: &TrainConfig,
) -> core::result::Result<Adapted, TrainError> {
    cfg.validate()?;
    check_dim("training feature width", psi0.input_dim(), train.d())?;
    let center = center_init(psi0, train)?;
    let lambda = cfg.adapt.effective_lambda();
    let weights = match cfg.adapt.mode {
        AdaptMode::Ewc => {
            let f = fisher.ok_or_else(|| Error::InvalidArgument("EWC adaptation needs a Fisher diagonal".into()))?;
            check_dim("Fisher length", psi0.param_count(), f.len())?;
            Some(f.clone())
        }
        AdaptMode::L2Uniform => Some(FisherDiagonal::ones(psi0.param_count())),
        AdaptMode::Unregularized => None,
    };
    let weights = weights.filter(|_| lambda > 0.0);

    let mut params = psi0.clone();
    let mut opt = OptState::new(cfg.sgd, params.param_count())?;
    let mut sampler = BatchSampler::new(train.n(), cfg.batch_size, cfg.seed);
    let mut state = RunState::new(psi0, cfg, train.n());

    for t in 0..cfg.total_minibatches {
        let batch = train.select(&sampler.next_batch())?;
        let (loss, mut grad) = compactness_loss(&params, &batch, &center)?;
        let mut penalty = 0.0;
        if let Some(f) = &weights {
            let (pen, pgrad) = ewc_penalty(&params, psi0, f, lambda)?;
            penalty = pen;
            for (g, p) in grad.iter_mut().zip(pgrad) {
                *g += p;
            }
        }
        state.trace.push(TraceEntry {
            minibatch: t as u64,
            loss,
            penalty,
        });
        if !(loss.is_finite() && penalty.is_finite()) {
            return Err(state.abort(non_finite("loss", t), params, cfg));
        }
        if let Err(e) = opt.step(params.params_mut(), &grad) {
            return Err(state.abort(e, params, cfg));
        }
        state.after_step(&params, t + 1);
    }
    Ok(state.finish(params, cfg, Some(center)))
}

/// Joint optimization: one auxiliary minibatch (cross-entropy through the
/// pretraining head) and one target minibatch (compactness weighted by
/// `cfg.adapt.alpha`) per step, gradients summed. Head and adapter are
/// updated together.
pub fn train_jo(
    psi0: &AdapterParams,
    head: &ClassifierHead,
    aux: &FeatureMatrix,
    train: &FeatureMatrix,
    cfg: &TrainConfig,
) -> core::result::Result<(Adapted, ClassifierHead), TrainError> {
    cfg.validate()?;
    check_dim("training feature width", psi0.input_dim(), train.d())?;
    check_dim("auxiliary feature width", psi0.input_dim(), aux.d())?;
    check_dim("classifier head width", psi0.output_dim(), head.feature_dim())?;
    aux.require_labels()?;
    let center = center_init(psi0, train)?;

    let mut params = psi0.clone();
    let mut head = head.clone();
    let n_adapter = params.param_count();
    let mut theta: Vec<f64> = params.params().iter().chain(head.linear().params()).copied().collect();
    let mut grad = vec![0.0; theta.len()];
    let mut opt = OptState::new(cfg.sgd, theta.len())?;
    let mut target_sampler = BatchSampler::new(train.n(), cfg.batch_size, cfg.seed);
    let mut aux_sampler = BatchSampler::new(aux.n(), cfg.batch_size, cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut state = RunState::new(psi0, cfg, train.n());

    for t in 0..cfg.total_minibatches {
        let tb = train.select(&target_sampler.next_batch())?;
        let ab = aux.select(&aux_sampler.next_batch())?;
        let j = joint_loss(&params, &head, Some(&ab), Some(&tb), &center, cfg.adapt.alpha)?;
        state.trace.push(TraceEntry {
            minibatch: t as u64,
            loss: j.loss,
            penalty: 0.0,
        });
        if !j.loss.is_finite() {
            return Err(state.abort(non_finite("loss", t), params, cfg));
        }
        grad[..n_adapter].copy_from_slice(&j.grad_adapter);
        grad[n_adapter..].copy_from_slice(&j.grad_head);
        if let Err(e) = opt.step(&mut theta, &grad) {
            return Err(state.abort(e, params, cfg));
        }
        params.params_mut().copy_from_slice(&theta[..n_adapter]);
        head.linear_mut().params_mut().copy_from_slice(&theta[n_adapter..]);
        state.after_step(&params, t + 1);
    }
    Ok((state.finish(params, cfg, Some(center)), head))
}

/// Outlier exposure: logistic regression separating normal training rows
/// (target 0) from outlier-exposure rows (target 1), trained through the
/// adapter. One minibatch of each per step.
pub fn train_oe(
    psi0: &AdapterParams,
    oe_head: &OEHead,
    train: &FeatureMatrix,
    oe: &FeatureMatrix,
    cfg: &TrainConfig,
) -> core::result::Result<(Adapted, OEHead), TrainError> {
    cfg.validate()?;
    check_dim("training feature width", psi0.input_dim(), train.d())?;
    check_dim("outlier-exposure feature width", psi0.input_dim(), oe.d())?;
    check_dim("outlier-exposure head width", psi0.output_dim(), oe_head.dim())?;

    let mut params = psi0.clone();
    let mut head = oe_head.clone();
    let n_adapter = params.param_count();
    let mut theta: Vec<f64> = params.params().iter().copied().chain(head.flat()).collect();
    let mut grad = vec![0.0; theta.len()];
    let mut opt = OptState::new(cfg.sgd, theta.len())?;
    let mut normal_sampler = BatchSampler::new(train.n(), cfg.batch_size, cfg.seed);
    let mut oe_sampler = BatchSampler::new(oe.n(), cfg.batch_size, cfg.seed ^ 0x5851_f42d_4c95_7f2d);
    let mut state = RunState::new(psi0, cfg, train.n());

    for t in 0..cfg.total_minibatches {
        let nb = train.select(&normal_sampler.next_batch())?;
        let ob = oe.select(&oe_sampler.next_batch())?;
        let out = oe_loss(&params, &head, &nb, &ob)?;
        state.trace.push(TraceEntry {
            minibatch: t as u64,
            loss: out.loss,
            penalty: 0.0,
        });
        if !out.loss.is_finite() {
            return Err(state.abort(non_finite("loss", t), params, cfg));
        }
        grad[..n_adapter].copy_from_slice(&out.grad_adapter);
        grad[n_adapter..].copy_from_slice(&out.grad_head);
        if let Err(e) = opt.step(&mut theta, &grad) {
            return Err(state.abort(e, params, cfg));
        }
        params.params_mut().copy_from_slice(&theta[..n_adapter]);
        head.set_flat(&theta[n_adapter..]);
        state.after_step(&params, t + 1);
    }
    Ok((state.finish(params, cfg, None), head))
}
