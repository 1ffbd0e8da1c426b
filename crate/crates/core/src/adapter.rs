//! The adapter network: a fully connected rectifier network with hand-written
//! forward and reverse passes, SGD with momentum and global-norm clipping, and
//! auxiliary-task pretraining.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::features::FeatureMatrix;
use crate::objectives;
use crate::rng::{self, BatchSampler};

/// Weights and biases of a multilayer perceptron, stored as one flat vector.
///
/// Layer `l` maps `widths[l]` inputs to `widths[l + 1]` outputs. Its weight
/// matrix (outputs x inputs, row-major) is followed by its bias in the flat
/// vector, and the layers follow each other in order. Hidden layers use a
/// rectifier; the output layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    widths: Vec<usize>,
    theta: Vec<f64>,
}

/// Borrowed view of one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerView<'a> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: &'a [f64],
    pub bias: &'a [f64],
}

/// Per-layer activations recorded by the forward pass. Entry 0 is the input.
pub(crate) struct Tape {
    acts: Vec<Vec<f64>>,
    n: usize,
}

impl Tape {
    pub(crate) fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

fn param_count_for(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "an adapter needs at least one layer, got widths {widths:?}"
        )));
    }
    if widths.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "layer widths must be positive, got {widths:?}"
        )));
    }
    Ok(())
}

impl AdapterParams {
    /// Default architecture for `d`-dimensional features: `d -> 2d -> 2d -> d`.
    pub fn default_widths(d: usize) -> Vec<usize> {
        vec![d, 2 * d, 2 * d, d]
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        check_widths(widths)?;
        Ok(Self {
            widths: widths.to_vec(),
            theta: vec![0.0; param_count_for(widths)],
        })
    }

    pub fn from_flat(widths: &[usize], theta: Vec<f64>) -> Result<Self> {
        check_widths(widths)?;
        check_dim("flat parameter vector", param_count_for(widths), theta.len())?;
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite adapter parameter".into()));
        }
        Ok(Self {
            widths: widths.to_vec(),
            theta,
        })
    }

    /// Uniform fan-based initialization in `+-sqrt(6 / (fan_in + fan_out))`,
    /// zero biases.
    pub fn glorot(widths: &[usize], seed: u64) -> Result<Self> {
        let mut p = Self::zeros(widths)?;
        let mut rng = rng::seeded(seed);
        for l in 0..p.num_layers() {
            let (w0, b0, _) = p.offsets(l);
            let (fan_in, fan_out) = (p.widths[l], p.widths[l + 1]);
            let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
            for w in &mut p.theta[w0..b0] {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(p)
    }

    /// Single square layer with identity weights and zero bias.
    pub fn identity(d: usize) -> Self {
        let mut theta = vec![0.0; d * d + d];
        for i in 0..d {
            theta[i * d + i] = 1.0;
        }
        Self {
            widths: vec![d, d],
            theta,
        }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("widths validated non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    /// The flattened parameter vector.
    pub fn params(&self) -> &[f64] {
        &self.theta
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    /// Overwrites the parameters from a flat vector of matching length.
    pub fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        check_dim("flat parameter vector", self.theta.len(), theta.len())?;
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite adapter parameter".into()));
        }
        self.theta.copy_from_slice(theta);
        Ok(())
    }

    /// Start of the weight block, start of the bias block, and end of layer `l`.
    fn offsets(&self, l: usize) -> (usize, usize, usize) {
        let start = param_count_for(&self.widths[..=l]);
        let bias = start + self.widths[l] * self.widths[l + 1];
        (start, bias, bias + self.widths[l + 1])
    }

    pub fn layer(&self, l: usize) -> LayerView<'_> {
        let (w0, b0, end) = self.offsets(l);
        LayerView {
            inputs: self.widths[l],
            outputs: self.widths[l + 1],
            weight: &self.theta[w0..b0],
            bias: &self.theta[b0..end],
        }
    }

    pub fn forward(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        check_dim("adapter input width", self.input_dim(), x.d())?;
        let tape = self.forward_tape(x.as_slice(), x.n());
        let out = tape.acts.into_iter().last().unwrap_or_default();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("adapter produced non-finite features".into()));
        }
        Ok(FeatureMatrix::from_parts_unchecked(x.n(), self.output_dim(), out))
    }

    pub(crate) fn forward_tape(&self, x: &[f64], n: usize) -> Tape {
        let mut acts = Vec::with_capacity(self.widths.len());
        acts.push(x.to_vec());
        let last = self.num_layers() - 1;
        for l in 0..self.num_layers() {
            let layer = self.layer(l);
            let input = &acts[l];
            let mut out = vec![0.0; n * layer.outputs];
            for (xi, yi) in input
                .chunks_exact(layer.inputs)
                .zip(out.chunks_exact_mut(layer.outputs))
            {
                for (o, y) in yi.iter_mut().enumerate() {
                    let row = &layer.weight[o * layer.inputs..(o + 1) * layer.inputs];
                    let mut s = layer.bias[o];
                    for (w, v) in row.iter().zip(xi) {
                        s += w * v;
                    }
                    *y = if l < last && s < 0.0 { 0.0 } else { s };
                }
            }
            acts.push(out);
        }
        Tape { acts, n }
    }

    /// Accumulates into `grad` the gradient of `sum(upstream .* output)` with
    /// respect to the flat parameters. Returns the gradient with respect to the
    /// input when `want_input` is set.
    pub(crate) fn backward_tape(
        &self,
        tape: &Tape,
        upstream: &[f64],
        grad: &mut [f64],
        want_input: bool,
    ) -> Option<Vec<f64>> {
        debug_assert_eq!(grad.len(), self.theta.len());
        let n = tape.n;
        let mut delta = upstream.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (w0, b0, end) = self.offsets(l);
            let (inputs, outputs) = (self.widths[l], self.widths[l + 1]);
            let input = &tape.acts[l];
            {
                let (gw, gb) = grad[w0..end].split_at_mut(b0 - w0);
                for (di, xi) in delta.chunks_exact(outputs).zip(input.chunks_exact(inputs)) {
                    for (o, &g) in di.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        gb[o] += g;
                        for (w, v) in gw[o * inputs..(o + 1) * inputs].iter_mut().zip(xi) {
                            *w += g * v;
                        }
                    }
                }
            }
            if l == 0 && !want_input {
                break;
            }
            let weight = &self.theta[w0..b0];
            let mut prev = vec![0.0; n * inputs];
            for (di, pi) in delta.chunks_exact(outputs).zip(prev.chunks_exact_mut(inputs)) {
                for (o, &g) in di.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    for (p, w) in pi.iter_mut().zip(&weight[o * inputs..(o + 1) * inputs]) {
                        *p += g * w;
                    }
                }
            }
            if l > 0 {
                // rectifier derivative, read off the stored post-activation
                for (p, a) in prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        want_input.then_some(delta)
    }

    /// Gradient of `sum_ij upstream_ij * forward(x)_ij` with respect to the
    /// flattened parameters.
    pub fn backward(&self, x: &FeatureMatrix, upstream: &FeatureMatrix) -> Result<Vec<f64>> {
        check_dim("adapter input width", self.input_dim(), x.d())?;
        check_dim("upstream gradient rows", x.n(), upstream.n())?;
        check_dim("upstream gradient width", self.output_dim(), upstream.d())?;
        let tape = self.forward_tape(x.as_slice(), x.n());
        let mut grad = vec![0.0; self.param_count()];
        self.backward_tape(&tape, upstream.as_slice(), &mut grad, false);
        Ok(grad)
    }
}

/// Linear classification layer `W psi(x) + b` used for auxiliary pretraining
/// and joint optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    linear: AdapterParams,
}

impl ClassifierHead {
    pub fn zeros(feature_dim: usize, num_classes: usize) -> Result<Self> {
        Ok(Self {
            linear: AdapterParams::zeros(&[feature_dim, num_classes])?,
        })
    }

    pub fn glorot(feature_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            linear: AdapterParams::glorot(&[feature_dim, num_classes], seed)?,
        })
    }

    /// Wraps a single-layer network as a head.
    pub fn from_linear(linear: AdapterParams) -> Result<Self> {
        if linear.num_layers() != 1 {
            return Err(Error::InvalidArgument(
                "a classifier head is a single linear layer".into(),
            ));
        }
        Ok(Self { linear })
    }

    pub fn linear(&self) -> &AdapterParams {
        &self.linear
    }

    pub(crate) fn linear_mut(&mut self) -> &mut AdapterParams {
        &mut self.linear
    }

    pub fn feature_dim(&self) -> usize {
        self.linear.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.linear.output_dim()
    }

    /// Arg-max class of `W adapter(x) + b` for every row.
    pub fn predict(&self, adapter: &AdapterParams, x: &FeatureMatrix) -> Result<Vec<u32>> {
        check_dim("classifier head width", self.feature_dim(), adapter.output_dim())?;
        let logits = self.linear.forward(&adapter.forward(x)?)?;
        Ok(logits
            .rows()
            .map(|r| {
                let mut best = 0;
                for (i, v) in r.iter().enumerate() {
                    if *v > r[best] {
                        best = i;
                    }
                }
                best as u32
            })
            .collect())
    }
}

/// SGD hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global L2 norm the raw gradient is clipped to.
    pub clip_norm: f64,
}

impl SgdConfig {
    /// Settings for compactness adaptation.
    pub const ADAPTATION: SgdConfig = SgdConfig {
        learning_rate: 1e-2,
        momentum: 0.9,
        weight_decay: 5e-5,
        clip_norm: 1e-3,
    };

    /// Settings for outlier-exposure training (no weight decay).
    pub const OUTLIER_EXPOSURE: SgdConfig = SgdConfig {
        learning_rate: 0.1,
        momentum: 0.9,
        weight_decay: 0.0,
        clip_norm: 1e-3,
    };

    /// Settings for auxiliary-task pretraining of the adapter.
    pub const PRETRAINING: SgdConfig = SgdConfig {
        learning_rate: 0.05,
        momentum: 0.9,
        weight_decay: 5e-5,
        clip_norm: 5.0,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite()
            && self.clip_norm > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid SGD settings {self:?}: need lr > 0, 0 <= momentum < 1, weight decay >= 0, clip > 0"
            )))
        }
    }
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self::ADAPTATION
    }
}

/// Optimizer state: hyperparameters plus the momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    config: SgdConfig,
    velocity: Vec<f64>,
}

impl OptState {
    pub fn new(config: SgdConfig, param_count: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: vec![0.0; param_count],
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    /// One update on a flat parameter slice. The gradient is scaled down to the
    /// clip norm when it exceeds it; weight decay is added after clipping.
    /// Returns the norm of the applied (clipped) gradient.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<f64> {
        check_dim("gradient length", theta.len(), grad.len())?;
        check_dim("velocity length", theta.len(), self.velocity.len())?;
        let norm = libm::sqrt(grad.iter().map(|g| g * g).sum::<f64>());
        if !norm.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        let SgdConfig {
            learning_rate: lr,
            momentum,
            weight_decay,
            clip_norm,
        } = self.config;
        let scale = if norm > clip_norm { clip_norm / norm } else { 1.0 };
        for ((t, v), g) in theta.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = momentum * *v + g * scale + weight_decay * *t;
            *t -= lr * *v;
        }
        Ok(norm * scale)
    }
}

/// Applies one SGD step to `p`.
pub fn sgd_step(p: &mut AdapterParams, grad: &[f64], o: &mut OptState) -> Result<f64> {
    o.step(p.params_mut(), grad)
}

/// A frozen copy of the adapter taken during training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: AdapterParams,
    pub minibatch_index: u64,
    /// Typical normal-sample score under this checkpoint, filled in by scoring.
    /// `None` until computed, or when the checkpoint is collapsed.
    pub normalizer: Option<f64>,
}

pub fn snapshot(p: &AdapterParams, minibatch_index: u64) -> Checkpoint {
    Checkpoint {
        params: p.clone(),
        minibatch_index,
        normalizer: None,
    }
}

/// A pretrained adapter together with the head it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    pub adapter: AdapterParams,
    pub head: ClassifierHead,
    pub loss_trace: Vec<f64>,
}

/// Checks that `aux` carries labels `0..C-1` for the head's `C` classes and
/// that at least two distinct classes occur.
pub(crate) fn check_class_labels(aux: &FeatureMatrix, num_classes: usize) -> Result<&[u32]> {
    let labels = aux.require_labels()?;
    if num_classes < 2 {
        return Err(Error::InvalidArgument(
            "classification needs at least two classes".into(),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        return Err(Error::InvalidArgument("auxiliary data contains a single class".into()));
    }
    Ok(labels)
}

/// Trains adapter and head jointly under softmax cross-entropy on labeled
/// auxiliary data, producing the pretrained extractor.
pub fn pretrain_classifier(
    adapter: AdapterParams,
    head: ClassifierHead,
    aux: &FeatureMatrix,
    sgd: SgdConfig,
    minibatches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Pretrained> {
    check_dim("auxiliary feature width", adapter.input_dim(), aux.d())?;
    check_dim("classifier head width", adapter.output_dim(), head.feature_dim())?;
    check_class_labels(aux, head.num_classes())?;
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let (mut adapter, mut head) = (adapter, head);
    let n_adapter = adapter.param_count();
    let mut opt = OptState::new(sgd, n_adapter + head.linear.param_count())?;
    let mut sampler = BatchSampler::new(aux.n(), batch_size, seed);
    let mut theta: Vec<f64> = adapter.params().iter().chain(head.linear.params()).copied().collect();
    let mut grad = vec![0.0; theta.len()];
    let mut loss_trace = Vec::with_capacity(minibatches);
    for _ in 0..minibatches {
        let batch = aux.select(&sampler.next_batch())?;
        let out = objectives::classification_loss(&adapter, &head, &batch)?;
        if !out.loss.is_finite() {
            return Err(Error::Numeric("non-finite pretraining loss".into()));
        }
        loss_trace.push(out.loss);
        grad[..n_adapter].copy_from_slice(&out.grad_adapter);
        grad[n_adapter..].copy_from_slice(&out.grad_head);
        opt.step(&mut theta, &grad)?;
        adapter.params_mut().copy_from_slice(&theta[..n_adapter]);
        head.linear.params_mut().copy_from_slice(&theta[n_adapter..]);
    }
    Ok(Pretrained {
        adapter,
        head,
        loss_trace,
    })
}

/// Fraction of rows whose predicted class equals the label.
pub fn accuracy(adapter: &AdapterParams, head: &ClassifierHead, x: &FeatureMatrix) -> Result<f64> {
    let labels = x.require_labels()?;
    let pred = head.predict(adapter, x)?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}
