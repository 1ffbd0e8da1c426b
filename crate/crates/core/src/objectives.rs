//! Training objectives and their gradients: compactness around a fixed
//! center, the elastic (Fisher-weighted) penalty, joint optimization with the
//! pretraining classifier, and the outlier-exposure logistic loss.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::adapter::{check_class_labels, AdapterParams, ClassifierHead};
use crate::error::{check_dim, Error, Result};
use crate::features::FeatureMatrix;
use crate::rng::{self, BatchSampler};

/// The fixed point normal features are pulled toward. Computed once from the
/// pretrained adapter and never updated.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterVector {
    c: Vec<f64>,
}

impl CenterVector {
    pub fn new(c: Vec<f64>) -> Result<Self> {
        if c.is_empty() || c.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("center must be non-empty and finite".into()));
        }
        Ok(Self { c })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.c
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }
}

/// Per-parameter importance weights (diagonal of the empirical Fisher).
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiagonal {
    f: Vec<f64>,
}

impl FisherDiagonal {
    pub fn new(f: Vec<f64>) -> Result<Self> {
        if f.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Validation(
                "Fisher entries must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { f })
    }

    /// Uniform weights, which turn the elastic penalty into a plain L2 pull.
    pub fn ones(len: usize) -> Self {
        Self { f: vec![1.0; len] }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.f
    }

    pub fn len(&self) -> usize {
        self.f.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f.is_empty()
    }
}

/// How parameter drift away from the pretrained extractor is penalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptMode {
    /// Fisher-weighted quadratic penalty.
    Ewc,
    /// No penalty; the compactness loss alone.
    Unregularized,
    /// Quadratic penalty with every parameter weighted equally.
    L2Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptConfig {
    pub lambda: f64,
    /// Weight of the compactness term in joint optimization.
    pub alpha: f64,
    pub mode: AdaptMode,
}

impl AdaptConfig {
    pub const DEFAULT_LAMBDA: f64 = 1e4;

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite() && self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda and alpha must be finite and nonnegative, got {} and {}",
                self.lambda, self.alpha
            )));
        }
        Ok(())
    }

    /// Penalty weight actually applied: zero in unregularized mode.
    pub fn effective_lambda(&self) -> f64 {
        match self.mode {
            AdaptMode::Unregularized => 0.0,
            _ => self.lambda,
        }
    }
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lambda: Self::DEFAULT_LAMBDA,
            alpha: 1.0,
            mode: AdaptMode::Ewc,
        }
    }
}

/// Linear logistic head `w . psi(x) + b` for outlier exposure.
#[derive(Debug, Clone, PartialEq)]
pub struct OEHead {
    pub w: Vec<f64>,
    pub b: f64,
    /// When unset, `b` stays at zero and receives no gradient.
    pub use_bias: bool,
}

impl OEHead {
    pub fn zeros(dim: usize) -> Self {
        Self {
            w: vec![0.0; dim],
            b: 0.0,
            use_bias: true,
        }
    }

    /// Uniform initialization in `+-1/sqrt(dim)`, zero bias.
    pub fn random(dim: usize, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        let limit = 1.0 / libm::sqrt(dim.max(1) as f64);
        Self {
            w: (0..dim).map(|_| rng.random_range(-limit..limit)).collect(),
            b: 0.0,
            use_bias: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn logit(&self, features: &[f64]) -> f64 {
        let mut z = if self.use_bias { self.b } else { 0.0 };
        for (w, v) in self.w.iter().zip(features) {
            z += w * v;
        }
        z
    }

    /// Logits `w . psi(x) + b` for every row; used directly as anomaly scores.
    pub fn scores(&self, adapter: &AdapterParams, x: &FeatureMatrix) -> Result<Vec<f64>> {
        check_dim("outlier-exposure head width", adapter.output_dim(), self.dim())?;
        let feats = adapter.forward(x)?;
        Ok(feats.rows().map(|r| self.logit(r)).collect())
    }

    pub(crate) fn flat(&self) -> Vec<f64> {
        let mut v = self.w.clone();
        v.push(self.b);
        v
    }

    pub(crate) fn set_flat(&mut self, v: &[f64]) {
        let (w, b) = v.split_at(self.w.len());
        self.w.copy_from_slice(w);
        self.b = if self.use_bias { b[0] } else { 0.0 };
    }
}

/// Mean of the pretrained features over the training set.
pub fn center_init(psi0: &AdapterParams, train: &FeatureMatrix) -> Result<CenterVector> {
    let feats = psi0.forward(train)?;
    CenterVector::new(feats.column_mean())
}

/// `sum_x ||psi(x) - c||^2` over the batch and its parameter gradient.
pub fn compactness_loss(p: &AdapterParams, batch: &FeatureMatrix, c: &CenterVector) -> Result<(f64, Vec<f64>)> {
    check_dim("adapter input width", p.input_dim(), batch.d())?;
    check_dim("center dimension", p.output_dim(), c.dim())?;
    let tape = p.forward_tape(batch.as_slice(), batch.n());
    let mut upstream = tape.output().to_vec();
    let mut loss = 0.0;
    for row in upstream.chunks_exact_mut(c.dim()) {
        for (v, ci) in row.iter_mut().zip(c.as_slice()) {
            let diff = *v - ci;
            loss += diff * diff;
            *v = 2.0 * diff;
        }
    }
    let mut grad = vec![0.0; p.param_count()];
    p.backward_tape(&tape, &upstream, &mut grad, false);
    Ok((loss, grad))
}

/// Per-sample compactness, `||psi(x) - c||^2` for every row.
pub fn compactness_per_sample(p: &AdapterParams, x: &FeatureMatrix, c: &CenterVector) -> Result<Vec<f64>> {
    check_dim("center dimension", p.output_dim(), c.dim())?;
    let feats = p.forward(x)?;
    Ok(feats
        .rows()
        .map(|r| r.iter().zip(c.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect())
}

/// Loss and gradients of a classification objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationLoss {
    pub loss: f64,
    pub grad_adapter: Vec<f64>,
    pub grad_head: Vec<f64>,
}

/// Stable softmax cross-entropy of one logit row against `label`. Writes
/// `softmax(z) - onehot(label)`, scaled by `weight`, into `dz`.
fn softmax_ce(z: &[f64], label: usize, weight: f64, dz: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, v) in dz.iter_mut().zip(z) {
        *d = libm::exp(v - max);
        sum += *d;
    }
    for d in dz.iter_mut() {
        *d = weight * (*d / sum);
    }
    dz[label] -= weight;
    libm::log(sum) + max - z[label]
}

/// Mean softmax cross-entropy over a labeled batch, with gradients for the
/// adapter (`scale`-weighted) accumulated into `grad_adapter`/`grad_head`.
fn accumulate_classification(
    adapter: &AdapterParams,
    head: &ClassifierHead,
    batch: &FeatureMatrix,
    labels: &[u32],
    grad_adapter: &mut [f64],
    grad_head: &mut [f64],
) -> f64 {
    let n = batch.n();
    let classes = head.num_classes();
    let tape = adapter.forward_tape(batch.as_slice(), n);
    let head_tape = head.linear().forward_tape(tape.output(), n);
    let logits = head_tape.output();
    let mut dz = vec![0.0; n * classes];
    let weight = 1.0 / n as f64;
    let mut loss = 0.0;
    for ((z, d), &y) in logits
        .chunks_exact(classes)
        .zip(dz.chunks_exact_mut(classes))
        .zip(labels)
    {
        loss += softmax_ce(z, y as usize, weight, d);
    }
    let dpsi = head
        .linear()
        .backward_tape(&head_tape, &dz, grad_head, true)
        .unwrap_or_default();
    adapter.backward_tape(&tape, &dpsi, grad_adapter, false);
    loss * weight
}

/// Mean softmax cross-entropy of `head(adapter(x))` against the labels.
pub fn classification_loss(
    adapter: &AdapterParams,
    head: &ClassifierHead,
    batch: &FeatureMatrix,
) -> Result<ClassificationLoss> {
    check_dim("adapter input width", adapter.input_dim(), batch.d())?;
    check_dim("classifier head width", adapter.output_dim(), head.feature_dim())?;
    let labels = batch.require_labels()?;
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= head.num_classes()) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {} classes",
            head.num_classes()
        )));
    }
    let mut grad_adapter = vec![0.0; adapter.param_count()];
    let mut grad_head = vec![0.0; head.linear().param_count()];
    let loss = accumulate_classification(adapter, head, batch, labels, &mut grad_adapter, &mut grad_head);
    Ok(ClassificationLoss {
        loss,
        grad_adapter,
        grad_head,
    })
}

/// Empirical Fisher diagonal for the adapter parameters: the average over
/// sampled auxiliary examples of the squared per-sample gradient of the
/// pretraining cross-entropy at the true label. The head is not included.
pub fn fisher_diagonal(
    psi0: &AdapterParams,
    head: &ClassifierHead,
    aux: &FeatureMatrix,
    num_minibatches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<FisherDiagonal> {
    check_dim("auxiliary feature width", psi0.input_dim(), aux.d())?;
    check_dim("classifier head width", psi0.output_dim(), head.feature_dim())?;
    let labels = check_class_labels(aux, head.num_classes())?;
    if num_minibatches == 0 || batch_size == 0 {
        return Err(Error::InvalidArgument(
            "Fisher estimation needs at least one non-empty minibatch".into(),
        ));
    }
    let mut sampler = BatchSampler::new(aux.n(), batch_size, seed);
    let mut indices = Vec::with_capacity(num_minibatches * batch_size);
    for _ in 0..num_minibatches {
        indices.extend(sampler.next_batch());
    }
    fisher_over_samples(psi0, head, aux, labels, &indices)
}

/// Fisher diagonal averaged over explicit sample indices.
pub fn fisher_over_samples(
    psi0: &AdapterParams,
    head: &ClassifierHead,
    aux: &FeatureMatrix,
    labels: &[u32],
    indices: &[usize],
) -> Result<FisherDiagonal> {
    let mut fisher = vec![0.0; psi0.param_count()];
    let mut g = vec![0.0; psi0.param_count()];
    let mut gh = vec![0.0; head.linear().param_count()];
    for &i in indices {
        g.iter_mut().for_each(|v| *v = 0.0);
        gh.iter_mut().for_each(|v| *v = 0.0);
        let x = FeatureMatrix::from_parts_unchecked(1, aux.d(), aux.row(i).to_vec());
        accumulate_classification(psi0, head, &x, &labels[i..=i], &mut g, &mut gh);
        for (f, v) in fisher.iter_mut().zip(&g) {
            *f += v * v;
        }
    }
    let inv = 1.0 / indices.len().max(1) as f64;
    fisher.iter_mut().for_each(|f| *f *= inv);
    FisherDiagonal::new(fisher)
}

/// `(lambda / 2) sum_i F_i (theta_i - theta*_i)^2` and its gradient.
pub fn ewc_penalty(
    p: &AdapterParams,
    psi0: &AdapterParams,
    fisher: &FisherDiagonal,
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    check_dim("reference parameter count", p.param_count(), psi0.param_count())?;
    check_dim("Fisher length", p.param_count(), fisher.len())?;
    let mut penalty = 0.0;
    let grad = p
        .params()
        .iter()
        .zip(psi0.params())
        .zip(fisher.as_slice())
        .map(|((t, t0), f)| {
            let delta = t - t0;
            penalty += f * delta * delta;
            lambda * f * delta
        })
        .collect();
    Ok((0.5 * lambda * penalty, grad))
}

/// Loss and gradients of the joint objective.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLoss {
    pub loss: f64,
    pub grad_adapter: Vec<f64>,
    pub grad_head: Vec<f64>,
}

/// Mean cross-entropy on the auxiliary batch plus `alpha` times the summed
/// compactness on the target batch. Either term is skipped when its batch is
/// absent.
pub fn joint_loss(
    p: &AdapterParams,
    head: &ClassifierHead,
    aux_batch: Option<&FeatureMatrix>,
    target_batch: Option<&FeatureMatrix>,
    c: &CenterVector,
    alpha: f64,
) -> Result<JointLoss> {
    let mut out = JointLoss {
        loss: 0.0,
        grad_adapter: vec![0.0; p.param_count()],
        grad_head: vec![0.0; head.linear().param_count()],
    };
    if let Some(aux) = aux_batch {
        let ce = classification_loss(p, head, aux)?;
        out.loss += ce.loss;
        out.grad_adapter = ce.grad_adapter;
        out.grad_head = ce.grad_head;
    }
    if let Some(target) = target_batch {
        let (loss, grad) = compactness_loss(p, target, c)?;
        out.loss += alpha * loss;
        for (g, v) in out.grad_adapter.iter_mut().zip(grad) {
            *g += alpha * v;
        }
    }
    Ok(out)
}

/// Loss and gradients of the outlier-exposure objective.
#[derive(Debug, Clone, PartialEq)]
pub struct OeLoss {
    pub loss: f64,
    pub grad_adapter: Vec<f64>,
    /// Gradient for `w` followed by the gradient for `b`.
    pub grad_head: Vec<f64>,
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + libm::log1p(libm::exp(-z))
    } else {
        libm::log1p(libm::exp(z))
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// Binary cross-entropy with logit `w . psi(x) + b`, target 0 for normal rows
/// and 1 for outlier-exposure rows. Each half is averaged over its batch and
/// the two halves are summed.
pub fn oe_loss(
    p: &AdapterParams,
    head: &OEHead,
    normal_batch: &FeatureMatrix,
    oe_batch: &FeatureMatrix,
) -> Result<OeLoss> {
    check_dim("outlier-exposure head width", p.output_dim(), head.dim())?;
    check_dim("adapter input width", p.input_dim(), normal_batch.d())?;
    check_dim("adapter input width", p.input_dim(), oe_batch.d())?;
    let mut out = OeLoss {
        loss: 0.0,
        grad_adapter: vec![0.0; p.param_count()],
        grad_head: vec![0.0; head.dim() + 1],
    };
    for (batch, target) in [(normal_batch, 0.0), (oe_batch, 1.0)] {
        let n = batch.n();
        let weight = 1.0 / n as f64;
        let tape = p.forward_tape(batch.as_slice(), n);
        let mut upstream = vec![0.0; n * head.dim()];
        for (feat, up) in tape
            .output()
            .chunks_exact(head.dim())
            .zip(upstream.chunks_exact_mut(head.dim()))
        {
            let z = head.logit(feat);
            out.loss += weight * if target == 0.0 { softplus(z) } else { softplus(-z) };
            let dz = weight * (sigmoid(z) - target);
            for ((u, w), (gw, f)) in up.iter_mut().zip(&head.w).zip(out.grad_head.iter_mut().zip(feat)) {
                *u = dz * w;
                *gw += dz * f;
            }
            if head.use_bias {
                out.grad_head[head.dim()] += dz;
            }
        }
        p.backward_tape(&tape, &upstream, &mut out.grad_adapter, false);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_matrix(n: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut rng = rng::seeded(seed);
        let data = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureMatrix::new(n, d, data).unwrap()
    }

    fn labeled(n: usize, d: usize, classes: u32, seed: u64) -> FeatureMatrix {
        let mut rng = rng::seeded(seed ^ 0xabc);
        let labels = (0..n)
            .map(|i| {
                if i < classes as usize {
                    i as u32
                } else {
                    rng.random_range(0..classes)
                }
            })
            .collect();
        random_matrix(n, d, seed).with_labels(labels).unwrap()
    }

    /// Central differences of `f` over the flat parameters of `p`.
    fn numeric_grad(p: &AdapterParams, f: &dyn Fn(&AdapterParams) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..p.param_count())
            .map(|i| {
                let mut a = p.clone();
                a.params_mut()[i] += h;
                let mut b = p.clone();
                b.params_mut()[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().fold(1e-8f64, |m, v| m.max(v.abs()));
        a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
    }

    #[test]
    fn center_is_mean_of_features() {
        let x = FeatureMatrix::from_rows(&[[0.0, 0.0], [2.0, 2.0]]).unwrap();
        let c = center_init(&AdapterParams::identity(2), &x).unwrap();
        assert_eq!(c.as_slice(), &[1.0, 1.0]);
        let one = FeatureMatrix::from_rows(&[[3.0, 0.5]]).unwrap();
        assert_eq!(
            center_init(&AdapterParams::identity(2), &one).unwrap().as_slice(),
            &[3.0, 0.5]
        );
    }

    #[test]
    fn center_matches_streaming_mean() {
        let p = AdapterParams::glorot(&[3, 5, 4], 3).unwrap();
        let x = random_matrix(37, 3, 8);
        let c = center_init(&p, &x).unwrap();
        let feats = p.forward(&x).unwrap();
        // Welford running mean
        let mut mean = vec![0.0; 4];
        for (k, r) in feats.rows().enumerate() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += (v - *m) / (k + 1) as f64;
            }
        }
        for (a, b) in c.as_slice().iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn compactness_examples() {
        let id = AdapterParams::identity(2);
        let batch = FeatureMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let (loss, _) = compactness_loss(&id, &batch, &CenterVector::new(vec![0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(loss, 2.0);

        // every row already at the center
        let same = FeatureMatrix::from_rows(&[[0.5, 0.25], [0.5, 0.25]]).unwrap();
        let c = CenterVector::new(vec![0.5, 0.25]).unwrap();
        let (loss, grad) = compactness_loss(&id, &same, &c).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));

        let wrong = CenterVector::new(vec![0.0; 3]).unwrap();
        assert!(compactness_loss(&id, &batch, &wrong).is_err());
    }

    #[test]
    fn ewc_examples() {
        let p = AdapterParams::from_flat(&[1, 1], vec![3.5, 0.0]).unwrap();
        let p0 = AdapterParams::from_flat(&[1, 1], vec![0.5, 0.0]).unwrap();
        let f = FisherDiagonal::new(vec![2.0, 0.0]).unwrap();
        let (pen, grad) = ewc_penalty(&p, &p0, &f, 1e4).unwrap();
        assert!((pen - 9e4).abs() < 1e-9);
        assert!((grad[0] - 6e4).abs() < 1e-9);

        let (pen, grad) = ewc_penalty(&p0, &p0, &f, 1e4).unwrap();
        assert_eq!(pen, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));

        let zero = FisherDiagonal::new(vec![0.0, 0.0]).unwrap();
        assert_eq!(ewc_penalty(&p, &p0, &zero, 1e4).unwrap().0, 0.0);
        assert!(ewc_penalty(&p, &p0, &FisherDiagonal::ones(3), 1.0).is_err());
    }

    #[test]
    fn fisher_rejects_negative() {
        assert!(FisherDiagonal::new(vec![1.0, -0.1]).is_err());
    }

    /// Adapter `z = w x + b` with a two-class head fixed to logits `(0, z)`,
    /// i.e. `p(y = 1) = sigmoid(w x + b)`.
    fn logistic_model(w: f64, b: f64) -> (AdapterParams, ClassifierHead) {
        let adapter = AdapterParams::from_flat(&[1, 1], vec![w, b]).unwrap();
        let head =
            ClassifierHead::from_linear(AdapterParams::from_flat(&[1, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap()).unwrap();
        (adapter, head)
    }

    #[test]
    fn fisher_matches_logistic_oracle() {
        let (w, b) = (0.8, -0.3);
        let (adapter, head) = logistic_model(w, b);
        let xs = [0.5, -1.2, 2.0, 0.1];
        let ys = [1u32, 0, 1, 0];
        let aux = FeatureMatrix::new(4, 1, xs.to_vec())
            .unwrap()
            .with_labels(ys.to_vec())
            .unwrap();
        let f = fisher_over_samples(&adapter, &head, &aux, &ys, &[0, 1, 2, 3]).unwrap();
        // d/dw CE = (sigmoid(wx+b) - y) x, d/db = sigmoid(wx+b) - y
        let (mut fw, mut fb) = (0.0, 0.0);
        for (x, y) in xs.iter().zip(ys) {
            let s = 1.0 / (1.0 + (-(w * x + b)).exp());
            let r = s - f64::from(y);
            fw += (r * x).powi(2) / 4.0;
            fb += r * r / 4.0;
        }
        assert!((f.as_slice()[0] - fw).abs() < 1e-10);
        assert!((f.as_slice()[1] - fb).abs() < 1e-10);
    }

    #[test]
    fn dead_unit_has_zero_fisher() {
        // hidden unit 1 has a large negative bias and never fires
        let mut adapter = AdapterParams::glorot(&[2, 2, 2], 1).unwrap();
        let theta = adapter.params().to_vec();
        let mut t = theta.clone();
        t[5] = -100.0; // bias of hidden unit 1
        adapter.set_params(&t).unwrap();
        let head = ClassifierHead::glorot(2, 2, 2).unwrap();
        let aux = labeled(20, 2, 2, 3);
        let f = fisher_diagonal(&adapter, &head, &aux, 3, 8, 0).unwrap();
        // weights into unit 1, its bias, and the output weights reading it
        for i in [2, 3, 5, 7, 9] {
            assert_eq!(f.as_slice()[i], 0.0, "entry {i}");
        }
    }

    #[test]
    fn fisher_nonnegative_and_order_invariant() {
        let adapter = AdapterParams::glorot(&[3, 4, 3], 2).unwrap();
        let head = ClassifierHead::glorot(3, 3, 5).unwrap();
        let aux = labeled(30, 3, 3, 4);
        let labels = aux.labels().unwrap().to_vec();
        let f = fisher_diagonal(&adapter, &head, &aux, 4, 8, 1).unwrap();
        assert!(f.as_slice().iter().all(|&v| v >= 0.0));
        let idx: Vec<usize> = (0..30).collect();
        let rev: Vec<usize> = (0..30).rev().collect();
        let a = fisher_over_samples(&adapter, &head, &aux, &labels, &idx).unwrap();
        let b = fisher_over_samples(&adapter, &head, &aux, &labels, &rev).unwrap();
        assert!(rel_err(a.as_slice(), b.as_slice()) < 1e-12);
        assert_eq!(f, fisher_diagonal(&adapter, &head, &aux, 4, 8, 1).unwrap());
    }

    #[test]
    fn joint_reduces_to_its_parts() {
        let p = AdapterParams::glorot(&[3, 4, 2], 1).unwrap();
        let head = ClassifierHead::glorot(2, 3, 2).unwrap();
        let aux = labeled(8, 3, 3, 5);
        let target = random_matrix(6, 3, 6);
        let c = center_init(&p, &target).unwrap();
        let j = joint_loss(&p, &head, Some(&aux), Some(&target), &c, 0.0).unwrap();
        let ce = classification_loss(&p, &head, &aux).unwrap();
        assert_eq!(j.loss, ce.loss);
        assert_eq!(j.grad_adapter, ce.grad_adapter);
        let j = joint_loss(&p, &head, None, Some(&target), &c, 1.0).unwrap();
        let (loss, grad) = compactness_loss(&p, &target, &c).unwrap();
        assert_eq!(j.loss, loss);
        assert_eq!(j.grad_adapter, grad);
        let unlabeled = random_matrix(4, 3, 1);
        assert!(matches!(
            joint_loss(&p, &head, Some(&unlabeled), None, &c, 1.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn oe_examples() {
        let p = AdapterParams::glorot(&[2, 3, 2], 1).unwrap();
        let head = OEHead::zeros(2);
        let a = random_matrix(5, 2, 1);
        let b = random_matrix(3, 2, 2);
        let out = oe_loss(&p, &head, &a, &b).unwrap();
        assert!((out.loss - 2.0 * core::f64::consts::LN_2).abs() < 1e-12);

        // saturated, correctly signed logits
        let id = AdapterParams::identity(1);
        let strong = OEHead {
            w: vec![100.0],
            b: 0.0,
            use_bias: true,
        };
        let neg = FeatureMatrix::from_rows(&[[-1.0]]).unwrap();
        let pos = FeatureMatrix::from_rows(&[[1.0]]).unwrap();
        assert!(oe_loss(&id, &strong, &neg, &pos).unwrap().loss < 1e-40);
    }

    #[test]
    fn oe_without_bias_gets_no_bias_gradient() {
        let p = AdapterParams::glorot(&[2, 2], 1).unwrap();
        let mut head = OEHead::random(2, 3);
        head.use_bias = false;
        let out = oe_loss(&p, &head, &random_matrix(3, 2, 1), &random_matrix(3, 2, 2)).unwrap();
        assert_eq!(out.grad_head[2], 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn compactness_gradient_fd(seed in any::<u64>()) {
            let p = AdapterParams::glorot(&[3, 5, 4], seed).unwrap();
            let x = random_matrix(6, 3, seed ^ 1);
            let c = CenterVector::new(vec![0.1, -0.2, 0.3, 0.0]).unwrap();
            let (loss, g) = compactness_loss(&p, &x, &c).unwrap();
            prop_assert!(loss >= 0.0);
            let fd = numeric_grad(&p, &|q| compactness_loss(q, &x, &c).unwrap().0);
            prop_assert!(rel_err(&g, &fd) < 1e-4);
        }

        #[test]
        fn ewc_gradient_fd_and_symmetry(seed in any::<u64>(), lambda in 0.0f64..1e4) {
            let p = AdapterParams::glorot(&[2, 3, 2], seed).unwrap();
            let p0 = AdapterParams::glorot(&[2, 3, 2], seed ^ 7).unwrap();
            let mut r = rng::seeded(seed);
            let f = FisherDiagonal::new((0..p.param_count()).map(|_| r.random_range(0.0..2.0)).collect()).unwrap();
            let (pen, g) = ewc_penalty(&p, &p0, &f, lambda).unwrap();
            let (swapped, _) = ewc_penalty(&p0, &p, &f, lambda).unwrap();
            prop_assert!((pen - swapped).abs() <= 1e-12 * pen.abs().max(1.0));
            let fd = numeric_grad(&p, &|q| ewc_penalty(q, &p0, &f, lambda).unwrap().0);
            prop_assert!(rel_err(&g, &fd) < 1e-4);
            let (uniform, _) = ewc_penalty(&p, &p0, &FisherDiagonal::ones(p.param_count()), lambda).unwrap();
            let l2: f64 = p.params().iter().zip(p0.params()).map(|(a, b)| (a - b) * (a - b)).sum();
            prop_assert!((uniform - 0.5 * lambda * l2).abs() <= 1e-9 * uniform.max(1.0));
        }

        #[test]
        fn joint_gradient_fd(seed in any::<u64>(), alpha in 0.0f64..2.0) {
            let p = AdapterParams::glorot(&[3, 4, 2], seed).unwrap();
            let head = ClassifierHead::glorot(2, 3, seed ^ 3).unwrap();
            let aux = labeled(7, 3, 3, seed);
            let target = random_matrix(5, 3, seed ^ 9);
            let c = CenterVector::new(vec![0.2, -0.1]).unwrap();
            let j = joint_loss(&p, &head, Some(&aux), Some(&target), &c, alpha).unwrap();
            let fd = numeric_grad(&p, &|q| joint_loss(q, &head, Some(&aux), Some(&target), &c, alpha).unwrap().loss);
            prop_assert!(rel_err(&j.grad_adapter, &fd) < 1e-4);
            let fd_head = numeric_grad(head.linear(), &|q| {
                let h = ClassifierHead::from_linear(q.clone()).unwrap();
                joint_loss(&p, &h, Some(&aux), Some(&target), &c, alpha).unwrap().loss
            });
            prop_assert!(rel_err(&j.grad_head, &fd_head) < 1e-4);
        }

        #[test]
        fn oe_gradient_fd(seed in any::<u64>()) {
            let p = AdapterParams::glorot(&[3, 4, 2], seed).unwrap();
            let head = OEHead { b: 0.3, ..OEHead::random(2, seed ^ 5) };
            let a = random_matrix(5, 3, seed ^ 1);
            let b = random_matrix(4, 3, seed ^ 2);
            let out = oe_loss(&p, &head, &a, &b).unwrap();
            let fd = numeric_grad(&p, &|q| oe_loss(q, &head, &a, &b).unwrap().loss);
            prop_assert!(rel_err(&out.grad_adapter, &fd) < 1e-4);
            let flat = head.flat();
            let h = 1e-5;
            let fd_head: Vec<f64> = (0..flat.len()).map(|i| {
                let mut up = head.clone();
                let mut v = flat.clone(); v[i] += h; up.set_flat(&v);
                let mut dn = head.clone();
                let mut v = flat.clone(); v[i] -= h; dn.set_flat(&v);
                (oe_loss(&p, &up, &a, &b).unwrap().loss - oe_loss(&p, &dn, &a, &b).unwrap().loss) / (2.0 * h)
            }).collect();
            prop_assert!(rel_err(&out.grad_head, &fd_head) < 1e-4);
        }
    }
}
