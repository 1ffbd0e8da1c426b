//! Anomaly scoring on (adapted) features: distance to the center, k nearest
//! neighbours, nearest K-means centroid, a closed-form whitening baseline,
//! and sample-wise early stopping over a checkpoint bank.
//!
//! Squared distances use `|a|^2 + |b|^2 - 2 a.b`, clamped at zero before the
//! square root. Norms and dot products share one summation routine, so a query
//! identical to a gallery row is at distance exactly zero.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::adapter::Checkpoint;
use crate::error::{check_dim, Error, Result};
use crate::features::{split_indices, FeatureMatrix};
use crate::objectives::{compactness_per_sample, CenterVector};
use crate::rng;
use crate::trainer::CheckpointBank;

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
pub(crate) fn sq_distance(a: &[f64], a_norm: f64, b: &[f64], b_norm: f64) -> f64 {
    let d = a_norm + b_norm - 2.0 * dot(a, b);
    if d > 0.0 {
        d
    } else {
        0.0
    }
}

/// Training features that queries are compared against, with cached squared
/// row norms.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    features: FeatureMatrix,
    sq_norms: Vec<f64>,
}

impl Gallery {
    pub fn new(features: FeatureMatrix) -> Self {
        let sq_norms = features.rows().map(|r| dot(r, r)).collect();
        Self { features, sq_norms }
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    pub fn sq_norms(&self) -> &[f64] {
        &self.sq_norms
    }

    pub fn n(&self) -> usize {
        self.features.n()
    }

    pub fn d(&self) -> usize {
        self.features.d()
    }
}

/// Euclidean distance of every query row to the center.
pub fn center_distance_score(c: &CenterVector, q: &FeatureMatrix) -> Result<Vec<f64>> {
    check_dim("query width", c.dim(), q.d())?;
    let c_norm = dot(c.as_slice(), c.as_slice());
    Ok(q.rows()
        .map(|r| libm::sqrt(sq_distance(r, dot(r, r), c.as_slice(), c_norm)))
        .collect())
}

/// Mean Euclidean distance from each query to its `k` nearest gallery rows.
/// Ties go to the lower gallery index.
pub fn knn_score(g: &Gallery, q: &FeatureMatrix, k: usize) -> Result<Vec<f64>> {
    check_dim("query width", g.d(), q.d())?;
    if k == 0 || g.n() < k {
        return Err(Error::InvalidArgument(format!(
            "kNN needs 1 <= k <= gallery size, got k = {k} with {} rows",
            g.n()
        )));
    }
    // sorted ascending by (distance, index)
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    let mut scores = Vec::with_capacity(q.n());
    for row in q.rows() {
        let q_norm = dot(row, row);
        best.clear();
        for (i, (g_row, &g_norm)) in g.features.rows().zip(&g.sq_norms).enumerate() {
            let d = sq_distance(row, q_norm, g_row, g_norm);
            if best.len() == k && d >= best[k - 1].0 {
                continue;
            }
            let pos = best.partition_point(|&(bd, _)| bd <= d);
            best.insert(pos, (d, i));
            best.truncate(k);
        }
        let sum: f64 = best.iter().map(|&(d, _)| libm::sqrt(d)).sum();
        scores.push(sum / k as f64);
    }
    Ok(scores)
}

/// Cluster centroids fitted on the gallery.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansModel {
    centroids: FeatureMatrix,
    iterations: usize,
}

impl KMeansModel {
    pub fn centroids(&self) -> &FeatureMatrix {
        &self.centroids
    }

    pub fn k(&self) -> usize {
        self.centroids.n()
    }

    /// Lloyd iterations executed before convergence or the cap.
    pub fn iterations(&self) -> usize {
        self.iterations
    }
}

pub const KMEANS_TOLERANCE: f64 = 1e-6;
pub const KMEANS_MAX_ITERATIONS: usize = 300;

fn nearest(row: &[f64], row_norm: f64, centroids: &[Vec<f64>], norms: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, (c, &cn)) in centroids.iter().zip(norms).enumerate() {
        let d = sq_distance(row, row_norm, c, cn);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// K-means with k-means++ seeding and Lloyd refinement. Stops when no centroid
/// moves by more than [`KMEANS_TOLERANCE`] or after
/// [`KMEANS_MAX_ITERATIONS`]. An empty cluster is re-seeded at the point
/// farthest from its assigned centroid.
pub fn kmeans_fit(g: &Gallery, k: usize, seed: u64) -> Result<KMeansModel> {
    let n = g.n();
    let d = g.d();
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!(
            "K-means needs 1 <= k <= gallery size, got k = {k} with {n} rows"
        )));
    }
    let rows: Vec<&[f64]> = g.features.rows().collect();
    let mut rng = rng::seeded(seed);

    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(rows[rng.random_range(0..n)].to_vec());
    let mut min_d: Vec<f64> = vec![f64::INFINITY; n];
    while centroids.len() < k {
        let last = centroids.last().expect("at least one centroid");
        let last_norm = dot(last, last);
        for (i, m) in min_d.iter_mut().enumerate() {
            *m = m.min(sq_distance(rows[i], g.sq_norms[i], last, last_norm));
        }
        let total: f64 = min_d.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &m) in min_d.iter().enumerate() {
                if m > 0.0 && target < m {
                    chosen = i;
                    break;
                }
                target -= m;
            }
            // guard against rounding landing on an existing centroid
            if min_d[chosen] == 0.0 {
                chosen = min_d
                    .iter()
                    .enumerate()
                    .fold((0, -1.0), |b, (i, &m)| if m > b.1 { (i, m) } else { b })
                    .0;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.push(rows[pick].to_vec());
    }

    let mut assign = vec![0usize; n];
    let mut dist = vec![0.0; n];
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERATIONS {
        iterations += 1;
        let norms: Vec<f64> = centroids.iter().map(|c| dot(c, c)).collect();
        for i in 0..n {
            let (j, dd) = nearest(rows[i], g.sq_norms[i], &centroids, &norms);
            assign[i] = j;
            dist[i] = dd;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &j) in assign.iter().enumerate() {
            counts[j] += 1;
            for (s, v) in sums[j].iter_mut().zip(rows[i]) {
                *s += v;
            }
        }
        let mut taken = vec![false; n];
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .fold((0, -1.0), |b, i| if dist[i] > b.1 { (i, dist[i]) } else { b })
                    .0;
                taken[far] = true;
                dist[far] = 0.0;
                sums[j] = rows[far].to_vec();
                counts[j] = 1;
            }
        }
        let mut shift: f64 = 0.0;
        for ((c, s), &cnt) in centroids.iter_mut().zip(&sums).zip(&counts) {
            let inv = 1.0 / cnt as f64;
            let mut moved = 0.0;
            for (ci, si) in c.iter_mut().zip(s) {
                let next = si * inv;
                moved += (next - *ci) * (next - *ci);
                *ci = next;
            }
            shift = shift.max(libm::sqrt(moved));
        }
        if shift < KMEANS_TOLERANCE {
            break;
        }
    }
    let data = centroids.into_iter().flatten().collect();
    Ok(KMeansModel {
        centroids: FeatureMatrix::new(k, d, data)?,
        iterations,
    })
}

/// Euclidean distance from every query to its nearest centroid.
pub fn kmeans_score(m: &KMeansModel, q: &FeatureMatrix) -> Result<Vec<f64>> {
    check_dim("query width", m.centroids.d(), q.d())?;
    let centroids: Vec<Vec<f64>> = m.centroids.rows().map(<[f64]>::to_vec).collect();
    let norms: Vec<f64> = centroids.iter().map(|c| dot(c, c)).collect();
    Ok(q.rows()
        .map(|r| libm::sqrt(nearest(r, dot(r, r), &centroids, &norms).1))
        .collect())
}

/// Affine map `x -> A (x - mu)` that gives the fitting set identity covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform {
    mean: Vec<f64>,
    /// `d x d`, row-major; row `i` is `u_i / sqrt(max(lambda_i, epsilon))`.
    projection: Vec<f64>,
    eigenvalues: Vec<f64>,
    epsilon: f64,
}

impl WhiteningTransform {
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    /// Covariance eigenvalues (before flooring), matching the projection rows.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub const WHITENING_EPSILON: f64 = 1e-5;

/// Unbiased sample covariance (divides by `n - 1`), row-major `d x d`.
pub fn covariance(x: &FeatureMatrix) -> Vec<f64> {
    let d = x.d();
    let mean = x.column_mean();
    let mut cov = vec![0.0; d * d];
    let mut centred = vec![0.0; d];
    for r in x.rows() {
        for ((c, v), m) in centred.iter_mut().zip(r).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += centred[i] * centred[j];
            }
        }
    }
    let inv = 1.0 / (x.n() as f64 - 1.0);
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] * inv;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    cov
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the matching unit eigenvectors as rows.
pub fn symmetric_eigen(a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>();
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * d + j] * m[i * d + j])
            .sum();
        if off <= 1e-30 * scale || off == 0.0 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * d + p];
                let aqq = m[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = {
                    let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sign / (libm::fabs(theta) + libm::sqrt(theta * theta + 1.0))
                };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let values: Vec<f64> = (0..d).map(|i| m[i * d + i]).collect();
    // columns of v are eigenvectors; return them as rows
    let mut rows = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            rows[i * d + k] = v[k * d + i];
        }
    }
    (values, rows)
}

pub fn whitening_fit(train: &FeatureMatrix, epsilon: f64) -> Result<WhiteningTransform> {
    if train.n() < 2 {
        return Err(Error::InvalidArgument("whitening needs at least two samples".into()));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "eigenvalue floor must be positive, got {epsilon}"
        )));
    }
    let d = train.d();
    let (eigenvalues, vectors) = symmetric_eigen(&covariance(train), d);
    let mut projection = vectors;
    for (i, &lam) in eigenvalues.iter().enumerate() {
        let s = 1.0 / libm::sqrt(lam.max(epsilon));
        projection[i * d..(i + 1) * d].iter_mut().for_each(|v| *v *= s);
    }
    Ok(WhiteningTransform {
        mean: train.column_mean(),
        projection,
        eigenvalues,
        epsilon,
    })
}

pub fn whitening_apply(t: &WhiteningTransform, q: &FeatureMatrix) -> Result<FeatureMatrix> {
    let d = t.dim();
    check_dim("query width", d, q.d())?;
    let mut out = Vec::with_capacity(q.n() * d);
    let mut centred = vec![0.0; d];
    for r in q.rows() {
        for ((c, v), m) in centred.iter_mut().zip(r).zip(&t.mean) {
            *c = v - m;
        }
        for i in 0..d {
            out.push(dot(&t.projection[i * d..(i + 1) * d], &centred));
        }
    }
    let mut m = FeatureMatrix::new(q.n(), d, out)?;
    if let Some(l) = q.labels() {
        m = m.with_labels(l.to_vec())?;
    }
    Ok(m)
}

/// How a checkpoint's typical normal score is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizerKind {
    /// Mean kNN distance of a held-out slice of the training set against the
    /// rest. Scores are kNN distances.
    KnnDistance,
    /// Mean compactness loss `|psi_t(x) - c|^2` on the training set. Scores are
    /// per-sample compactness losses.
    TrainLoss,
}

pub const NORMALIZER_VAL_FRACTION: f64 = 0.1;
pub const DEFAULT_K: usize = 2;

/// Mean kNN distance of the validation slice against the gallery slice, under
/// the checkpoint's features. Stored into the checkpoint on success; a zero
/// result marks the checkpoint as collapsed.
pub fn checkpoint_normalizer(
    ckpt: &mut Checkpoint,
    train: &FeatureMatrix,
    val_fraction: f64,
    k: usize,
    seed: u64,
) -> Result<f64> {
    ckpt.normalizer = None;
    let feats = ckpt.params.forward(train)?;
    let split = split_indices(feats.n(), val_fraction, seed)?;
    let gallery = Gallery::new(feats.select(&split.gallery_indices)?);
    let val = feats.select(&split.validation_indices)?;
    let scores = knn_score(&gallery, &val, k)?;
    let s = scores.iter().sum::<f64>() / scores.len() as f64;
    store_normalizer(ckpt, s)
}

/// Mean training compactness under the checkpoint, stored into it.
pub fn checkpoint_loss_normalizer(ckpt: &mut Checkpoint, train: &FeatureMatrix, c: &CenterVector) -> Result<f64> {
    ckpt.normalizer = None;
    let losses = compactness_per_sample(&ckpt.params, train, c)?;
    let s = losses.iter().sum::<f64>() / losses.len() as f64;
    store_normalizer(ckpt, s)
}

fn store_normalizer(ckpt: &mut Checkpoint, s: f64) -> Result<f64> {
    if s > 0.0 && s.is_finite() {
        ckpt.normalizer = Some(s);
        Ok(s)
    } else {
        Err(Error::DegenerateNormalizer(format!(
            "checkpoint at minibatch {} has normalizer {s}",
            ckpt.minibatch_index
        )))
    }
}

/// Settings for sample-wise early stopping.
#[derive(Debug, Clone, PartialEq)]
pub struct SesConfig {
    pub kind: NormalizerKind,
    pub k: usize,
    pub val_fraction: f64,
    pub seed: u64,
    /// Required for [`NormalizerKind::TrainLoss`].
    pub center: Option<CenterVector>,
}

impl Default for SesConfig {
    fn default() -> Self {
        Self {
            kind: NormalizerKind::KnnDistance,
            k: DEFAULT_K,
            val_fraction: NORMALIZER_VAL_FRACTION,
            seed: 0,
            center: None,
        }
    }
}

fn require_center(cfg: &SesConfig) -> Result<&CenterVector> {
    cfg.center
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("the training-loss normalizer needs the center vector".into()))
}

/// Computes the normalizer of every checkpoint in the bank. Collapsed
/// checkpoints are left without one. Returns the number of usable checkpoints.
pub fn fill_normalizers(bank: &mut CheckpointBank, train: &FeatureMatrix, cfg: &SesConfig) -> Result<usize> {
    let mut usable = 0;
    for ckpt in bank.checkpoints_mut() {
        let r = match cfg.kind {
            NormalizerKind::KnnDistance => checkpoint_normalizer(ckpt, train, cfg.val_fraction, cfg.k, cfg.seed),
            NormalizerKind::TrainLoss => checkpoint_loss_normalizer(ckpt, train, require_center(cfg)?),
        };
        match r {
            Ok(_) => usable += 1,
            Err(Error::DegenerateNormalizer(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(usable)
}

/// Normalized per-query scores `f_t(x) / s_t` for one checkpoint.
pub fn normalized_checkpoint_scores(
    ckpt: &Checkpoint,
    g_train: &FeatureMatrix,
    q: &FeatureMatrix,
    cfg: &SesConfig,
) -> Result<Option<Vec<f64>>> {
    let Some(s) = ckpt.normalizer.filter(|s| *s > 0.0 && s.is_finite()) else {
        return Ok(None);
    };
    let raw = match cfg.kind {
        NormalizerKind::KnnDistance => {
            let gallery = Gallery::new(ckpt.params.forward(g_train)?);
            knn_score(&gallery, &ckpt.params.forward(q)?, cfg.k)?
        }
        NormalizerKind::TrainLoss => compactness_per_sample(&ckpt.params, q, require_center(cfg)?)?,
    };
    Ok(Some(raw.into_iter().map(|f| f / s).collect()))
}

/// Sample-wise early stopping: each query's score is the largest normalized
/// score over the usable checkpoints of the bank. Normalizers must already be
/// stored in the checkpoints (see [`fill_normalizers`]).
pub fn ses_score_with(
    bank: &CheckpointBank,
    g_train: &FeatureMatrix,
    q: &FeatureMatrix,
    cfg: &SesConfig,
) -> Result<Vec<f64>> {
    let mut best: Option<Vec<f64>> = None;
    for ckpt in bank.checkpoints() {
        let Some(scores) = normalized_checkpoint_scores(ckpt, g_train, q, cfg)? else {
            continue;
        };
        best = Some(match best {
            None => scores,
            Some(mut b) => {
                for (a, s) in b.iter_mut().zip(scores) {
                    if s > *a {
                        *a = s;
                    }
                }
                b
            }
        });
    }
    best.ok_or_else(|| Error::InvalidArgument("no checkpoint in the bank has a usable normalizer".into()))
}

/// [`ses_score_with`] for kNN scores with `k` neighbours.
pub fn ses_score(bank: &CheckpointBank, g_train: &FeatureMatrix, q: &FeatureMatrix, k: usize) -> Result<Vec<f64>> {
    ses_score_with(
        bank,
        g_train,
        q,
        &SesConfig {
            k,
            ..SesConfig::default()
        },
    )
}
