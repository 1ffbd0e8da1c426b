//! Feature matrices, the currency passed between every stage of the pipeline.

use alloc::format;
use alloc::vec::Vec;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

/// An `n x d` row-major matrix of feature vectors with optional class labels.
///
/// Values are held in 64-bit; the on-disk format stores them as 32-bit. All
/// entries are finite and the matrix is never empty.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n: usize,
    d: usize,
    data: Vec<f64>,
    labels: Option<Vec<u32>>,
}

impl FeatureMatrix {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::Validation(format!(
                "feature matrix must be non-empty, got {n}x{d}"
            )));
        }
        if data.len() != n * d {
            return Err(Error::Validation(format!(
                "payload has {} values, header declares {n}x{d}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite entry at row {}, column {}",
                i / d,
                i % d
            )));
        }
        Ok(Self {
            n,
            d,
            data,
            labels: None,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * d);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != d {
                return Err(Error::Validation(format!(
                    "row {i} has {} columns, expected {d}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), d, data)
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != self.n {
            return Err(Error::Validation(format!(
                "{} labels for {} rows",
                labels.len(),
                self.n
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Builds a matrix from trusted, already-validated parts.
    pub(crate) fn from_parts_unchecked(n: usize, d: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), n * d);
        Self {
            n,
            d,
            data,
            labels: None,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.d)
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn require_labels(&self) -> Result<&[u32]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("labeled feature matrix required".into()))
    }

    /// Copies the given rows (and their labels) into a new matrix.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty row selection".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            if i >= self.n {
                return Err(Error::InvalidArgument(format!(
                    "row index {i} out of range for {} rows",
                    self.n
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        Ok(Self {
            n: indices.len(),
            d: self.d,
            data,
            labels,
        })
    }

    /// Returns a copy with every entry multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let data = self.data.iter().map(|v| v * factor).collect();
        let mut m = Self::new(self.n, self.d, data)?;
        m.labels = self.labels.clone();
        Ok(m)
    }

    /// Column means, accumulated row by row.
    pub fn column_mean(&self) -> Vec<f64> {
        let mut mean = alloc::vec![0.0; self.d];
        for r in self.rows() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        let inv = 1.0 / self.n as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        mean
    }
}

/// Partition of row indices into a scoring gallery and a held-out validation set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub gallery_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
}

/// Seeded random split; both index lists come back sorted.
pub fn split_train_val(m: &FeatureMatrix, val_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    split_indices(m.n(), val_fraction, seed)
}

pub(crate) fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    if (n as f64) * val_fraction < 1.0 || n < 2 {
        return Err(Error::InvalidArgument(format!(
            "{n} rows are too few for a validation fraction of {val_fraction}"
        )));
    }
    let n_val = libm::round(n as f64 * val_fraction).clamp(1.0, (n - 1) as f64) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(seed));
    let mut validation_indices = order[..n_val].to_vec();
    let mut gallery_indices = order[n_val..].to_vec();
    validation_indices.sort_unstable();
    gallery_indices.sort_unstable();
    Ok(DatasetSplit {
        gallery_indices,
        validation_indices,
    })
}

/// The output of [`one_class_split`].
#[derive(Debug, Clone, PartialEq)]
pub struct OneClassSplit {
    /// Training rows of the normal class only.
    pub train: FeatureMatrix,
    /// The full test set, labels retained.
    pub test: FeatureMatrix,
    /// `true` where the test row is anomalous (label differs from the normal class).
    pub anomalous: Vec<bool>,
}

pub fn one_class_split(train: &FeatureMatrix, test: &FeatureMatrix, normal_class: u32) -> Result<OneClassSplit> {
    let train_labels = train.require_labels()?;
    let test_labels = test.require_labels()?;
    let normal: Vec<usize> = train_labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == normal_class)
        .map(|(i, _)| i)
        .collect();
    if normal.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "normal class {normal_class} does not occur in the training labels"
        )));
    }
    Ok(OneClassSplit {
        train: train.select(&normal)?,
        test: test.clone(),
        anomalous: test_labels.iter().map(|&l| l != normal_class).collect(),
    })
}
