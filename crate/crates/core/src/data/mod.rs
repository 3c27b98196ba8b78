//! Datasets, splits and persistence.

pub mod checkpoint;
pub mod idx;
mod synth;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, ModelKind, RngState};
pub use idx::{encode_idx_images, encode_idx_labels, load_idx, IdxError};
pub use synth::{synth_mixture, MixtureSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueKind {
    /// Intensities in `[0, 1]`, usable as Bernoulli targets.
    BinaryPixels,
    RealValued,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    values: Array2<f64>,
    kind: ValueKind,
    image_shape: Option<(usize, usize)>,
    labels: Option<Vec<u32>>,
    name: String,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        values: Array2<f64>,
        kind: ValueKind,
        image_shape: Option<(usize, usize)>,
    ) -> Result<Self> {
        if kind == ValueKind::BinaryPixels && values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("pixel values must lie in [0, 1]"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains non-finite values"));
        }
        if let Some((h, w)) = image_shape {
            if h * w != values.ncols() {
                return Err(Error::DimensionMismatch {
                    context: "image shape",
                    expected: values.ncols(),
                    got: h * w,
                });
            }
        }
        Ok(Self {
            values,
            kind,
            image_shape,
            labels: None,
            name: name.into(),
        })
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::DimensionMismatch {
                context: "labels",
                expected: self.len(),
                got: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn kind(&self) -> ValueKind {
        self.kind
    }

    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.image_shape
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Dataset {
        Dataset {
            values: self.values.select(Axis(0), indices),
            kind: self.kind,
            image_shape: self.image_shape,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            name: name.into(),
        }
    }

    /// Rows as little-endian f64 bytes, for hashing and byte comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Deterministic shuffled split into `(train, test)` with `round(n * fraction)` training rows.
pub fn split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("split fraction {fraction} must lie in (0, 1)")));
    }
    let n = dataset.len();
    if n < 2 {
        return Err(Error::invalid("splitting needs at least two samples"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let (tr, te) = order.split_at(n_train);
    Ok((
        dataset.subset(tr, format!("{}-train", dataset.name())),
        dataset.subset(te, format!("{}-test", dataset.name())),
    ))
}
