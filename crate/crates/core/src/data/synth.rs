use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, ValueKind};
use crate::{Error, Result};

/// Images of one Gaussian blob each, centred near one of `clusters` fixed centres.
///
/// Centres sit on a circle of radius `side / 4` around the image centre (a
/// single cluster sits at the centre). Each sample picks a cluster uniformly,
/// offsets its centre by uniform jitter in `[-jitter, jitter]` per axis, and
/// renders `exp(-r^2 / (2 sigma^2))` at pixel centres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureSpec {
    pub clusters: usize,
    pub samples: usize,
    pub side: usize,
    pub sigma: f64,
    pub jitter: f64,
}

impl MixtureSpec {
    pub fn centers(&self) -> Vec<(f64, f64)> {
        let c = self.side as f64 / 2.0;
        if self.clusters == 1 {
            return vec![(c, c)];
        }
        let r = self.side as f64 / 4.0;
        (0..self.clusters)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / self.clusters as f64;
                (c + r * a.cos(), c + r * a.sin())
            })
            .collect()
    }
}

pub fn synth_mixture(spec: &MixtureSpec, seed: u64) -> Result<Dataset> {
    if spec.clusters == 0 {
        return Err(Error::invalid("mixture needs at least one cluster"));
    }
    if spec.side < 8 {
        return Err(Error::invalid("image side must be at least 8"));
    }
    if !(spec.sigma > 0.0) || !(spec.jitter >= 0.0) {
        return Err(Error::invalid("blob sigma must be positive and jitter non-negative"));
    }
    let centers = spec.centers();
    let s = spec.side;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Array2::zeros((spec.samples, s * s));
    let mut labels = Vec::with_capacity(spec.samples);
    let two_var = 2.0 * spec.sigma * spec.sigma;
    for mut row in values.rows_mut() {
        let label = rng.random_range(0..spec.clusters);
        let (mut cx, mut cy) = centers[label];
        if spec.jitter > 0.0 {
            cx += rng.random_range(-spec.jitter..=spec.jitter);
            cy += rng.random_range(-spec.jitter..=spec.jitter);
        }
        for r in 0..s {
            for c in 0..s {
                let dx = c as f64 + 0.5 - cx;
                let dy = r as f64 + 0.5 - cy;
                row[r * s + c] = (-(dx * dx + dy * dy) / two_var).exp();
            }
        }
        labels.push(label as u32);
    }
    Dataset::new(
        format!("mixture-k{}-s{}", spec.clusters, s),
        values,
        ValueKind::BinaryPixels,
        Some((s, s)),
    )?
    .with_labels(labels)
}
