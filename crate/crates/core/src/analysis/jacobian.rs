//! Decoder sensitivity fields, kernel smoothing and latent traversals.

use ndarray::{s, Array2, ArrayView1, ArrayView2};

use super::toroidal_distance_sq;
use crate::lattice::wrap_unit;
use crate::net::Network;
use crate::par;
use crate::{Error, Result};

pub const DEFAULT_FD_STEP: f64 = 1e-4;
pub const DEFAULT_SMOOTHING: f64 = 0.02;

/// Rows of latents evaluated per decoder call.
const FD_CHUNK: usize = 512;

/// A map from latent rows to data-space mean rows.
pub trait LatentMap: Sync {
    fn latent_dim(&self) -> usize;
    fn decode_mean(&self, z: ArrayView2<f64>) -> Result<Array2<f64>>;
}

impl LatentMap for Network {
    fn latent_dim(&self) -> usize {
        self.spec().latent_dim
    }

    fn decode_mean(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        Network::decode_mean(self, z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacobianField {
    pub points: Array2<f64>,
    /// Frobenius norm of the decoder Jacobian at each point.
    pub norms: Vec<f64>,
    /// Smoothed norms and the bandwidth used.
    pub smoothed: Option<(Vec<f64>, f64)>,
}

impl JacobianField {
    pub fn smooth(mut self, bandwidth: f64) -> Result<Self> {
        let s = smooth_field(self.points.view(), &self.norms, bandwidth)?;
        self.smoothed = Some((s, bandwidth));
        Ok(self)
    }
}

/// Frobenius norm of `d mean / d z` by central differences with step `step`.
pub fn jacobian_frobenius<M: LatentMap + ?Sized>(
    map: &M,
    points: ArrayView2<f64>,
    step: f64,
) -> Result<JacobianField> {
    if !(step > 0.0 && step <= 0.01) {
        return Err(Error::invalid("finite-difference step must lie in (0, 0.01]"));
    }
    let d = map.latent_dim();
    if points.ncols() != d {
        return Err(Error::DimensionMismatch {
            context: "jacobian point dimension",
            expected: d,
            got: points.ncols(),
        });
    }
    let n = points.nrows();
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(FD_CHUNK)
        .map(|s| (s, (s + FD_CHUNK).min(n)))
        .collect();
    let parts = par::map_range(chunks.len(), |c| -> Result<Vec<f64>> {
        let (start, end) = chunks[c];
        let len = end - start;
        let base = points.slice(s![start..end, ..]);
        // Rows ordered (coordinate, sign, point).
        let mut probe = Array2::zeros((2 * d * len, d));
        for k in 0..d {
            for (sgn_idx, sgn) in [1.0, -1.0].into_iter().enumerate() {
                let offset = (2 * k + sgn_idx) * len;
                let mut block = probe.slice_mut(s![offset..offset + len, ..]);
                block.assign(&base);
                block.column_mut(k).mapv_inplace(|v| v + sgn * step);
            }
        }
        let out = map.decode_mean(probe.view())?;
        let mut norms = vec![0.0; len];
        for k in 0..d {
            let plus = (2 * k) * len;
            let minus = (2 * k + 1) * len;
            for (i, norm) in norms.iter_mut().enumerate() {
                *norm += out
                    .row(plus + i)
                    .iter()
                    .zip(out.row(minus + i))
                    .map(|(a, b)| ((a - b) / (2.0 * step)).powi(2))
                    .sum::<f64>();
            }
        }
        Ok(norms.into_iter().map(f64::sqrt).collect())
    });
    let mut norms = Vec::with_capacity(n);
    for p in parts {
        norms.extend(p?);
    }
    Ok(JacobianField {
        points: points.to_owned(),
        norms,
        smoothed: None,
    })
}

/// Gaussian-kernel average `exp(-d^2 / (2 bw^2))` over all points, normalized per output.
pub fn smooth_field(points: ArrayView2<f64>, values: &[f64], bandwidth: f64) -> Result<Vec<f64>> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::invalid("smoothing bandwidth must be positive"));
    }
    if values.len() != points.nrows() {
        return Err(Error::DimensionMismatch {
            context: "smoothing values",
            expected: points.nrows(),
            got: values.len(),
        });
    }
    let scale = 1.0 / (2.0 * bandwidth * bandwidth);
    Ok(par::map_range(points.nrows(), |i| {
        let pi = points.row(i);
        let (mut num, mut den) = (0.0, 0.0);
        for (pj, &v) in points.rows().into_iter().zip(values) {
            let w = (-toroidal_distance_sq(pi, pj) * scale).exp();
            num += w * v;
            den += w;
        }
        num / den
    }))
}

/// Decodes `start + (t / n) * direction (mod 1)` for `t = 0..n`.
pub fn traversal<M: LatentMap + ?Sized>(
    map: &M,
    start: ArrayView1<f64>,
    direction: ArrayView1<f64>,
    n_steps: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let d = map.latent_dim();
    if start.len() != d || direction.len() != d {
        return Err(Error::DimensionMismatch {
            context: "traversal vector",
            expected: d,
            got: if start.len() != d { start.len() } else { direction.len() },
        });
    }
    if n_steps == 0 {
        return Err(Error::invalid("traversal needs at least one step"));
    }
    if direction.iter().all(|&v| v == 0.0) {
        return Err(Error::invalid("traversal direction must be nonzero"));
    }
    let z = Array2::from_shape_fn((n_steps, d), |(t, k)| {
        wrap_unit(start[k] + t as f64 / n_steps as f64 * direction[k])
    });
    let frames = map.decode_mean(z.view())?;
    Ok((z, frames))
}
