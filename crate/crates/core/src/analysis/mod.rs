//! Post hoc analyses of a trained latent space.
//!
//! Everything here works on the discrete evaluation lattice: posterior
//! tables are averaged into a density field, which then drives mode finding
//! and density-aware shortest paths. All distances are toroidal.

mod geodesic;
mod jacobian;
mod meanshift;

pub use geodesic::{geodesic, knn_graph, GeodesicPath, DEFAULT_DENSITY_FLOOR, GEODESIC_NEIGHBORS};
pub use jacobian::{
    jacobian_frobenius, smooth_field, traversal, JacobianField, LatentMap, DEFAULT_FD_STEP,
    DEFAULT_SMOOTHING,
};
pub use meanshift::{mean_shift, shift_step, ClusterResult, MAX_ITERS, STEP_TOLERANCE};

use ndarray::{ArrayView1, Axis};

use crate::lattice::{wrapped_delta, PointSet};
use crate::qlvm::PosteriorTable;
use crate::{Error, Result};

/// Normalized nonnegative weights over an evaluation point set.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    points: PointSet,
    weights: Vec<f64>,
}

impl DensityField {
    /// Normalizes `weights` to sum to one.
    pub fn new(points: PointSet, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != points.len() {
            return Err(Error::DimensionMismatch {
                context: "density weights",
                expected: points.len(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("density weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("density field has no mass"));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { points, weights })
    }

    pub fn uniform(points: PointSet) -> Self {
        let m = points.len();
        Self {
            points,
            weights: vec![1.0 / m as f64; m],
        }
    }

    pub fn points(&self) -> &PointSet {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Index of the point nearest to `z` (lowest index on ties).
    pub fn nearest(&self, z: ArrayView1<f64>) -> usize {
        nearest_point(&self.points, z)
    }
}

pub(crate) fn nearest_point(points: &PointSet, z: ArrayView1<f64>) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (j, p) in points.points().rows().into_iter().enumerate() {
        let d = toroidal_distance_sq(p, z);
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}

/// Mean posterior weight per point over every datum in `tables`.
pub fn aggregate_posterior(tables: &[PosteriorTable]) -> Result<DensityField> {
    let first = tables
        .first()
        .ok_or_else(|| Error::invalid("aggregate posterior needs at least one table"))?;
    let points = first.points();
    let mut sum = vec![0.0; points.len()];
    let mut rows = 0;
    for t in tables {
        if t.points().points() != points.points() {
            return Err(Error::invalid("posterior tables use different evaluation point sets"));
        }
        for (s, v) in sum.iter_mut().zip(t.weights().sum_axis(Axis(0))) {
            *s += v;
        }
        rows += t.len();
    }
    if rows == 0 {
        return Err(Error::invalid("aggregate posterior needs at least one datum"));
    }
    let weights = sum.into_iter().map(|s| s / rows as f64).collect();
    DensityField::new(points.clone(), weights)
}

pub(crate) fn toroidal_distance_sq(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y).abs().rem_euclid(1.0);
            let d = d.min(1.0 - d);
            d * d
        })
        .sum()
}

/// Euclidean norm of the per-coordinate wrapped differences.
pub fn toroidal_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    toroidal_distance_sq(a, b).sqrt()
}

/// `b` expressed in coordinates unwrapped around `a` (each component within 0.5 of `a`).
pub(crate) fn unwrap_around(a: ArrayView1<f64>, b: ArrayView1<f64>, out: &mut [f64]) {
    for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
        *o = x + wrapped_delta(x, y);
    }
}

#[cfg(test)]
mod tests;
