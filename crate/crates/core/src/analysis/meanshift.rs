//! Density-weighted mean shift on the torus.
//!
//! Each point `z~` near the iterate gets weight `rho(z~) * exp(-(|z~ - z| / h)^2)`,
//! with neighbors beyond `3h` dropped. Neighbors are unwrapped around the
//! iterate before averaging so modes near the seam are found correctly.

use ndarray::{Array2, ArrayView1, ArrayView2};

use super::{toroidal_distance, toroidal_distance_sq, unwrap_around, DensityField};
use crate::lattice::wrap_unit;
use crate::par;
use crate::{Error, Result};

pub const STEP_TOLERANCE: f64 = 1e-6;
pub const MAX_ITERS: usize = 500;
const TRUNCATION: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    /// Merged modes, highest density first.
    pub centroids: Array2<f64>,
    /// Kernel density at each centroid.
    pub centroid_density: Vec<f64>,
    /// Converged mode per seed; `None` when the seed never settled.
    pub converged: Vec<Option<Vec<f64>>>,
    /// Centroid index per seed.
    pub assignments: Vec<Option<usize>>,
    pub bandwidth: f64,
}

/// One update from `z`; returns the new iterate and the kernel density at `z`,
/// or `None` when no point carries weight within `3h`.
pub fn shift_step(field: &DensityField, z: ArrayView1<f64>, h: f64) -> Option<(Vec<f64>, f64)> {
    let d = z.len();
    let cutoff_sq = (TRUNCATION * h).powi(2);
    let mut num = vec![0.0; d];
    let mut den = 0.0;
    let mut local = vec![0.0; d];
    for (p, &rho) in field.points().points().rows().into_iter().zip(field.weights()) {
        if rho == 0.0 {
            continue;
        }
        let dist_sq = toroidal_distance_sq(p, z);
        if dist_sq > cutoff_sq {
            continue;
        }
        let w = rho * (-dist_sq / (h * h)).exp();
        unwrap_around(z, p, &mut local);
        for (n, l) in num.iter_mut().zip(&local) {
            *n += w * l;
        }
        den += w;
    }
    if den <= 0.0 {
        return None;
    }
    Some((num.into_iter().map(|n| wrap_unit(n / den)).collect(), den))
}

fn climb(field: &DensityField, seed: ArrayView1<f64>, h: f64) -> Option<(Vec<f64>, f64)> {
    let mut z: Vec<f64> = seed.iter().map(|&v| wrap_unit(v)).collect();
    for _ in 0..MAX_ITERS {
        let (next, _) = shift_step(field, ArrayView1::from(&z), h)?;
        let step = toroidal_distance(ArrayView1::from(&z), ArrayView1::from(&next));
        z = next;
        if step < STEP_TOLERANCE {
            let (_, density) = shift_step(field, ArrayView1::from(&z), h)?;
            return Some((z, density));
        }
    }
    None
}

/// Runs mean shift from every seed (the field's own points when `seeds` is
/// `None`) and merges converged modes closer than `h`, keeping the densest.
pub fn mean_shift(field: &DensityField, h: f64, seeds: Option<ArrayView2<f64>>) -> Result<ClusterResult> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid("mean-shift bandwidth must be positive"));
    }
    let seeds = seeds.unwrap_or_else(|| field.points().points().view());
    if seeds.ncols() != field.points().dim() {
        return Err(Error::DimensionMismatch {
            context: "mean-shift seed dimension",
            expected: field.points().dim(),
            got: seeds.ncols(),
        });
    }
    let results = par::map_range(seeds.nrows(), |i| climb(field, seeds.row(i), h));

    let mut order: Vec<usize> = (0..results.len()).filter(|&i| results[i].is_some()).collect();
    let density = |i: usize| results[i].as_ref().map_or(0.0, |r| r.1);
    order.sort_by(|&a, &b| density(b).total_cmp(&density(a)).then(a.cmp(&b)));

    let mut accepted: Vec<usize> = Vec::new();
    let mut assignments = vec![None; results.len()];
    for &i in &order {
        let zi = ArrayView1::from(&results[i].as_ref().expect("converged").0);
        let owner = accepted.iter().position(|&c| {
            toroidal_distance(zi, ArrayView1::from(&results[c].as_ref().expect("converged").0)) < h
        });
        assignments[i] = Some(owner.unwrap_or_else(|| {
            accepted.push(i);
            accepted.len() - 1
        }));
    }

    let d = field.points().dim();
    let mut centroids = Array2::zeros((accepted.len(), d));
    let mut centroid_density = Vec::with_capacity(accepted.len());
    for (c, &i) in accepted.iter().enumerate() {
        let (z, rho) = results[i].as_ref().expect("converged");
        centroids.row_mut(c).assign(&ArrayView1::from(z));
        centroid_density.push(*rho);
    }
    Ok(ClusterResult {
        centroids,
        centroid_density,
        converged: results.into_iter().map(|r| r.map(|(z, _)| z)).collect(),
        assignments,
        bandwidth: h,
    })
}
