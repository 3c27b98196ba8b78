//! The lattice evidence objective, training, and posterior inference.
//!
//! For a datum `x` and latent samples `z_1..z_m` with uniform marginals, the
//! estimate `log (1/m) sum_j p(x | z_j)` lower-bounds `log p(x)` in
//! expectation. Training maximizes its batch mean with a freshly shifted
//! lattice per minibatch; the same per-point log-likelihoods, normalized,
//! form a discrete posterior over the lattice.

pub(crate) mod trainer;

pub use trainer::{train, EpochRecord, LatticeSpec, QlvmTrainer, TrainConfig};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::lattice::{wrap_unit, LatticeRule, PointSet, SamplingMode};
use crate::net::Network;
use crate::{Error, Result};

/// Data rows evaluated per chunk during inference, bounding memory at large `m`.
const EVAL_CHUNK: usize = 256;

/// Numerically stable `ln sum_j exp(v_j)`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QmcEvidence {
    pub per_datum: Vec<f64>,
    pub mean: f64,
}

impl QmcEvidence {
    fn from_values(per_datum: Vec<f64>) -> Self {
        let mean = per_datum.iter().sum::<f64>() / per_datum.len().max(1) as f64;
        Self { per_datum, mean }
    }
}

fn check_points(net: &Network, points: &PointSet) -> Result<()> {
    if points.is_empty() {
        return Err(Error::invalid("evidence needs a non-empty point set"));
    }
    if points.dim() != net.spec().latent_dim {
        return Err(Error::DimensionMismatch {
            context: "point set dimension",
            expected: net.spec().latent_dim,
            got: points.dim(),
        });
    }
    Ok(())
}

/// `ll[i, j] = log p(x_i | z_j)` for every datum and point.
pub fn conditional_log_likelihoods(
    net: &Network,
    x: ArrayView2<f64>,
    points: &PointSet,
) -> Result<Array2<f64>> {
    check_points(net, points)?;
    let decoded = net.forward(points.points().view())?;
    net.spec().head.log_likelihood_matrix(decoded.view(), x)
}

fn evidence_rows(ll: &Array2<f64>) -> Vec<f64> {
    let log_m = (ll.ncols() as f64).ln();
    ll.rows()
        .into_iter()
        .map(|r| log_sum_exp(r.as_slice().expect("standard layout")) - log_m)
        .collect()
}

/// Per-datum lattice evidence `LSE_j ll[i, j] - ln m`, sharing one point set across the batch.
pub fn qmc_log_evidence(net: &Network, x: ArrayView2<f64>, points: &PointSet) -> Result<QmcEvidence> {
    check_points(net, points)?;
    let decoded = net.forward(points.points().view())?;
    let head = net.spec().head;
    let mut per_datum = Vec::with_capacity(x.nrows());
    for start in (0..x.nrows()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(x.nrows());
        let ll = head.log_likelihood_matrix(decoded.view(), x.slice(s![start..end, ..]))?;
        per_datum.extend(evidence_rows(&ll));
    }
    Ok(QmcEvidence::from_values(per_datum))
}

/// Negative mean lattice evidence over the batch; accumulates its gradient into `net`.
pub fn qmc_objective_backward(
    net: &mut Network,
    x: ArrayView2<f64>,
    points: &PointSet,
) -> Result<f64> {
    check_points(net, points)?;
    let decoded = net.forward_recorded(points.points().view())?;
    let head = net.spec().head;
    let ll = head.log_likelihood_matrix(decoded.view(), x)?;
    let b = x.nrows() as f64;
    let log_m = (points.len() as f64).ln();
    let mut coeff = Array2::zeros(ll.raw_dim());
    let mut total = 0.0;
    for (row, mut c) in ll.rows().into_iter().zip(coeff.rows_mut()) {
        let lse = log_sum_exp(row.as_slice().expect("standard layout"));
        total += lse - log_m;
        for (cv, &v) in c.iter_mut().zip(row) {
            *cv = -(v - lse).exp() / b;
        }
    }
    let loss = -total / b;
    let g = head.decoded_gradient(decoded.view(), x, coeff.view())?;
    net.backward(g.view())?;
    Ok(loss)
}

/// Discrete posterior over an evaluation point set, one row per datum.
#[derive(Debug, Clone)]
pub struct PosteriorTable {
    points: PointSet,
    weights: Array2<f64>,
}

impl PosteriorTable {
    /// Normalizes each row of `ll` in log space.
    pub fn from_log_likelihoods(points: PointSet, mut ll: Array2<f64>) -> Result<Self> {
        if ll.ncols() != points.len() {
            return Err(Error::DimensionMismatch {
                context: "posterior columns",
                expected: points.len(),
                got: ll.ncols(),
            });
        }
        for mut row in ll.rows_mut() {
            let lse = log_sum_exp(row.as_slice().expect("standard layout"));
            if !lse.is_finite() {
                return Err(Error::Numerical("posterior row has no finite mass".into()));
            }
            row.mapv_inplace(|v| (v - lse).exp());
        }
        Ok(Self { points, weights: ll })
    }

    pub fn points(&self) -> &PointSet {
        &self.points
    }

    /// `weights[[i, j]]` is the posterior mass of datum `i` at point `j`.
    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.nrows() == 0
    }

    pub fn row_sums(&self) -> Array1<f64> {
        self.weights.sum_axis(Axis(1))
    }
}

pub fn posterior_table(net: &Network, x: ArrayView2<f64>, eval_points: &PointSet) -> Result<PosteriorTable> {
    check_points(net, eval_points)?;
    let decoded = net.forward(eval_points.points().view())?;
    let head = net.spec().head;
    let mut ll = Array2::zeros((x.nrows(), eval_points.len()));
    for start in (0..x.nrows()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(x.nrows());
        let chunk = head.log_likelihood_matrix(decoded.view(), x.slice(s![start..end, ..]))?;
        ll.slice_mut(s![start..end, ..]).assign(&chunk);
    }
    PosteriorTable::from_log_likelihoods(eval_points.clone(), ll)
}

/// Low-dimensional summary of each posterior row.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentEmbedding {
    /// Circular mean per coordinate, in `[0, 1)`.
    pub means: Array2<f64>,
    /// Index of the max-weight lattice point (lowest index on ties).
    pub mode_indices: Vec<usize>,
    pub modes: Array2<f64>,
    /// Minimum over coordinates of the weighted resultant length.
    pub resultant: Vec<f64>,
}

pub fn embed(table: &PosteriorTable) -> LatentEmbedding {
    let pts = table.points().points();
    let (n, d) = (table.len(), pts.ncols());
    let tau = 2.0 * std::f64::consts::PI;
    let mut means = Array2::zeros((n, d));
    let mut modes = Array2::zeros((n, d));
    let mut mode_indices = Vec::with_capacity(n);
    let mut resultant = Vec::with_capacity(n);
    for (i, w) in table.weights().rows().into_iter().enumerate() {
        let mut best = 0;
        for (j, &v) in w.iter().enumerate() {
            if v > w[best] {
                best = j;
            }
        }
        mode_indices.push(best);
        modes.row_mut(i).assign(&pts.row(best));
        let total: f64 = w.sum();
        let mut min_r = f64::INFINITY;
        for k in 0..d {
            let (mut sn, mut cs) = (0.0, 0.0);
            for (j, &v) in w.iter().enumerate() {
                let (a, b) = (tau * pts[[j, k]]).sin_cos();
                sn += v * a;
                cs += v * b;
            }
            means[[i, k]] = wrap_unit(sn.atan2(cs) / tau);
            min_r = min_r.min((sn.hypot(cs) / total).min(1.0));
        }
        resultant.push(min_r);
    }
    LatentEmbedding {
        means,
        mode_indices,
        modes,
        resultant,
    }
}

/// Decodes `n` uniform latents; returns `(latents, decoded means)`.
pub fn sample_prior(net: &Network, n: usize, seed: u64) -> Result<(Array2<f64>, Array2<f64>)> {
    let d = net.spec().latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Array2::from_shape_simple_fn((n, d), || rng.random::<f64>());
    if n == 0 {
        return Ok((z, Array2::zeros((0, net.spec().output_width()))));
    }
    let out = net.decode_mean(z.view())?;
    Ok((z, out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub mean: f64,
    pub std: f64,
    pub per_shift: Vec<f64>,
}

impl BoundReport {
    fn from_values(per_shift: Vec<f64>) -> Self {
        let n = per_shift.len() as f64;
        let mean = per_shift.iter().sum::<f64>() / n;
        let std = if per_shift.len() > 1 {
            (per_shift.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            std,
            per_shift,
        }
    }
}

/// Held-out lattice bound averaged over `n_shifts` random shifts of `rule`.
pub fn evaluate_bound(
    net: &Network,
    x: ArrayView2<f64>,
    rule: &LatticeRule,
    n_shifts: usize,
    seed: u64,
) -> Result<BoundReport> {
    if n_shifts == 0 {
        return Err(Error::invalid("evaluation needs at least one shift"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..n_shifts)
        .map(|_| {
            let pts = crate::lattice::generate_points_with(rule, SamplingMode::ShiftedRqmc, &mut rng);
            qmc_log_evidence(net, x, &pts).map(|e| e.mean)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BoundReport::from_values(values))
}

/// Held-out lattice bound on the unshifted rule.
pub fn evaluate_fixed(net: &Network, x: ArrayView2<f64>, rule: &LatticeRule) -> Result<BoundReport> {
    let e = qmc_log_evidence(net, x, &PointSet::fixed(rule))?;
    Ok(BoundReport::from_values(vec![e.mean]))
}
