//! Likelihood heads.
//!
//! Bernoulli heads work on logits. Clamping probabilities to
//! `[1e-7, 1 - 1e-7]` is the same as clamping logits to `+-ln((1 - 1e-7) / 1e-7)`,
//! and in that form `x ln p + (1 - x) ln(1 - p) = x l - softplus(l)`.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::par;
use crate::{Error, Result};

pub const BERNOULLI_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutputHead {
    /// Pixel-wise Bernoulli likelihood over pre-sigmoid logits.
    Bernoulli,
    /// Isotropic Gaussian likelihood with fixed variance around the output.
    Gaussian { variance: f64 },
    /// No likelihood; raw outputs (encoders, regression tests).
    Linear,
}

fn logit_bound() -> f64 {
    ((1.0 - BERNOULLI_CLAMP) / BERNOULLI_CLAMP).ln()
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl OutputHead {
    pub fn name(&self) -> &'static str {
        match self {
            OutputHead::Bernoulli => "bernoulli",
            OutputHead::Gaussian { .. } => "gaussian",
            OutputHead::Linear => "linear",
        }
    }

    /// Maps raw outputs to data-space means.
    pub fn mean(&self, raw: Array2<f64>) -> Array2<f64> {
        match self {
            OutputHead::Bernoulli => raw.mapv(sigmoid),
            _ => raw,
        }
    }

    fn require_likelihood(&self) -> Result<()> {
        if matches!(self, OutputHead::Linear) {
            return Err(Error::invalid("linear head has no likelihood"));
        }
        Ok(())
    }

    /// `ll[i, j] = log p(x_i | decoded_j)` for a point set shared by the whole batch.
    pub fn log_likelihood_matrix(
        &self,
        decoded: ArrayView2<f64>,
        x: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        self.require_likelihood()?;
        check_width(decoded.ncols(), x.ncols())?;
        let (b, m) = (x.nrows(), decoded.nrows());
        let mut out = Array2::zeros((b, m));
        match *self {
            OutputHead::Bernoulli => {
                let bound = logit_bound();
                let clamped = decoded.mapv(|l| l.clamp(-bound, bound));
                let sp: Vec<f64> = clamped
                    .rows()
                    .into_iter()
                    .map(|r| r.iter().map(|&l| softplus(l)).sum())
                    .collect();
                let rows = par::map_range(b, |i| {
                    let mut row = clamped.dot(&x.row(i));
                    row.iter_mut().zip(&sp).for_each(|(v, s)| *v -= s);
                    row
                });
                for (i, r) in rows.into_iter().enumerate() {
                    out.row_mut(i).assign(&r);
                }
            }
            OutputHead::Gaussian { variance } => {
                let c = gaussian_constant(variance, x.ncols());
                let rows = par::map_range(b, |i| {
                    let xi = x.row(i);
                    decoded
                        .rows()
                        .into_iter()
                        .map(|mu| c - sq_dist(xi, mu) / (2.0 * variance))
                        .collect::<Vec<f64>>()
                });
                for (i, r) in rows.into_iter().enumerate() {
                    out.row_mut(i).assign(&ArrayView1::from(&r));
                }
            }
            OutputHead::Linear => unreachable!(),
        }
        Ok(out)
    }

    /// `g[j, :] = sum_i coeff[i, j] * d ll[i, j] / d decoded[j, :]`.
    pub fn decoded_gradient(
        &self,
        decoded: ArrayView2<f64>,
        x: ArrayView2<f64>,
        coeff: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        self.require_likelihood()?;
        check_width(decoded.ncols(), x.ncols())?;
        let weighted_x = coeff.t().dot(&x);
        let col_sums = coeff.sum_axis(Axis(0));
        let mut g = weighted_x;
        match *self {
            OutputHead::Bernoulli => {
                let bound = logit_bound();
                for ((mut gr, lr), s) in g.rows_mut().into_iter().zip(decoded.rows()).zip(&col_sums) {
                    for (gv, &l) in gr.iter_mut().zip(lr) {
                        *gv = if l.abs() < bound { *gv - s * sigmoid(l) } else { 0.0 };
                    }
                }
            }
            OutputHead::Gaussian { variance } => {
                for ((mut gr, mr), s) in g.rows_mut().into_iter().zip(decoded.rows()).zip(&col_sums) {
                    for (gv, &mu) in gr.iter_mut().zip(mr) {
                        *gv = (*gv - s * mu) / variance;
                    }
                }
            }
            OutputHead::Linear => unreachable!(),
        }
        Ok(g)
    }

    /// Per-row likelihoods where decoded row `r` belongs to datum `r / per_datum`.
    pub fn log_likelihood_rows(
        &self,
        decoded: ArrayView2<f64>,
        x: ArrayView2<f64>,
        per_datum: usize,
    ) -> Result<Vec<f64>> {
        self.require_likelihood()?;
        check_width(decoded.ncols(), x.ncols())?;
        check_rows(decoded.nrows(), x.nrows() * per_datum)?;
        Ok(par::map_range(decoded.nrows(), |r| {
            single(self, decoded.row(r), x.row(r / per_datum))
        }))
    }

    /// Per-row gradient `coeff[r] * d ll_r / d decoded[r, :]`.
    pub fn row_gradient(
        &self,
        decoded: ArrayView2<f64>,
        x: ArrayView2<f64>,
        per_datum: usize,
        coeff: &[f64],
    ) -> Result<Array2<f64>> {
        self.require_likelihood()?;
        check_width(decoded.ncols(), x.ncols())?;
        check_rows(decoded.nrows(), x.nrows() * per_datum)?;
        let bound = logit_bound();
        let mut g = Array2::zeros(decoded.raw_dim());
        for (r, mut gr) in g.rows_mut().into_iter().enumerate() {
            let xr = x.row(r / per_datum);
            let c = coeff[r];
            for ((gv, &o), &xv) in gr.iter_mut().zip(decoded.row(r)).zip(xr) {
                *gv = match *self {
                    OutputHead::Bernoulli if o.abs() < bound => c * (xv - sigmoid(o)),
                    OutputHead::Bernoulli => 0.0,
                    OutputHead::Gaussian { variance } => c * (xv - o) / variance,
                    OutputHead::Linear => unreachable!(),
                };
            }
        }
        Ok(g)
    }
}

fn check_width(decoded: usize, data: usize) -> Result<()> {
    if decoded != data {
        return Err(Error::DimensionMismatch {
            context: "likelihood data width",
            expected: decoded,
            got: data,
        });
    }
    Ok(())
}

fn check_rows(decoded: usize, expected: usize) -> Result<()> {
    if decoded != expected {
        return Err(Error::DimensionMismatch {
            context: "decoded rows per datum",
            expected,
            got: decoded,
        });
    }
    Ok(())
}

fn gaussian_constant(variance: f64, dim: usize) -> f64 {
    -0.5 * dim as f64 * (2.0 * PI * variance).ln()
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn single(head: &OutputHead, decoded: ArrayView1<f64>, x: ArrayView1<f64>) -> f64 {
    match *head {
        OutputHead::Bernoulli => {
            let bound = logit_bound();
            decoded
                .iter()
                .zip(x)
                .map(|(&l, &xv)| {
                    let l = l.clamp(-bound, bound);
                    xv * l - softplus(l)
                })
                .sum()
        }
        OutputHead::Gaussian { variance } => {
            gaussian_constant(variance, x.len()) - sq_dist(x, decoded) / (2.0 * variance)
        }
        OutputHead::Linear => f64::NAN,
    }
}

/// `log p(x | decoded)` in nats for a single datum.
pub fn log_likelihood(head: &OutputHead, decoded: ArrayView1<f64>, x: ArrayView1<f64>) -> Result<f64> {
    head.require_likelihood()?;
    check_width(decoded.len(), x.len())?;
    if let OutputHead::Bernoulli = head {
        if x.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("bernoulli targets must lie in [0, 1]"));
        }
    }
    let ll = single(head, decoded, x);
    if !ll.is_finite() {
        return Err(Error::Numerical(format!("non-finite log-likelihood {ll}")));
    }
    Ok(ll)
}
