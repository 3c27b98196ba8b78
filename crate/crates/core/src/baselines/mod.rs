//! Amortized baselines: a Gaussian encoder with reparameterized sampling,
//! the evidence lower bound and the importance-weighted bound.
//!
//! Baseline decoders take unconstrained latents under a standard normal
//! prior, so they use the identity input embedding. The same decoder with a
//! Gaussian inverse-CDF embedding reads uniform latents, which lets the
//! lattice estimator evaluate a trained baseline decoder.
//!
//! Sampled quantities are laid out with `m` consecutive rows per datum, so
//! row `r` belongs to datum `r / m`.

mod trainer;

pub use trainer::{train_baseline, BaselineConfig, BaselineTrainer};

use std::f64::consts::PI;

use ndarray::{s, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::net::{init_network, Activation, Embedding, Network, NetworkSpec, OutputHead};
use crate::qlvm::log_sum_exp;
use crate::{Error, Result};

pub const LOG_VARIANCE_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundKind {
    Elbo,
    Iwae,
}

impl BoundKind {
    pub fn name(self) -> &'static str {
        match self {
            BoundKind::Elbo => "elbo",
            BoundKind::Iwae => "iwae",
        }
    }
}

/// Tanh MLP from data to `(mean, log-variance)`; outputs `[0, d)` are means,
/// `[d, 2d)` raw log-variances.
#[derive(Debug, Clone)]
pub struct GaussianEncoder {
    net: Network,
}

/// Encoder outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mean: Array2<f64>,
    /// Clamped to `[-10, 10]`.
    pub log_variance: Array2<f64>,
    /// Whether the raw log-variance was inside the clamp (gradient passes).
    pub in_range: Array2<bool>,
}

impl GaussianEncoder {
    /// Hidden widths are listed from the data side.
    pub fn new(data_dim: usize, hidden: &[usize], latent_dim: usize, seed: u64) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::invalid("encoder latent dimension must be at least 1"));
        }
        let mut widths = hidden.to_vec();
        widths.push(2 * latent_dim);
        let spec = NetworkSpec {
            latent_dim: data_dim,
            embedding: Embedding::Identity,
            widths,
            activation: Activation::Tanh,
            head: OutputHead::Linear,
        };
        spec.validate()?;
        Ok(Self {
            net: init_network(spec, seed)?,
        })
    }

    pub fn from_network(net: Network) -> Result<Self> {
        let spec = net.spec();
        if !spec.output_width().is_multiple_of(2) || spec.head != OutputHead::Linear {
            return Err(Error::invalid(
                "encoder network needs a linear head with an even output width",
            ));
        }
        Ok(Self { net })
    }

    pub fn latent_dim(&self) -> usize {
        self.net.spec().output_width() / 2
    }

    pub fn data_dim(&self) -> usize {
        self.net.spec().latent_dim
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    fn split(&self, raw: Array2<f64>) -> Posterior {
        let d = self.latent_dim();
        let mean = raw.slice(s![.., ..d]).to_owned();
        let raw_lv = raw.slice(s![.., d..]);
        Posterior {
            mean,
            log_variance: raw_lv.mapv(|v| v.clamp(-LOG_VARIANCE_CLAMP, LOG_VARIANCE_CLAMP)),
            in_range: raw_lv.mapv(|v| v.abs() <= LOG_VARIANCE_CLAMP),
        }
    }

    pub fn encode(&self, x: ArrayView2<f64>) -> Result<Posterior> {
        Ok(self.split(self.net.forward(x)?))
    }

    pub(crate) fn encode_recorded(&mut self, x: ArrayView2<f64>) -> Result<Posterior> {
        let raw = self.net.forward_recorded(x)?;
        Ok(self.split(raw))
    }
}

/// `z = mean + exp(lv / 2) * noise`, elementwise.
pub fn reparameterize(
    mean: ArrayView2<f64>,
    log_variance: ArrayView2<f64>,
    noise: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    if mean.dim() != log_variance.dim() || mean.dim() != noise.dim() {
        return Err(Error::invalid(format!(
            "reparameterize shapes differ: mean {:?}, log-variance {:?}, noise {:?}",
            mean.dim(),
            log_variance.dim(),
            noise.dim()
        )));
    }
    let mut z = noise.to_owned();
    ndarray::Zip::from(&mut z)
        .and(mean)
        .and(log_variance)
        .for_each(|z, &mu, &lv| *z = mu + (0.5 * lv).exp() * *z);
    Ok(z)
}

/// `KL(N(mean, diag exp(lv)) || N(0, I))` in closed form.
pub fn kl_to_standard_normal(mean: ArrayView1<f64>, log_variance: ArrayView1<f64>) -> f64 {
    0.5 * mean
        .iter()
        .zip(log_variance)
        .map(|(&mu, &lv)| lv.exp() + mu * mu - 1.0 - lv)
        .sum::<f64>()
}

pub fn log_standard_normal(z: ArrayView1<f64>) -> f64 {
    -0.5 * z.iter().map(|v| v * v + (2.0 * PI).ln()).sum::<f64>()
}

/// `log q(z | x)` for `z = mean + sigma * noise`, written in terms of the noise.
pub fn log_posterior_density(log_variance: ArrayView1<f64>, noise: ArrayView1<f64>) -> f64 {
    -0.5 * noise
        .iter()
        .zip(log_variance)
        .map(|(&e, &lv)| e * e + lv + (2.0 * PI).ln())
        .sum::<f64>()
}

/// Per-datum bound values in nats.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundEstimate {
    pub values: Vec<f64>,
    pub kind: BoundKind,
    pub samples: usize,
}

impl BoundEstimate {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }
}

/// Standard normal draws for `rows x d`, filled row-major.
pub fn sample_noise(rows: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_noise(rows, d, &mut rng)
}

pub(crate) fn draw_noise<R: rand::Rng + ?Sized>(rows: usize, d: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, d), || StandardNormal.sample(rng))
}

fn check_models(encoder: &GaussianEncoder, decoder: &Network, x: ArrayView2<f64>, m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::invalid("bounds need at least one sample per datum"));
    }
    if decoder.spec().embedding != Embedding::Identity {
        return Err(Error::invalid(
            "baseline decoders take unconstrained latents (identity embedding)",
        ));
    }
    if decoder.spec().latent_dim != encoder.latent_dim() {
        return Err(Error::DimensionMismatch {
            context: "encoder vs decoder latent dimension",
            expected: decoder.spec().latent_dim,
            got: encoder.latent_dim(),
        });
    }
    if x.ncols() != encoder.data_dim() {
        return Err(Error::DimensionMismatch {
            context: "encoder input width",
            expected: encoder.data_dim(),
            got: x.ncols(),
        });
    }
    Ok(())
}

fn check_noise(noise: &ArrayView2<f64>, rows: usize, d: usize) -> Result<()> {
    if noise.dim() != (rows, d) {
        return Err(Error::DimensionMismatch {
            context: "noise rows",
            expected: rows,
            got: noise.nrows(),
        });
    }
    Ok(())
}

/// Repeats each row of `a` `m` times.
pub(crate) fn repeat_rows(a: &Array2<f64>, m: usize) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows() * m, a.ncols()), |(r, k)| a[[r / m, k]])
}

/// Per-sample pieces of the bounds.
struct Draws {
    post: Posterior,
    z: Array2<f64>,
    ll: Vec<f64>,
}

fn draw(
    encoder: &GaussianEncoder,
    decoder: &Network,
    x: ArrayView2<f64>,
    m: usize,
    noise: ArrayView2<f64>,
) -> Result<Draws> {
    check_models(encoder, decoder, x, m)?;
    let d = encoder.latent_dim();
    check_noise(&noise, x.nrows() * m, d)?;
    let post = encoder.encode(x)?;
    let mu = repeat_rows(&post.mean, m);
    let lv = repeat_rows(&post.log_variance, m);
    let z = reparameterize(mu.view(), lv.view(), noise)?;
    let decoded = decoder.forward(z.view())?;
    let ll = decoder.spec().head.log_likelihood_rows(decoded.view(), x, m)?;
    Ok(Draws { post, z, ll })
}

/// `log p(x | z) + log p(z) - log q(z | x)` per draw, `B x m`.
pub fn elbo_integrand(
    encoder: &GaussianEncoder,
    decoder: &Network,
    x: ArrayView2<f64>,
    m: usize,
    noise: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let dr = draw(encoder, decoder, x, m, noise)?;
    Ok(log_weights(&dr, noise, m))
}

fn log_weights(dr: &Draws, noise: ArrayView2<f64>, m: usize) -> Array2<f64> {
    Array2::from_shape_fn((dr.post.mean.nrows(), m), |(i, j)| {
        let r = i * m + j;
        dr.ll[r] + log_standard_normal(dr.z.row(r))
            - log_posterior_density(dr.post.log_variance.row(i), noise.row(r))
    })
}

pub fn elbo_with_noise(
    encoder: &GaussianEncoder,
    decoder: &Network,
    x: ArrayView2<f64>,
    m: usize,
    noise: ArrayView2<f64>,
) -> Result<BoundEstimate> {
    let dr = draw(encoder, decoder, x, m, noise)?;
    let values = (0..x.nrows())
        .map(|i| {
            let rec = dr.ll[i * m..(i + 1) * m].iter().sum::<f64>() / m as f64;
            rec - kl_to_standard_normal(dr.post.mean.row(i), dr.post.log_variance.row(i))
        })
        .collect();
    finite(BoundEstimate {
        values,
        kind: BoundKind::Elbo,
        samples: m,
    })
}

pub fn iwae_with_noise(
    encoder: &GaussianEncoder,
    decoder: &Network,
    x: ArrayView2<f64>,
    m: usize,
    noise: ArrayView2<f64>,
) -> Result<BoundEstimate> {
    let dr = draw(encoder, decoder, x, m, noise)?;
    let lw = log_weights(&dr, noise, m);
    let log_m = (m as f64).ln();
    let values = lw
        .rows()
        .into_iter()
        .map(|r| log_sum_exp(r.as_slice().expect("standard layout")) - log_m)
        .collect();
    finite(BoundEstimate {
        values,
        kind: BoundKind::Iwae,
        samples: m,
    })
}

fn finite(b: BoundEstimate) -> Result<BoundEstimate> {
    if b.values.iter().all(|v| v.is_finite()) {
        Ok(b)
    } else {
        Err(Error::Numerical(format!("{} bound is not finite", b.kind.name())))
    }
}

/// Evidence lower bound with `m` reparameterized samples per datum.
pub fn elbo(
    encoder: &GaussianEncoder,
    decoder: &Network,
    x: ArrayView2<f64>,
    m: usize,
    seed: u64,
) -> Result<BoundEstimate> {
    let noise = sample_noise(x.nrows() * m, encoder.latent_dim(), seed);
    elbo_with_noise(encoder, decoder, x, m, noise.view())
}

/// Importance-weighted bound with `m` samples per datum.
pub fn iwae_bound(
    encoder: &GaussianEncoder,
    decoder: &Network,
    x: ArrayView2<f64>,
    m: usize,
    seed: u64,
) -> Result<BoundEstimate> {
    let noise = sample_noise(x.nrows() * m, encoder.latent_dim(), seed);
    iwae_with_noise(encoder, decoder, x, m, noise.view())
}

/// Negative batch-mean bound; accumulates gradients into both networks.
pub fn bound_backward(
    kind: BoundKind,
    encoder: &mut GaussianEncoder,
    decoder: &mut Network,
    x: ArrayView2<f64>,
    m: usize,
    noise: ArrayView2<f64>,
) -> Result<f64> {
    check_models(encoder, decoder, x, m)?;
    let d = encoder.latent_dim();
    let b = x.nrows();
    check_noise(&noise, b * m, d)?;
    let post = encoder.encode_recorded(x)?;
    let mu = repeat_rows(&post.mean, m);
    let lv = repeat_rows(&post.log_variance, m);
    let z = reparameterize(mu.view(), lv.view(), noise)?;
    let decoded = decoder.forward_recorded(z.view())?;
    let head = decoder.spec().head;
    let ll = head.log_likelihood_rows(decoded.view(), x, m)?;
    let bf = b as f64;

    // coeff[r] = d loss / d (sampled term r).
    let (loss, coeff) = match kind {
        BoundKind::Elbo => {
            let mut total = 0.0;
            for i in 0..b {
                let rec = ll[i * m..(i + 1) * m].iter().sum::<f64>() / m as f64;
                total += rec - kl_to_standard_normal(post.mean.row(i), post.log_variance.row(i));
            }
            (-total / bf, vec![-1.0 / (bf * m as f64); b * m])
        }
        BoundKind::Iwae => {
            let (mut total, mut coeff) = (0.0, vec![0.0; b * m]);
            let log_m = (m as f64).ln();
            for i in 0..b {
                let lw: Vec<f64> = (i * m..(i + 1) * m)
                    .map(|r| {
                        ll[r] + log_standard_normal(z.row(r))
                            - log_posterior_density(post.log_variance.row(i), noise.row(r))
                    })
                    .collect();
                let lse = log_sum_exp(&lw);
                total += lse - log_m;
                for (j, v) in lw.iter().enumerate() {
                    coeff[i * m + j] = -(v - lse).exp() / bf;
                }
            }
            (-total / bf, coeff)
        }
    };
    if !loss.is_finite() {
        return Ok(loss);
    }

    let g_out = head.row_gradient(decoded.view(), x, m, &coeff)?;
    let mut dz = decoder.backward(g_out.view())?;
    if kind == BoundKind::Iwae {
        // log p(z) = -|z|^2 / 2 adds -z to the path derivative.
        for (r, mut row) in dz.rows_mut().into_iter().enumerate() {
            for (g, &zv) in row.iter_mut().zip(z.row(r)) {
                *g -= coeff[r] * zv;
            }
        }
    }

    let mut d_raw = Array2::zeros((b, 2 * d));
    for r in 0..b * m {
        let i = r / m;
        for k in 0..d {
            let sigma = (0.5 * post.log_variance[[i, k]]).exp();
            d_raw[[i, k]] += dz[[r, k]];
            let mut g_lv = dz[[r, k]] * noise[[r, k]] * 0.5 * sigma;
            if kind == BoundKind::Iwae {
                // -log q(z|x) contributes +lv/2 per coordinate.
                g_lv += 0.5 * coeff[r];
            }
            d_raw[[i, d + k]] += g_lv;
        }
    }
    if kind == BoundKind::Elbo {
        for i in 0..b {
            for k in 0..d {
                let lv = post.log_variance[[i, k]];
                d_raw[[i, k]] += post.mean[[i, k]] / bf;
                d_raw[[i, d + k]] += 0.5 * (lv.exp() - 1.0) / bf;
            }
        }
    }
    for i in 0..b {
        for k in 0..d {
            if !post.in_range[[i, k]] {
                d_raw[[i, d + k]] = 0.0;
            }
        }
    }
    encoder.net.backward(d_raw.view())?;
    Ok(loss)
}
