//! A small dense-network engine with explicit reverse-mode gradients.
//!
//! Networks operate on row batches: the input is an `n x d` latent matrix,
//! the output `n x D`. A recorded forward pass keeps every layer activation
//! on a tape; [`Network::backward`] then pushes an output cotangent back
//! through the tape, accumulating parameter gradients and returning the
//! gradient with respect to the latent input.

mod adam;
mod head;

use std::f64::consts::PI;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::lattice::{clamped_icdf, normal::normal_pdf, wrap_unit, PROB_CLAMP};
use crate::{Error, Result};

pub use adam::{AdamConfig, AdamState};
pub use head::{log_likelihood, OutputHead, BERNOULLI_CLAMP};

/// How latent coordinates enter the first affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Embedding {
    /// `z_k -> (sin 2 pi z_k, cos 2 pi z_k)`; exact period 1 in every coordinate.
    Periodic,
    /// Raw coordinates.
    Identity,
    /// Clamped inverse normal CDF of each coordinate, giving a Gaussian prior
    /// over uniform latents.
    GaussianIcdf,
}

impl Embedding {
    pub fn width(self, latent_dim: usize) -> usize {
        match self {
            Embedding::Periodic => 2 * latent_dim,
            Embedding::Identity | Embedding::GaussianIcdf => latent_dim,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Embedding::Periodic => "periodic",
            Embedding::Identity => "identity",
            Embedding::GaussianIcdf => "gaussian-icdf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "periodic" => Ok(Embedding::Periodic),
            "identity" => Ok(Embedding::Identity),
            "gaussian-icdf" => Ok(Embedding::GaussianIcdf),
            other => Err(Error::invalid(format!("unknown embedding '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::invalid(format!("unknown activation '{other}'"))),
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub latent_dim: usize,
    pub embedding: Embedding,
    /// Output width of every affine layer; the last entry is the output width.
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub head: OutputHead,
}

impl NetworkSpec {
    pub fn input_width(&self) -> usize {
        self.embedding.width(self.latent_dim)
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::invalid("latent dimension must be at least 1"));
        }
        if self.widths.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        if self.widths.contains(&0) {
            return Err(Error::invalid("layer widths must be at least 1"));
        }
        if let OutputHead::Gaussian { variance } = self.head {
            if !(variance > 0.0 && variance.is_finite()) {
                return Err(Error::invalid("gaussian head variance must be positive"));
            }
        }
        Ok(())
    }

    fn layer_shapes(&self) -> Vec<LayerShape> {
        let mut offset = 0;
        let mut fan_in = self.input_width();
        self.widths
            .iter()
            .map(|&fan_out| {
                let shape = LayerShape {
                    fan_in,
                    fan_out,
                    offset,
                };
                offset += fan_in * fan_out + fan_out;
                fan_in = fan_out;
                shape
            })
            .collect()
    }
}

/// Position of one affine layer inside the flat parameter array.
///
/// The weight block is `fan_in x fan_out`, row-major, followed by `fan_out` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub offset: usize,
}

impl LayerShape {
    fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    fn bias_range(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }

    pub fn glorot_bound(&self) -> f64 {
        (6.0 / (self.fan_in + self.fan_out) as f64).sqrt()
    }
}

#[derive(Debug, Clone)]
struct Tape {
    latent: Array2<f64>,
    /// `activations[0]` is the embedded input, `activations[l + 1]` the output of layer `l`.
    activations: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<LayerShape>,
    params: Vec<f64>,
    grads: Vec<f64>,
    tape: Option<Tape>,
}

/// Glorot-uniform weights and zero biases, deterministic in `seed`.
pub fn init_network(spec: NetworkSpec, seed: u64) -> Result<Network> {
    let mut net = Network::zeros(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in net.layers.clone() {
        let bound = layer.glorot_bound();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        for w in &mut net.params[layer.weight_range()] {
            *w = dist.sample(&mut rng);
        }
    }
    Ok(net)
}

impl Network {
    /// A network with every parameter set to zero.
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec.layer_shapes();
        let n = layers
            .last()
            .map(|l| l.bias_range().end)
            .unwrap_or_default();
        Ok(Self {
            spec,
            layers,
            params: vec![0.0; n],
            grads: vec![0.0; n],
            tape: None,
        })
    }

    /// Rebuilds a network from a spec and a flat parameter vector.
    pub fn from_params(spec: NetworkSpec, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        if params.len() != net.params.len() {
            return Err(Error::DimensionMismatch {
                context: "network parameters",
                expected: net.params.len(),
                got: params.len(),
            });
        }
        net.params = params;
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Same parameters under a different input embedding of equal width.
    pub fn with_embedding(&self, embedding: Embedding) -> Result<Network> {
        if embedding.width(self.spec.latent_dim) != self.spec.input_width() {
            return Err(Error::DimensionMismatch {
                context: "embedding width",
                expected: self.spec.input_width(),
                got: embedding.width(self.spec.latent_dim),
            });
        }
        let mut spec = self.spec.clone();
        spec.embedding = embedding;
        Network::from_params(spec, self.params.clone())
    }

    /// Sets layer `l`'s bias vector; handy for building constant decoders.
    pub fn set_bias(&mut self, layer: usize, bias: &[f64]) -> Result<()> {
        let shape = *self
            .layers
            .get(layer)
            .ok_or_else(|| Error::invalid(format!("no layer {layer}")))?;
        if bias.len() != shape.fan_out {
            return Err(Error::DimensionMismatch {
                context: "bias",
                expected: shape.fan_out,
                got: bias.len(),
            });
        }
        self.params[shape.bias_range()].copy_from_slice(bias);
        Ok(())
    }

    fn weights(&self, layer: &LayerShape) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((layer.fan_in, layer.fan_out), &self.params[layer.weight_range()])
            .expect("layer shape")
    }

    fn embed(&self, z: ArrayView2<f64>) -> Array2<f64> {
        let n = z.nrows();
        let d = self.spec.latent_dim;
        match self.spec.embedding {
            Embedding::Identity => z.to_owned(),
            Embedding::GaussianIcdf => z.mapv(clamped_icdf),
            Embedding::Periodic => {
                let mut e = Array2::zeros((n, 2 * d));
                for (zr, mut er) in z.rows().into_iter().zip(e.rows_mut()) {
                    for k in 0..d {
                        let angle = 2.0 * PI * wrap_unit(zr[k]);
                        let (sin, cos) = angle.sin_cos();
                        er[2 * k] = sin;
                        er[2 * k + 1] = cos;
                    }
                }
                e
            }
        }
    }

    fn check_input(&self, z: &ArrayView2<f64>) -> Result<()> {
        if z.ncols() != self.spec.latent_dim {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.spec.latent_dim,
                got: z.ncols(),
            });
        }
        Ok(())
    }

    fn run(&self, z: ArrayView2<f64>, record: bool) -> (Array2<f64>, Option<Vec<Array2<f64>>>) {
        let mut act = self.embed(z);
        let mut saved = record.then(Vec::new);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut next = act.dot(&self.weights(layer));
            let bias = &self.params[layer.bias_range()];
            let activation = self.spec.activation;
            for mut row in next.rows_mut() {
                for (x, b) in row.iter_mut().zip(bias) {
                    *x += b;
                    if l < last {
                        *x = activation.apply(*x);
                    }
                }
            }
            if let Some(s) = saved.as_mut() {
                s.push(act);
            }
            act = next;
        }
        if let Some(s) = saved.as_mut() {
            s.push(act.clone());
        }
        (act, saved)
    }

    /// Raw network output (logits for Bernoulli heads, means for Gaussian heads).
    pub fn forward(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&z)?;
        Ok(self.run(z, false).0)
    }

    /// Forward pass that records the tape needed by [`Network::backward`].
    pub fn forward_recorded(&mut self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&z)?;
        let (out, acts) = self.run(z, true);
        self.tape = Some(Tape {
            latent: z.to_owned(),
            activations: acts.expect("recording requested"),
        });
        Ok(out)
    }

    /// Output mapped to data space: probabilities for Bernoulli heads.
    pub fn decode_mean(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        let out = self.forward(z)?;
        Ok(self.spec.head.mean(out))
    }

    /// Accumulates parameter gradients for the cotangent `d_output` of the
    /// last recorded forward pass, returning the gradient with respect to the
    /// latent input. Calling it twice accumulates twice.
    pub fn backward(&mut self, d_output: ArrayView2<f64>) -> Result<Array2<f64>> {
        let tape = self.tape.as_ref().ok_or(Error::BackwardBeforeForward)?;
        let n = tape.latent.nrows();
        if d_output.dim() != (n, self.spec.output_width()) {
            return Err(Error::DimensionMismatch {
                context: "backward cotangent rows",
                expected: n,
                got: d_output.nrows(),
            });
        }
        let activation = self.spec.activation;
        let mut delta = d_output.to_owned();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = &tape.activations[l];
            {
                let gw = &mut self.grads[layer.weight_range()];
                let mut gw = ArrayViewMut2::from_shape((layer.fan_in, layer.fan_out), gw)
                    .expect("layer shape");
                general_mat_mul(1.0, &input.t(), &delta, 1.0, &mut gw);
            }
            let gb = &mut self.grads[layer.bias_range()];
            for (g, s) in gb.iter_mut().zip(delta.sum_axis(Axis(0))) {
                *g += s;
            }
            let w = ArrayView2::from_shape(
                (layer.fan_in, layer.fan_out),
                &self.params[layer.weight_range()],
            )
            .expect("layer shape");
            let mut d_input = delta.dot(&w.t());
            if l > 0 {
                d_input.zip_mut_with(input, |d, &y| *d *= activation.derivative_from_output(y));
            }
            delta = d_input;
        }
        Ok(self.embedding_backward(&tape.latent.view(), delta.view()))
    }

    fn embedding_backward(&self, z: &ArrayView2<f64>, d_embed: ArrayView2<f64>) -> Array2<f64> {
        let d = self.spec.latent_dim;
        match self.spec.embedding {
            Embedding::Identity => d_embed.to_owned(),
            Embedding::GaussianIcdf => {
                let mut out = d_embed.to_owned();
                out.zip_mut_with(z, |g, &u| {
                    *g = if u > PROB_CLAMP && u < 1.0 - PROB_CLAMP {
                        *g / normal_pdf(clamped_icdf(u))
                    } else {
                        0.0
                    };
                });
                out
            }
            Embedding::Periodic => {
                let mut out = Array2::zeros((z.nrows(), d));
                for i in 0..z.nrows() {
                    for k in 0..d {
                        let angle = 2.0 * PI * wrap_unit(z[[i, k]]);
                        let (sin, cos) = angle.sin_cos();
                        out[[i, k]] = 2.0
                            * PI
                            * (cos * d_embed[[i, 2 * k]] - sin * d_embed[[i, 2 * k + 1]]);
                    }
                }
                out
            }
        }
    }

    /// Largest absolute decoder output on the last recorded pass, for diagnostics.
    pub fn last_max_abs_output(&self) -> f64 {
        self.tape
            .as_ref()
            .and_then(|t| t.activations.last())
            .map(|a| a.iter().fold(0.0f64, |m, x| m.max(x.abs())))
            .unwrap_or(0.0)
    }
}

/// First-layer weights of `net` as a `fan_in x fan_out` matrix copy.
pub fn first_layer_weights(net: &Network) -> Array2<f64> {
    let layer = net.layers[0];
    net.weights(&layer).slice(s![.., ..]).to_owned()
}
