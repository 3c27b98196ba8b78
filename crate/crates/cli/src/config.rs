//! Flat `key = value` run configuration.
//!
//! Values are resolved from built-in defaults, then the config stored in a
//! checkpoint (if the command reads one), then `--config`, then each
//! `--set key=value`, then `--seed`. Unknown keys are rejected. Everything is
//! parsed into [`Settings`] up front so a bad value fails before any work.

use std::path::{Path, PathBuf};

use qlvm_core::baselines::{BaselineConfig, BoundKind};
use qlvm_core::data::{load_idx, split, synth_mixture, Dataset, MixtureSpec, ModelKind};
use qlvm_core::kv::KvMap;
use qlvm_core::lattice::SamplingMode;
use qlvm_core::net::{Activation, AdamConfig, Embedding, NetworkSpec, OutputHead};
use qlvm_core::qlvm::{LatticeSpec, TrainConfig};

use crate::error::{config, CliError, Result};

pub const DEFAULTS: &[(&str, &str)] = &[
    ("model", "qlvm"),
    ("data", "synth"),
    ("data.images", ""),
    ("data.labels", ""),
    ("data.seed", "1"),
    ("synth.clusters", "8"),
    ("synth.n", "2000"),
    ("synth.side", "16"),
    ("synth.sigma", "1.5"),
    ("synth.jitter", "1"),
    ("split.fraction", "0.8"),
    ("lattice", "fib:13"),
    ("sampling", "rqmc"),
    ("prior", "torus"),
    ("decoder.hidden", "64,128"),
    ("decoder.activation", "relu"),
    ("head", "bernoulli"),
    ("head.variance", "0.1"),
    ("encoder.hidden", "auto"),
    ("samples", "auto"),
    ("epochs", "200"),
    ("batch_size", "100"),
    ("seed", "0"),
    ("lr", "0.001"),
    ("beta1", "0.9"),
    ("beta2", "0.999"),
    ("adam_eps", "1e-8"),
    ("eval.lattice", "fib:20"),
    ("eval.shifts", "10"),
    ("eval.elbo_samples", "100"),
    ("analysis.lattice", "fib:20"),
    ("analysis.data", "all"),
    ("raster.size", "256"),
    ("cluster.bandwidth", "0.1"),
    ("cluster.seeds", "data"),
    ("jacobian.step", "1e-4"),
    ("jacobian.smoothing", "0.02"),
    ("geodesic.source", "centroid:0"),
    ("geodesic.destination", "centroid:1"),
    ("geodesic.epsilon", "1e-12"),
    ("traverse.start", "0,0"),
    ("traverse.direction", "1,0"),
    ("traverse.steps", "16"),
    ("sample.n", "16"),
    ("sweep.values", "55,233,987"),
];

fn known() -> Vec<&'static str> {
    DEFAULTS.iter().map(|(k, _)| *k).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synth(MixtureSpec),
    Idx { images: PathBuf, labels: Option<PathBuf> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataPart {
    All,
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Endpoint {
    Point(Vec<f64>),
    Centroid(usize),
}

impl Endpoint {
    fn parse(s: &str, key: &str) -> Result<Self> {
        if let Some(i) = s.strip_prefix("centroid:") {
            return i
                .trim()
                .parse()
                .map(Endpoint::Centroid)
                .map_err(|_| config(format!("{key}: bad centroid index '{i}'")));
        }
        parse_floats(s, key).map(Endpoint::Point)
    }
}

fn parse_floats(s: &str, key: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| config(format!("{key}: bad number '{p}'"))))
        .collect()
}

/// Typed view of a resolved configuration.
#[derive(Debug, Clone)]
pub struct Settings {
    pub kv: KvMap,
    pub model: ModelKind,
    pub data: DataSource,
    pub data_seed: u64,
    pub split_fraction: f64,
    pub lattice: LatticeSpec,
    pub sampling: SamplingMode,
    pub prior: Embedding,
    pub decoder_hidden: Vec<usize>,
    pub activation: Activation,
    pub head: OutputHead,
    pub encoder_hidden: Vec<usize>,
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub eval_lattice: LatticeSpec,
    pub eval_shifts: usize,
    pub eval_elbo_samples: usize,
    pub analysis_lattice: LatticeSpec,
    pub analysis_data: DataPart,
    pub raster_size: usize,
    pub cluster_bandwidth: f64,
    pub cluster_seeds: Option<LatticeSpec>,
    pub jacobian_step: f64,
    pub jacobian_smoothing: f64,
    pub geodesic_source: Endpoint,
    pub geodesic_destination: Endpoint,
    pub geodesic_epsilon: f64,
    pub traverse_start: Vec<f64>,
    pub traverse_direction: Vec<f64>,
    pub traverse_steps: usize,
    pub sample_n: usize,
    pub sweep_values: Vec<usize>,
}

fn core(e: qlvm_core::Error) -> CliError {
    config(e.to_string())
}

/// Layers `stored`, the file, overrides and seed on top of the defaults.
pub fn resolve(
    stored: Option<&KvMap>,
    file: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<Settings> {
    let known = known();
    let mut kv = KvMap::new();
    for (k, v) in DEFAULTS {
        kv.set(k, v);
    }
    if let Some(stored) = stored {
        for (k, v) in stored.iter() {
            if known.contains(&k) {
                kv.set(k, v);
            }
        }
    }
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let layer = KvMap::parse(&text).map_err(|e| config(format!("{}: {e}", path.display())))?;
        layer.reject_unknown(&known).map_err(|e| config(format!("{}: {e}", path.display())))?;
        for (k, v) in layer.iter() {
            kv.set(k, v);
        }
    }
    for item in overrides {
        let mut one = KvMap::new();
        one.apply_override(item).map_err(core)?;
        one.reject_unknown(&known).map_err(core)?;
        for (k, v) in one.iter() {
            kv.set(k, v);
        }
    }
    if let Some(s) = seed {
        kv.set("seed", s);
    }
    Settings::from_kv(kv)
}

impl Settings {
    fn from_kv(kv: KvMap) -> Result<Self> {
        let get_str = |k: &str| kv.get_str(k).map_err(core);
        let lattice = |k: &str| LatticeSpec::parse(kv.get_str(k).map_err(core)?).map_err(|e| config(format!("{k}: {e}")));
        let model = ModelKind::parse(get_str("model")?).map_err(core)?;
        let data = match get_str("data")? {
            "synth" => DataSource::Synth(MixtureSpec {
                clusters: kv.get("synth.clusters").map_err(core)?,
                samples: kv.get("synth.n").map_err(core)?,
                side: kv.get("synth.side").map_err(core)?,
                sigma: kv.get("synth.sigma").map_err(core)?,
                jitter: kv.get("synth.jitter").map_err(core)?,
            }),
            "idx" => {
                let images = get_str("data.images")?;
                if images.is_empty() {
                    return Err(config("data = idx needs data.images"));
                }
                let labels = get_str("data.labels")?;
                DataSource::Idx {
                    images: images.into(),
                    labels: (!labels.is_empty()).then(|| labels.into()),
                }
            }
            other => return Err(config(format!("data must be synth or idx, got '{other}'"))),
        };
        let prior = match get_str("prior")? {
            "torus" => Embedding::Periodic,
            "gaussian" => Embedding::GaussianIcdf,
            "nonperiodic" => Embedding::Identity,
            other => return Err(config(format!("prior must be torus, gaussian or nonperiodic, got '{other}'"))),
        };
        let head = match get_str("head")? {
            "bernoulli" => OutputHead::Bernoulli,
            "gaussian" => OutputHead::Gaussian {
                variance: kv.get("head.variance").map_err(core)?,
            },
            other => return Err(config(format!("head must be bernoulli or gaussian, got '{other}'"))),
        };
        let decoder_hidden: Vec<usize> = kv.get_list("decoder.hidden").map_err(core)?;
        let encoder_hidden = match get_str("encoder.hidden")? {
            "auto" => decoder_hidden.iter().rev().copied().collect(),
            _ => kv.get_list("encoder.hidden").map_err(core)?,
        };
        let samples = match get_str("samples")? {
            "auto" => match model {
                ModelKind::Iwae => 10,
                _ => 1,
            },
            _ => kv.get("samples").map_err(core)?,
        };
        let analysis_data = match get_str("analysis.data")? {
            "all" => DataPart::All,
            "train" => DataPart::Train,
            "test" => DataPart::Test,
            other => return Err(config(format!("analysis.data must be all, train or test, got '{other}'"))),
        };
        let cluster_seeds = match get_str("cluster.seeds")? {
            "data" => None,
            _ => Some(lattice("cluster.seeds")?),
        };
        let s = Settings {
            model,
            data,
            data_seed: kv.get("data.seed").map_err(core)?,
            split_fraction: kv.get("split.fraction").map_err(core)?,
            lattice: lattice("lattice")?,
            sampling: SamplingMode::parse(get_str("sampling")?).map_err(core)?,
            prior,
            decoder_hidden,
            activation: Activation::parse(get_str("decoder.activation")?).map_err(core)?,
            head,
            encoder_hidden,
            samples,
            epochs: kv.get("epochs").map_err(core)?,
            batch_size: kv.get("batch_size").map_err(core)?,
            seed: kv.get("seed").map_err(core)?,
            adam: AdamConfig {
                learning_rate: kv.get("lr").map_err(core)?,
                beta1: kv.get("beta1").map_err(core)?,
                beta2: kv.get("beta2").map_err(core)?,
                epsilon: kv.get("adam_eps").map_err(core)?,
            },
            eval_lattice: lattice("eval.lattice")?,
            eval_shifts: kv.get("eval.shifts").map_err(core)?,
            eval_elbo_samples: kv.get("eval.elbo_samples").map_err(core)?,
            analysis_lattice: lattice("analysis.lattice")?,
            analysis_data,
            raster_size: kv.get("raster.size").map_err(core)?,
            cluster_bandwidth: kv.get("cluster.bandwidth").map_err(core)?,
            cluster_seeds,
            jacobian_step: kv.get("jacobian.step").map_err(core)?,
            jacobian_smoothing: kv.get("jacobian.smoothing").map_err(core)?,
            geodesic_source: Endpoint::parse(get_str("geodesic.source")?, "geodesic.source")?,
            geodesic_destination: Endpoint::parse(get_str("geodesic.destination")?, "geodesic.destination")?,
            geodesic_epsilon: kv.get("geodesic.epsilon").map_err(core)?,
            traverse_start: parse_floats(get_str("traverse.start")?, "traverse.start")?,
            traverse_direction: parse_floats(get_str("traverse.direction")?, "traverse.direction")?,
            traverse_steps: kv.get("traverse.steps").map_err(core)?,
            sample_n: kv.get("sample.n").map_err(core)?,
            sweep_values: kv.get_list("sweep.values").map_err(core)?,
            kv,
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(config("split.fraction must lie in (0, 1)"));
        }
        if self.decoder_hidden.is_empty() {
            return Err(config("decoder.hidden needs at least one layer"));
        }
        if self.eval_shifts == 0 || self.eval_elbo_samples == 0 {
            return Err(config("eval.shifts and eval.elbo_samples must be positive"));
        }
        if self.raster_size == 0 {
            return Err(config("raster.size must be positive"));
        }
        if !(self.cluster_bandwidth > 0.0) {
            return Err(config("cluster.bandwidth must be positive"));
        }
        if !(self.jacobian_step > 0.0 && self.jacobian_step <= 0.01) {
            return Err(config("jacobian.step must lie in (0, 0.01]"));
        }
        if !(self.jacobian_smoothing > 0.0) {
            return Err(config("jacobian.smoothing must be positive"));
        }
        if !(self.geodesic_epsilon > 0.0) {
            return Err(config("geodesic.epsilon must be positive"));
        }
        if self.traverse_steps == 0 {
            return Err(config("traverse.steps must be positive"));
        }
        self.train_config().validate().map_err(core)?;
        self.baseline_config().validate().map_err(core)?;
        if let DataSource::Synth(spec) = &self.data {
            if spec.clusters == 0 || spec.side < 8 || !(spec.sigma > 0.0) {
                return Err(config("synth needs clusters >= 1, side >= 8 and sigma > 0"));
            }
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.lattice.dim()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lattice: self.lattice,
            mode: self.sampling,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            adam: self.adam,
        }
    }

    pub fn baseline_config(&self) -> BaselineConfig {
        BaselineConfig {
            kind: match self.model {
                ModelKind::Iwae => BoundKind::Iwae,
                _ => BoundKind::Elbo,
            },
            samples: self.samples,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            adam: self.adam,
        }
    }

    /// Decoder for the configured model; baselines always read unconstrained latents.
    pub fn decoder_spec(&self, data_dim: usize) -> NetworkSpec {
        let mut widths = self.decoder_hidden.clone();
        widths.push(data_dim);
        NetworkSpec {
            latent_dim: self.latent_dim(),
            embedding: match self.model {
                ModelKind::Qlvm => self.prior,
                _ => Embedding::Identity,
            },
            widths,
            activation: self.activation,
            head: self.head,
        }
    }

    pub fn dataset(&self) -> Result<Dataset> {
        Ok(match &self.data {
            DataSource::Synth(spec) => synth_mixture(spec, self.data_seed)?,
            DataSource::Idx { images, labels } => load_idx(images, labels.as_deref())?,
        })
    }

    pub fn splits(&self) -> Result<(Dataset, Dataset)> {
        Ok(split(&self.dataset()?, self.split_fraction, self.data_seed)?)
    }

    pub fn analysis_dataset(&self) -> Result<Dataset> {
        match self.analysis_data {
            DataPart::All => self.dataset(),
            DataPart::Train => Ok(self.splits()?.0),
            DataPart::Test => Ok(self.splits()?.1),
        }
    }
}
