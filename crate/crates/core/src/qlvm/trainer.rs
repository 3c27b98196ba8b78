use std::fmt;
use std::time::Instant;

use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::qmc_objective_backward;
use crate::data::{Checkpoint, Dataset, ModelKind, RngState};
use crate::kv::KvMap;
use crate::lattice::{
    fibonacci_index, fibonacci_rule, generate_points_with, korobov_rule, korobov_search,
    LatticeRule, SamplingMode,
};
use crate::net::{AdamConfig, AdamState, Network};
use crate::{Error, Result};

/// How the training lattice is constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatticeSpec {
    Fibonacci { k: u32 },
    Korobov { m: usize, a: usize, d: usize },
    KorobovSearch { m: usize, d: usize },
}

impl LatticeSpec {
    pub fn build(&self) -> Result<LatticeRule> {
        match *self {
            LatticeSpec::Fibonacci { k } => fibonacci_rule(k),
            LatticeSpec::Korobov { m, a, d } => korobov_rule(m, a, d),
            LatticeSpec::KorobovSearch { m, d } => korobov_search(m, d),
        }
    }

    /// Fibonacci rule when `d == 2` and `m` is a Fibonacci number, else a searched Korobov rule.
    pub fn for_count(m: usize, d: usize) -> Self {
        match fibonacci_index(m) {
            Some(k) if d == 2 => LatticeSpec::Fibonacci { k },
            _ => LatticeSpec::KorobovSearch { m, d },
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            LatticeSpec::Fibonacci { .. } => 2,
            LatticeSpec::Korobov { d, .. } | LatticeSpec::KorobovSearch { d, .. } => d,
        }
    }

    /// Parses `fib:K`, `korobov:M:A:D` or `search:M:D`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |p: &str| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad integer '{p}' in lattice '{s}'")))
        };
        let spec = match parts.as_slice() {
            ["fib", k] => LatticeSpec::Fibonacci { k: num(k)? as u32 },
            ["korobov", m, a, d] => LatticeSpec::Korobov {
                m: num(m)?,
                a: num(a)?,
                d: num(d)?,
            },
            ["search", m, d] => LatticeSpec::KorobovSearch { m: num(m)?, d: num(d)? },
            _ => {
                return Err(Error::invalid(format!(
                    "lattice '{s}' must be fib:K, korobov:M:A:D or search:M:D"
                )))
            }
        };
        spec.build()?;
        Ok(spec)
    }
}

impl fmt::Display for LatticeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LatticeSpec::Fibonacci { k } => write!(f, "fib:{k}"),
            LatticeSpec::Korobov { m, a, d } => write!(f, "korobov:{m}:{a}:{d}"),
            LatticeSpec::KorobovSearch { m, d } => write!(f, "search:{m}:{d}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lattice: LatticeSpec,
    pub mode: SamplingMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn new(lattice: LatticeSpec, seed: u64) -> Self {
        Self {
            lattice,
            mode: SamplingMode::ShiftedRqmc,
            epochs: 200,
            batch_size: 100,
            seed,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        if !(self.adam.learning_rate >= 0.0) || !self.adam.learning_rate.is_finite() {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        self.lattice.build().map(|_| ())
    }

    pub fn to_kv(&self, kv: &mut KvMap) {
        kv.set("lattice", self.lattice);
        kv.set("sampling", self.mode.name());
        write_common(kv, self.epochs, self.batch_size, self.seed, &self.adam);
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let (epochs, batch_size, seed, adam) = read_common(kv)?;
        Ok(Self {
            lattice: LatticeSpec::parse(kv.get_str("lattice")?)?,
            mode: SamplingMode::parse(kv.get_str("sampling")?)?,
            epochs,
            batch_size,
            seed,
            adam,
        })
    }
}

pub(crate) fn write_common(kv: &mut KvMap, epochs: usize, batch: usize, seed: u64, adam: &AdamConfig) {
    kv.set("epochs", epochs);
    kv.set("batch_size", batch);
    kv.set("seed", seed);
    kv.set_f64("lr", adam.learning_rate);
    kv.set_f64("beta1", adam.beta1);
    kv.set_f64("beta2", adam.beta2);
    kv.set_f64("adam_eps", adam.epsilon);
}

pub(crate) fn read_common(kv: &KvMap) -> Result<(usize, usize, u64, AdamConfig)> {
    Ok((
        kv.get("epochs")?,
        kv.get("batch_size")?,
        kv.get("seed")?,
        AdamConfig {
            learning_rate: kv.get("lr")?,
            beta1: kv.get("beta1")?,
            beta2: kv.get("beta2")?,
            epsilon: kv.get("adam_eps")?,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean negative lattice bound over the epoch's training data.
    pub objective: f64,
}

/// Resumable QLVM training state.
#[derive(Debug, Clone)]
pub struct QlvmTrainer {
    pub config: TrainConfig,
    pub rule: LatticeRule,
    pub decoder: Network,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub trace: Vec<EpochRecord>,
    /// Wall-clock seconds per completed epoch in this process (not persisted).
    pub epoch_seconds: Vec<f64>,
}

impl QlvmTrainer {
    pub fn new(config: TrainConfig, decoder: Network) -> Result<Self> {
        config.validate()?;
        let rule = config.lattice.build()?;
        if rule.dim() != decoder.spec().latent_dim {
            return Err(Error::DimensionMismatch {
                context: "lattice vs decoder latent dimension",
                expected: decoder.spec().latent_dim,
                got: rule.dim(),
            });
        }
        let adam = AdamState::new(decoder.num_params(), config.adam);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            config,
            rule,
            decoder,
            adam,
            rng,
            epoch: 0,
            trace: Vec::new(),
            epoch_seconds: Vec::new(),
        })
    }

    /// One pass over `data` in shuffled minibatches, one point set per batch.
    pub fn run_epoch(&mut self, data: ArrayView2<f64>) -> Result<f64> {
        let n = data.nrows();
        if n == 0 {
            return Err(Error::invalid("training data is empty"));
        }
        let start = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for (batch, idx) in order.chunks(self.config.batch_size).enumerate() {
            let x = data.select(Axis(0), idx);
            let points = generate_points_with(&self.rule, self.config.mode, &mut self.rng);
            let loss = qmc_objective_backward(&mut self.decoder, x.view(), &points)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: self.epoch + 1,
                    batch,
                    max_output: self.decoder.last_max_abs_output(),
                });
            }
            self.adam.step(&mut self.decoder)?;
            total += loss * idx.len() as f64;
        }
        self.epoch += 1;
        let objective = total / n as f64;
        self.trace.push(EpochRecord {
            epoch: self.epoch,
            objective,
        });
        self.epoch_seconds.push(start.elapsed().as_secs_f64());
        Ok(objective)
    }

    /// Runs the remaining epochs up to `config.epochs`.
    pub fn fit(&mut self, data: ArrayView2<f64>) -> Result<()> {
        while self.epoch < self.config.epochs {
            self.run_epoch(data)?;
        }
        Ok(())
    }
}

impl QlvmTrainer {
    /// Snapshot with `extra` run settings merged after the training keys.
    pub fn to_checkpoint(&self, extra: &KvMap) -> Checkpoint {
        let mut config = extra.clone();
        self.config.to_kv(&mut config);
        Checkpoint {
            kind: ModelKind::Qlvm,
            decoder: self.decoder.clone(),
            encoder: None,
            optimizers: vec![self.adam.clone()],
            config,
            epoch: self.epoch as u64,
            rng: RngState::capture(&self.rng),
        }
    }

    /// Restores a trainer that continues exactly where the snapshot left off.
    /// The loss trace restarts empty.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != ModelKind::Qlvm {
            return Err(Error::invalid(format!(
                "checkpoint holds a {} model, not qlvm",
                ck.kind.name()
            )));
        }
        let config = TrainConfig::from_kv(&ck.config)?;
        let mut trainer = Self::new(config, ck.decoder.clone())?;
        let adam = ck
            .optimizers
            .first()
            .ok_or_else(|| Error::invalid("checkpoint has no optimizer state"))?;
        if adam.first_moment.len() != trainer.decoder.num_params() {
            return Err(Error::DimensionMismatch {
                context: "optimizer moments",
                expected: trainer.decoder.num_params(),
                got: adam.first_moment.len(),
            });
        }
        trainer.adam = adam.clone();
        trainer.rng = ck.rng.restore();
        trainer.epoch = ck.epoch as usize;
        Ok(trainer)
    }
}

/// Trains `net` on `dataset` and returns it with the per-epoch loss trace.
pub fn train(config: &TrainConfig, dataset: &Dataset, net: Network) -> Result<(Network, Vec<EpochRecord>)> {
    let mut trainer = QlvmTrainer::new(config.clone(), net)?;
    trainer.fit(dataset.values().view())?;
    Ok((trainer.decoder, trainer.trace))
}
