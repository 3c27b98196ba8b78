use std::time::Instant;

use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{bound_backward, draw_noise, BoundKind, GaussianEncoder};
use crate::data::{Checkpoint, Dataset, ModelKind, RngState};
use crate::kv::KvMap;
use crate::net::{AdamConfig, AdamState, Network};
use crate::qlvm::trainer::{read_common, write_common};
use crate::qlvm::EpochRecord;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub kind: BoundKind,
    /// Samples per datum; 1 is the usual VAE setting, 10 for IWAE.
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl BaselineConfig {
    pub fn new(kind: BoundKind, seed: u64) -> Self {
        Self {
            kind,
            samples: match kind {
                BoundKind::Elbo => 1,
                BoundKind::Iwae => 10,
            },
            epochs: 200,
            batch_size: 100,
            seed,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.samples == 0 {
            return Err(Error::invalid("epochs, batch size and samples must be positive"));
        }
        if !(self.adam.learning_rate >= 0.0) || !self.adam.learning_rate.is_finite() {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn model_kind(&self) -> ModelKind {
        match self.kind {
            BoundKind::Elbo => ModelKind::Vae,
            BoundKind::Iwae => ModelKind::Iwae,
        }
    }

    pub fn to_kv(&self, kv: &mut KvMap) {
        kv.set("model", self.model_kind().name());
        kv.set("samples", self.samples);
        write_common(kv, self.epochs, self.batch_size, self.seed, &self.adam);
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let kind = match ModelKind::parse(kv.get_str("model")?)? {
            ModelKind::Vae => BoundKind::Elbo,
            ModelKind::Iwae => BoundKind::Iwae,
            ModelKind::Qlvm => return Err(Error::invalid("model qlvm is not a baseline")),
        };
        let (epochs, batch_size, seed, adam) = read_common(kv)?;
        Ok(Self {
            kind,
            samples: kv.get("samples")?,
            epochs,
            batch_size,
            seed,
            adam,
        })
    }
}

/// Resumable joint encoder/decoder training state.
#[derive(Debug, Clone)]
pub struct BaselineTrainer {
    pub config: BaselineConfig,
    pub encoder: GaussianEncoder,
    pub decoder: Network,
    pub decoder_adam: AdamState,
    pub encoder_adam: AdamState,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub trace: Vec<EpochRecord>,
    pub epoch_seconds: Vec<f64>,
}

impl BaselineTrainer {
    pub fn new(config: BaselineConfig, encoder: GaussianEncoder, decoder: Network) -> Result<Self> {
        config.validate()?;
        if decoder.spec().latent_dim != encoder.latent_dim() {
            return Err(Error::DimensionMismatch {
                context: "encoder vs decoder latent dimension",
                expected: decoder.spec().latent_dim,
                got: encoder.latent_dim(),
            });
        }
        Ok(Self {
            decoder_adam: AdamState::new(decoder.num_params(), config.adam),
            encoder_adam: AdamState::new(encoder.network().num_params(), config.adam),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            encoder,
            decoder,
            epoch: 0,
            trace: Vec::new(),
            epoch_seconds: Vec::new(),
        })
    }

    pub fn run_epoch(&mut self, data: ArrayView2<f64>) -> Result<f64> {
        let n = data.nrows();
        if n == 0 {
            return Err(Error::invalid("training data is empty"));
        }
        let start = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let m = self.config.samples;
        let d = self.encoder.latent_dim();
        let mut total = 0.0;
        for (batch, idx) in order.chunks(self.config.batch_size).enumerate() {
            let x = data.select(Axis(0), idx);
            let noise = draw_noise(idx.len() * m, d, &mut self.rng);
            let loss = bound_backward(
                self.config.kind,
                &mut self.encoder,
                &mut self.decoder,
                x.view(),
                m,
                noise.view(),
            )?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: self.epoch + 1,
                    batch,
                    max_output: self.decoder.last_max_abs_output(),
                });
            }
            self.decoder_adam.step(&mut self.decoder)?;
            self.encoder_adam.step(self.encoder.network_mut())?;
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

    pub fn fit(&mut self, data: ArrayView2<f64>) -> Result<()> {
        while self.epoch < self.config.epochs {
            self.run_epoch(data)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, extra: &KvMap) -> Checkpoint {
        let mut config = extra.clone();
        self.config.to_kv(&mut config);
        Checkpoint {
            kind: self.config.model_kind(),
            decoder: self.decoder.clone(),
            encoder: Some(self.encoder.network().clone()),
            optimizers: vec![self.decoder_adam.clone(), self.encoder_adam.clone()],
            config,
            epoch: self.epoch as u64,
            rng: RngState::capture(&self.rng),
        }
    }

    /// Restores a trainer that continues exactly where the snapshot left off.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = BaselineConfig::from_kv(&ck.config)?;
        if config.model_kind() != ck.kind {
            return Err(Error::invalid("checkpoint kind disagrees with its config"));
        }
        let encoder = GaussianEncoder::from_network(
            ck.encoder
                .clone()
                .ok_or_else(|| Error::invalid("baseline checkpoint has no encoder"))?,
        )?;
        let mut t = Self::new(config, encoder, ck.decoder.clone())?;
        let [dec, enc] = ck.optimizers.as_slice() else {
            return Err(Error::invalid("baseline checkpoint needs two optimizer states"));
        };
        if dec.first_moment.len() != t.decoder.num_params()
            || enc.first_moment.len() != t.encoder.network().num_params()
        {
            return Err(Error::invalid("optimizer state does not match the networks"));
        }
        t.decoder_adam = dec.clone();
        t.encoder_adam = enc.clone();
        t.rng = ck.rng.restore();
        t.epoch = ck.epoch as usize;
        Ok(t)
    }
}

/// Trains a baseline; returns the encoder, decoder and loss trace.
pub fn train_baseline(
    config: &BaselineConfig,
    dataset: &Dataset,
    encoder: GaussianEncoder,
    decoder: Network,
) -> Result<(GaussianEncoder, Network, Vec<EpochRecord>)> {
    let mut t = BaselineTrainer::new(config.clone(), encoder, decoder)?;
    t.fit(dataset.values().view())?;
    Ok((t.encoder, t.decoder, t.trace))
}
