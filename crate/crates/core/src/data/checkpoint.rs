//! Binary checkpoint format.
//!
//! ```text
//! "QLVMCKPT"            8-byte magic
//! version               u32 LE
//! spec section          u64 LE length + UTF-8 key=value text
//! config section        u64 LE length + UTF-8 key=value text
//! array count           u32 LE
//! arrays                u64 LE length + length * f64 LE, each
//! crc32                 u32 LE over every preceding byte
//! ```
//!
//! The spec section describes the networks, optimizer counters and RNG
//! state; arrays hold decoder parameters, encoder parameters (if any) and
//! each optimizer's first and second moments, in that order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::kv::KvMap;
use crate::net::{Activation, AdamConfig, AdamState, Embedding, Network, NetworkSpec, OutputHead};

pub const MAGIC: &[u8; 8] = b"QLVMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("truncated checkpoint: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Qlvm,
    Vae,
    Iwae,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Qlvm => "qlvm",
            ModelKind::Vae => "vae",
            ModelKind::Iwae => "iwae",
        }
    }

    pub fn parse(s: &str) -> crate::Result<Self> {
        match s {
            "qlvm" => Ok(ModelKind::Qlvm),
            "vae" => Ok(ModelKind::Vae),
            "iwae" => Ok(ModelKind::Iwae),
            other => Err(crate::Error::invalid(format!(
                "unknown model kind '{other}' (expected qlvm, vae or iwae)"
            ))),
        }
    }
}

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub decoder: Network,
    pub encoder: Option<Network>,
    /// Decoder optimizer first, then the encoder's if present.
    pub optimizers: Vec<AdamState>,
    /// Training and run configuration.
    pub config: KvMap,
    pub epoch: u64,
    pub rng: RngState,
}

fn malformed(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed(msg.into())
}

impl From<crate::Error> for CheckpointError {
    fn from(e: crate::Error) -> Self {
        malformed(e.to_string())
    }
}

pub(crate) fn spec_to_kv(spec: &NetworkSpec, prefix: &str, kv: &mut KvMap) {
    kv.set(&format!("{prefix}.latent_dim"), spec.latent_dim);
    kv.set(&format!("{prefix}.embedding"), spec.embedding.name());
    let widths: Vec<String> = spec.widths.iter().map(|w| w.to_string()).collect();
    kv.set(&format!("{prefix}.widths"), widths.join(","));
    kv.set(&format!("{prefix}.activation"), spec.activation.name());
    kv.set(&format!("{prefix}.head"), spec.head.name());
    if let OutputHead::Gaussian { variance } = spec.head {
        kv.set_f64(&format!("{prefix}.head_variance"), variance);
    }
}

pub(crate) fn spec_from_kv(kv: &KvMap, prefix: &str) -> crate::Result<NetworkSpec> {
    let key = |k: &str| format!("{prefix}.{k}");
    let head = match kv.get_str(&key("head"))? {
        "bernoulli" => OutputHead::Bernoulli,
        "gaussian" => OutputHead::Gaussian {
            variance: kv.get(&key("head_variance"))?,
        },
        "linear" => OutputHead::Linear,
        other => return Err(crate::Error::invalid(format!("unknown head '{other}'"))),
    };
    let spec = NetworkSpec {
        latent_dim: kv.get(&key("latent_dim"))?,
        embedding: Embedding::parse(kv.get_str(&key("embedding"))?)?,
        widths: kv.get_list(&key("widths"))?,
        activation: Activation::parse(kv.get_str(&key("activation"))?)?,
        head,
    };
    spec.validate()?;
    Ok(spec)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(
            CheckpointError::Truncated {
                needed: self.pos.saturating_add(n),
                available: self.bytes.len(),
            },
        )?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?).map_err(|_| malformed("length overflows usize"))
    }

    fn text(&mut self) -> Result<KvMap, CheckpointError> {
        let n = self.len()?;
        let raw = std::str::from_utf8(self.take(n)?).map_err(|_| malformed("section is not UTF-8"))?;
        Ok(KvMap::parse(raw)?)
    }

    fn array(&mut self) -> Result<Vec<f64>, CheckpointError> {
        let n = self.len()?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| malformed("array too large"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn push_text(out: &mut Vec<u8>, kv: &KvMap) {
    let t = kv.to_text();
    out.extend((t.len() as u64).to_le_bytes());
    out.extend(t.as_bytes());
}

fn push_array(out: &mut Vec<u8>, values: &[f64]) {
    out.extend((values.len() as u64).to_le_bytes());
    for v in values {
        out.extend(v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut spec = KvMap::new();
        spec.set("kind", self.kind.name());
        spec.set("epoch", self.epoch);
        spec.set("rng.seed", self.rng.seed.iter().map(|b| format!("{b:02x}")).collect::<String>());
        spec.set("rng.stream", self.rng.stream);
        spec.set("rng.word_pos", self.rng.word_pos);
        spec_to_kv(self.decoder.spec(), "decoder", &mut spec);
        if let Some(enc) = &self.encoder {
            spec_to_kv(enc.spec(), "encoder", &mut spec);
        }
        spec.set("optimizers", self.optimizers.len());
        for (i, opt) in self.optimizers.iter().enumerate() {
            spec.set(&format!("adam.{i}.step"), opt.step);
            spec.set_f64(&format!("adam.{i}.lr"), opt.config.learning_rate);
            spec.set_f64(&format!("adam.{i}.beta1"), opt.config.beta1);
            spec.set_f64(&format!("adam.{i}.beta2"), opt.config.beta2);
            spec.set_f64(&format!("adam.{i}.eps"), opt.config.epsilon);
        }

        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        push_text(&mut out, &spec);
        push_text(&mut out, &self.config);
        let mut arrays: Vec<&[f64]> = vec![self.decoder.params()];
        if let Some(enc) = &self.encoder {
            arrays.push(enc.params());
        }
        for opt in &self.optimizers {
            arrays.push(&opt.first_moment);
            arrays.push(&opt.second_moment);
        }
        out.extend((arrays.len() as u32).to_le_bytes());
        for a in arrays {
            push_array(&mut out, a);
        }
        let crc = crc32fast::hash(&out);
        out.extend(crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        // Walk the length prefixes first so a short file reports truncation
        // rather than a checksum mismatch.
        for _ in 0..2 {
            let n = r.len()?;
            r.take(n)?;
        }
        let count = r.u32()? as usize;
        for _ in 0..count {
            let n = r.len()?;
            r.take(n.checked_mul(8).ok_or_else(|| malformed("array too large"))?)?;
        }
        let body_len = r.pos;
        let stored = r.u32()?;
        let computed = crc32fast::hash(&bytes[..body_len]);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        if r.pos != bytes.len() {
            return Err(malformed("trailing bytes after checksum"));
        }
        let body = &bytes[..body_len];
        let mut r = Reader { bytes: body, pos: 12 };
        let spec = r.text()?;
        let config = r.text()?;
        let count = r.u32()? as usize;
        let mut arrays = (0..count).map(|_| r.array()).collect::<Result<Vec<_>, _>>()?;
        arrays.reverse();
        let mut next = || arrays.pop().ok_or_else(|| malformed("missing parameter array"));

        let kind = ModelKind::parse(spec.get_str("kind")?)?;
        let decoder = Network::from_params(spec_from_kv(&spec, "decoder")?, next()?)?;
        let encoder = if spec.contains("encoder.widths") {
            Some(Network::from_params(spec_from_kv(&spec, "encoder")?, next()?)?)
        } else {
            None
        };
        let n_opt: usize = spec.get("optimizers")?;
        let mut optimizers = Vec::with_capacity(n_opt);
        for i in 0..n_opt {
            let first_moment = next()?;
            let second_moment = next()?;
            optimizers.push(AdamState {
                config: AdamConfig {
                    learning_rate: spec.get(&format!("adam.{i}.lr"))?,
                    beta1: spec.get(&format!("adam.{i}.beta1"))?,
                    beta2: spec.get(&format!("adam.{i}.beta2"))?,
                    epsilon: spec.get(&format!("adam.{i}.eps"))?,
                },
                first_moment,
                second_moment,
                step: spec.get(&format!("adam.{i}.step"))?,
            });
        }
        if !arrays.is_empty() {
            return Err(malformed("unexpected extra arrays"));
        }
        let seed_hex = spec.get_str("rng.seed")?;
        if seed_hex.len() != 64 {
            return Err(malformed("rng seed must be 32 hex bytes"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16)
                .map_err(|_| malformed("rng seed is not hex"))?;
        }
        Ok(Self {
            kind,
            decoder,
            encoder,
            optimizers,
            config,
            epoch: spec.get("epoch")?,
            rng: RngState {
                seed,
                stream: spec.get("rng.stream")?,
                word_pos: spec.get("rng.word_pos")?,
            },
        })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io)?;
    file.write_all(&checkpoint.to_bytes()).map_err(io)?;
    file.sync_all().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}
