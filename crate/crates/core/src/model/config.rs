use std::fmt;
use std::str::FromStr;

use super::{ModelError, Result};
use crate::ehr::NUM_PHENOTYPES;
use crate::kv::KvMap;

/// How the head turns `[seq, d]` hidden states into one vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Pooling {
    /// Hidden state at the last unmasked position.
    #[default]
    LastToken,
    /// Mask-weighted mean over positions.
    Mean,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::LastToken => "last-token",
            Pooling::Mean => "mean",
        })
    }
}

impl FromStr for Pooling {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "last-token" | "last" => Ok(Pooling::LastToken),
            "mean" => Ok(Pooling::Mean),
            other => Err(format!("unknown pooling `{other}` (last-token|mean)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub num_labels: usize,
    pub causal: bool,
    /// LoRA rank on Q, K and V of every layer. Zero means no adapters and
    /// a fully trainable encoder.
    pub lora_rank: usize,
    pub pooling: Pooling,
}

impl EncoderConfig {
    pub fn teacher(vocab_size: usize) -> Self {
        Self {
            layers: 4,
            heads: 4,
            d_model: 128,
            d_ff: 512,
            max_seq_len: 128,
            vocab_size,
            num_labels: NUM_PHENOTYPES,
            causal: false,
            lora_rank: 4,
            pooling: Pooling::LastToken,
        }
    }

    pub fn student(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            heads: 2,
            d_model: 64,
            d_ff: 256,
            lora_rank: 0,
            ..Self::teacher(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
            ("num_labels", self.num_labels),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.lora_rank >= self.d_model {
            return Err(ModelError::Config(format!(
                "LoRA rank {} must be below min(d, k) = {}",
                self.lora_rank, self.d_model
            )));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::default();
        m.set("layers", self.layers);
        m.set("heads", self.heads);
        m.set("d_model", self.d_model);
        m.set("d_ff", self.d_ff);
        m.set("max_seq_len", self.max_seq_len);
        m.set("vocab_size", self.vocab_size);
        m.set("num_labels", self.num_labels);
        m.set("causal", self.causal);
        m.set("lora_rank", self.lora_rank);
        m.set("pooling", self.pooling);
        m
    }

    /// Overrides fields present in `m` (keys as in [`to_kv`](Self::to_kv)).
    pub fn apply_kv(&mut self, m: &KvMap) -> Result<()> {
        m.apply("layers", &mut self.layers)?;
        m.apply("heads", &mut self.heads)?;
        m.apply("d_model", &mut self.d_model)?;
        m.apply("d_ff", &mut self.d_ff)?;
        m.apply("max_seq_len", &mut self.max_seq_len)?;
        m.apply("vocab_size", &mut self.vocab_size)?;
        m.apply("num_labels", &mut self.num_labels)?;
        m.apply("causal", &mut self.causal)?;
        m.apply("lora_rank", &mut self.lora_rank)?;
        m.apply("pooling", &mut self.pooling)?;
        Ok(())
    }

    pub fn from_kv(m: &KvMap) -> Result<Self> {
        let mut c = Self::teacher(m.require("vocab_size")?);
        c.apply_kv(m)?;
        for key in m.keys() {
            if !c.to_kv().keys().any(|k| k == key) {
                return Err(ModelError::Config(format!("unknown model key `{key}`")));
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Trainable parameters added by adapters on Q, K and V of every layer,
/// with square `d_model × d_model` projections: `layers · 3 · r · (d + k)`.
pub fn lora_trainable_count(config: &EncoderConfig, rank: usize) -> usize {
    config.layers * 3 * rank * (config.d_model + config.d_model)
}
