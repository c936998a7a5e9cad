//! Word-level tokenizer, post-LN transformer encoder with LoRA adapters on
//! Q/K/V, the multi-label projection head and a vocabulary head.

mod config;
mod encoder;
mod head;
mod params;
mod vocab;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

pub use config::{lora_trainable_count, EncoderConfig, Pooling};
pub use encoder::{Encoder, LoraIdx, TokenBatch, LN_EPS};
pub use head::{LmHead, Mlaph};
pub use params::{take_grads, ParamStore};
pub use vocab::{words, Encoded, Vocabulary, CLS, PAD, UNK};

use crate::kv::{KvError, KvMap};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

pub const CONFIG_FILE: &str = "model.txt";
pub const WEIGHTS_FILE: &str = "model.ckdf";

/// Encoder plus projection head, with an optional vocabulary head.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub encoder: Encoder,
    pub head: Mlaph,
    pub lm: Option<LmHead>,
}

impl Classifier {
    pub fn new(config: EncoderConfig, outputs: usize, with_lm: bool, rng: &mut Rng) -> Result<Self> {
        let pooling = config.pooling;
        let (d, v) = (config.d_model, config.vocab_size);
        let encoder = Encoder::new(config, rng)?;
        let head = Mlaph::new(d, outputs, pooling, rng);
        let lm = with_lm.then(|| LmHead::new(d, v, rng));
        Ok(Self { encoder, head, lm })
    }

    pub fn config(&self) -> &EncoderConfig {
        self.encoder.config()
    }

    /// Label logits `[batch, outputs]`, no gradients.
    pub fn logits(&self, batch: &TokenBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let ev = self.encoder.store().bind(&mut tape);
        let hv = self.head.store().bind(&mut tape);
        let h = self.encoder.forward(&mut tape, &ev, batch)?;
        let y = self.head.forward(&mut tape, &hv, h, batch)?;
        Ok(tape.value(y).clone())
    }

    /// Vocabulary logits `[batch, seq, vocab]`. Needs the vocabulary head.
    pub fn vocab_logits(&self, batch: &TokenBatch) -> Result<Tensor> {
        let lm = self
            .lm
            .as_ref()
            .ok_or_else(|| ModelError::Contract("model has no vocabulary head".into()))?;
        let mut tape = Tape::new();
        let ev = self.encoder.store().bind(&mut tape);
        let lv = lm.store().bind(&mut tape);
        let h = self.encoder.forward(&mut tape, &ev, batch)?;
        let z = lm.forward(&mut tape, &lv, h)?;
        let v = self.config().vocab_size;
        Ok(tape.value(z).clone().reshape(&[batch.batch, batch.seq, v])?)
    }

    /// Vocabulary logits `[batch, vocab]` at each row's last real token.
    pub fn prediction_vocab_logits(&self, batch: &TokenBatch) -> Result<Tensor> {
        let lm = self
            .lm
            .as_ref()
            .ok_or_else(|| ModelError::Contract("model has no vocabulary head".into()))?;
        let mut tape = Tape::new();
        let ev = self.encoder.store().bind(&mut tape);
        let lv = lm.store().bind(&mut tape);
        let h = self.encoder.forward(&mut tape, &ev, batch)?;
        let last = tape.pool_rows(h, batch.seq, batch.pooling_weights(Pooling::LastToken)?)?;
        let z = lm.forward(&mut tape, &lv, last)?;
        Ok(tape.value(z).clone())
    }

    fn stores(&self) -> impl Iterator<Item = &ParamStore> {
        [
            Some(self.encoder.store()),
            Some(self.head.store()),
            self.lm.as_ref().map(LmHead::store),
        ]
        .into_iter()
        .flatten()
    }

    pub fn parameter_count(&self) -> usize {
        self.stores().map(ParamStore::total_count).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.stores().map(ParamStore::trainable_count).sum()
    }

    fn merged(&self) -> ParamStore {
        let mut all = ParamStore::default();
        for s in self.stores() {
            for (n, t) in s.iter() {
                all.push(n, t.clone());
            }
        }
        all
    }

    /// Checkpoint bytes as written by [`save`](Self::save).
    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.merged().write(&mut buf)?;
        Ok(buf)
    }

    pub fn config_text(&self) -> String {
        let mut kv = self.config().to_kv();
        kv.set("head_outputs", self.head.outputs());
        kv.set("lm_head", self.lm.is_some());
        kv.to_string()
    }

    /// Writes `model.txt` and `model.ckdf` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_FILE), self.config_text())?;
        let w = BufWriter::new(File::create(dir.join(WEIGHTS_FILE))?);
        self.merged().write(w)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut kv = KvMap::parse(&std::fs::read_to_string(dir.join(CONFIG_FILE))?)?;
        let outputs: usize = kv.require("head_outputs")?;
        let with_lm: bool = kv.require("lm_head")?;
        kv.remove("head_outputs");
        kv.remove("lm_head");
        let config = EncoderConfig::from_kv(&kv)?;
        // shapes come from the config; values are overwritten below
        let mut rng = crate::rng::seeded(0, 0);
        let mut model = Self::new(config, outputs, with_lm, &mut rng)?;
        let mut all = model.merged();
        all.load(BufReader::new(File::open(dir.join(WEIGHTS_FILE))?))?;
        let mut parts = all.tensors().iter();
        let mut fill = |s: &mut ParamStore| {
            for t in s.tensors_mut() {
                let flag = t.requires_grad();
                *t = parts.next().expect("same layout").clone().with_requires_grad(flag);
            }
        };
        fill(model.encoder.store_mut());
        fill(model.head.store_mut());
        if let Some(lm) = model.lm.as_mut() {
            fill(lm.store_mut());
        }
        Ok(model)
    }
}
