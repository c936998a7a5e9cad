use super::params::ParamStore;
use super::{Encoded, EncoderConfig, ModelError, Pooling, Result};
use crate::rng::Rng;
use crate::tensor::{AttentionMask, Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

/// Rows of token ids stacked into one `[batch * seq]` block. Trailing
/// columns that are padding in every row are dropped, which leaves the
/// outputs at real positions unchanged.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn new(rows: &[&Encoded]) -> Result<Self> {
        if rows.is_empty() {
            return Err(ModelError::Contract("empty batch".into()));
        }
        let width = rows[0].ids.len();
        if rows.iter().any(|r| r.ids.len() != width || r.mask.len() != width) {
            return Err(ModelError::Contract("rows of unequal length".into()));
        }
        let seq = rows
            .iter()
            .map(|r| r.mask.iter().rposition(|m| *m).map_or(0, |p| p + 1))
            .max()
            .unwrap_or(0)
            .max(1);
        let mut ids = Vec::with_capacity(rows.len() * seq);
        let mut mask = Vec::with_capacity(rows.len() * seq);
        for r in rows {
            ids.extend_from_slice(&r.ids[..seq]);
            mask.extend_from_slice(&r.mask[..seq]);
        }
        Ok(Self {
            ids,
            mask,
            batch: rows.len(),
            seq,
        })
    }

    /// Per-position weights that realize `pooling` through
    /// [`Tape::pool_rows`]. A row without any real token is an error.
    pub fn pooling_weights(&self, pooling: Pooling) -> Result<Vec<f64>> {
        let mut w = vec![0.0; self.batch * self.seq];
        for b in 0..self.batch {
            let row = &self.mask[b * self.seq..(b + 1) * self.seq];
            let real = row.iter().filter(|m| **m).count();
            if real == 0 {
                return Err(ModelError::Contract(format!(
                    "batch row {b} is all padding; nothing to pool"
                )));
            }
            match pooling {
                Pooling::LastToken => {
                    let last = row.iter().rposition(|m| *m).expect("counted above");
                    w[b * self.seq + last] = 1.0;
                }
                Pooling::Mean => {
                    for (s, _) in row.iter().enumerate().filter(|(_, m)| **m) {
                        w[b * self.seq + s] = 1.0 / real as f64;
                    }
                }
            }
        }
        Ok(w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub(crate) fn new(store: &mut ParamStore, name: &str, out: usize, inp: usize, rng: &mut Rng) -> Self {
        Self {
            w: store.normal(format!("{name}.weight"), &[out, inp], INIT_STD, rng),
            b: store.constant(format!("{name}.bias"), &[out], 0.0),
        }
    }

    pub(crate) fn apply(&self, tape: &mut Tape<'_>, vars: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul_nt(x, vars[self.w])?;
        Ok(tape.add_row(y, vars[self.b])?)
    }
}

/// Low-rank update `B·A` on a frozen `d × k` projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoraIdx {
    /// `r × k`, uniform in `±1/sqrt(k)`.
    pub a: usize,
    /// `d × r`, zero at init.
    pub b: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: (usize, usize),
    ff1: Linear,
    ff2: Linear,
    ln2: (usize, usize),
    /// Adapters on Q, K, V.
    lora: Option<[LoraIdx; 3]>,
}

/// Post-LN transformer encoder with learned positions and optional LoRA
/// adapters on the attention projections.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    store: ParamStore,
    tok: usize,
    pos: usize,
    layers: Vec<Layer>,
    adapters: Vec<usize>,
}

impl Encoder {
    /// Random init. With `lora_rank > 0` the base is frozen and only the
    /// adapters are trainable.
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut store = ParamStore::default();
        let tok = store.normal("embed.tokens".into(), &[config.vocab_size, d], INIT_STD, rng);
        let pos = store.normal("embed.positions".into(), &[config.max_seq_len, d], INIT_STD, rng);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("layers.{l}");
            let q = Linear::new(&mut store, &format!("{p}.attn.q"), d, d, rng);
            let k = Linear::new(&mut store, &format!("{p}.attn.k"), d, d, rng);
            let v = Linear::new(&mut store, &format!("{p}.attn.v"), d, d, rng);
            let o = Linear::new(&mut store, &format!("{p}.attn.o"), d, d, rng);
            let ln1 = (
                store.constant(format!("{p}.ln1.gain"), &[d], 1.0),
                store.constant(format!("{p}.ln1.bias"), &[d], 0.0),
            );
            let ff1 = Linear::new(&mut store, &format!("{p}.ff.in"), config.d_ff, d, rng);
            let ff2 = Linear::new(&mut store, &format!("{p}.ff.out"), d, config.d_ff, rng);
            let ln2 = (
                store.constant(format!("{p}.ln2.gain"), &[d], 1.0),
                store.constant(format!("{p}.ln2.bias"), &[d], 0.0),
            );
            layers.push(Layer {
                q,
                k,
                v,
                o,
                ln1,
                ff1,
                ff2,
                ln2,
                lora: None,
            });
        }
        let mut enc = Self {
            config,
            store,
            tok,
            pos,
            layers,
            adapters: Vec::new(),
        };
        if enc.config.lora_rank > 0 {
            enc.attach_lora(rng);
        }
        Ok(enc)
    }

    fn attach_lora(&mut self, rng: &mut Rng) {
        let (r, d) = (self.config.lora_rank, self.config.d_model);
        let bound = 1.0 / (d as f64).sqrt();
        for i in 0..self.store.len() {
            self.store.set_trainable(i, false);
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let mut idx = [LoraIdx { a: 0, b: 0 }; 3];
            for (slot, target) in idx.iter_mut().zip(["q", "k", "v"]) {
                let a = self
                    .store
                    .uniform(format!("layers.{l}.attn.{target}.lora_a"), &[r, d], bound, rng);
                let b = self
                    .store
                    .constant(format!("layers.{l}.attn.{target}.lora_b"), &[d, r], 0.0);
                self.adapters.extend([a, b]);
                *slot = LoraIdx { a, b };
            }
            layer.lora = Some(idx);
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Store indices of all adapter matrices.
    pub fn adapter_indices(&self) -> &[usize] {
        &self.adapters
    }

    /// Adapters of layer `l` as (target, indices), targets in Q, K, V order.
    pub fn lora(&self, l: usize) -> Option<[LoraIdx; 3]> {
        self.layers.get(l).and_then(|x| x.lora)
    }

    /// Makes every non-adapter tensor trainable or frozen.
    pub fn set_base_trainable(&mut self, flag: bool) {
        for i in 0..self.store.len() {
            if !self.adapters.contains(&i) {
                self.store.set_trainable(i, flag);
            }
        }
    }

    /// Bytes of all non-adapter tensors, for freeze checks.
    pub fn base_bytes(&self) -> Vec<u8> {
        (0..self.store.len())
            .filter(|i| !self.adapters.contains(i))
            .flat_map(|i| self.store.get(i).to_le_bytes())
            .collect()
    }

    fn project(&self, tape: &mut Tape<'_>, vars: &[Var], x: Var, lin: Linear, lora: Option<LoraIdx>) -> Result<Var> {
        let y = lin.apply(tape, vars, x)?;
        match lora {
            None => Ok(y),
            Some(ad) => {
                let xa = tape.matmul_nt(x, vars[ad.a])?;
                let delta = tape.matmul_nt(xa, vars[ad.b])?;
                Ok(tape.add(y, delta)?)
            }
        }
    }

    /// Hidden states `[batch * seq, d_model]` for `batch`, with the store
    /// bound as `vars`.
    pub fn forward(&self, tape: &mut Tape<'_>, vars: &[Var], batch: &TokenBatch) -> Result<Var> {
        let c = &self.config;
        if batch.seq > c.max_seq_len {
            return Err(ModelError::Contract(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.seq, c.max_seq_len
            )));
        }
        let tokens = tape.embedding(vars[self.tok], &batch.ids)?;
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq).collect();
        let pos = tape.embedding(vars[self.pos], &positions)?;
        let mut x = tape.add(tokens, pos)?;
        let mask = AttentionMask {
            key_mask: batch.mask.clone(),
            causal: c.causal,
        };
        for layer in &self.layers {
            let lora = |i: usize| layer.lora.map(|l| l[i]);
            let q = self.project(tape, vars, x, layer.q, lora(0))?;
            let k = self.project(tape, vars, x, layer.k, lora(1))?;
            let v = self.project(tape, vars, x, layer.v, lora(2))?;
            let att = tape.attention(q, k, v, c.heads, batch.seq, &mask)?;
            let att = layer.o.apply(tape, vars, att)?;
            let res = tape.add(x, att)?;
            x = tape.layer_norm(res, vars[layer.ln1.0], vars[layer.ln1.1], LN_EPS)?;
            let h = layer.ff1.apply(tape, vars, x)?;
            let h = tape.gelu(h)?;
            let h = layer.ff2.apply(tape, vars, h)?;
            let res = tape.add(x, h)?;
            x = tape.layer_norm(res, vars[layer.ln2.0], vars[layer.ln2.1], LN_EPS)?;
        }
        Ok(x)
    }

    /// Inference-only hidden states as a `[batch, seq, d_model]` tensor.
    pub fn hidden(&self, batch: &TokenBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        let h = self.forward(&mut tape, &vars, batch)?;
        Ok(tape
            .value(h)
            .clone()
            .reshape(&[batch.batch, batch.seq, self.config.d_model])?)
    }
}
