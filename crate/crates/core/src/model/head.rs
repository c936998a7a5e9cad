use super::encoder::{Linear, TokenBatch};
use super::params::ParamStore;
use super::{Pooling, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Var};

/// Multi-label adaptive projection head: pool the hidden states, then one
/// affine map to the label space.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlaph {
    pub pooling: Pooling,
    outputs: usize,
    store: ParamStore,
    lin: Linear,
}

impl Mlaph {
    pub fn new(d_model: usize, outputs: usize, pooling: Pooling, rng: &mut Rng) -> Self {
        let mut store = ParamStore::default();
        let lin = Linear::new(&mut store, "head", outputs, d_model, rng);
        Self {
            pooling,
            outputs,
            store,
            lin,
        }
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Label logits `[batch, outputs]` from hidden states `[batch * seq, d]`.
    pub fn forward(&self, tape: &mut Tape<'_>, vars: &[Var], hidden: Var, batch: &TokenBatch) -> Result<Var> {
        let weights = batch.pooling_weights(self.pooling)?;
        let pooled = tape.pool_rows(hidden, batch.seq, weights)?;
        self.project(tape, vars, pooled)
    }

    /// The affine part alone, on already pooled `[batch, d]` rows.
    pub fn project(&self, tape: &mut Tape<'_>, vars: &[Var], pooled: Var) -> Result<Var> {
        self.lin.apply(tape, vars, pooled)
    }
}

/// Per-position projection to vocabulary scores.
#[derive(Clone, Debug, PartialEq)]
pub struct LmHead {
    store: ParamStore,
    lin: Linear,
}

impl LmHead {
    pub fn new(d_model: usize, vocab_size: usize, rng: &mut Rng) -> Self {
        let mut store = ParamStore::default();
        let lin = Linear::new(&mut store, "lm", vocab_size, d_model, rng);
        Self { store, lin }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `[rows, vocab]` logits for `[rows, d]` hidden states.
    pub fn forward(&self, tape: &mut Tape<'_>, vars: &[Var], hidden: Var) -> Result<Var> {
        self.lin.apply(tape, vars, hidden)
    }
}
