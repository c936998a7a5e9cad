use std::io::{Read, Write};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{ModelError, Result};
use crate::rng::Rng;
use crate::tensor::{read_checkpoint, write_checkpoint, Tape, Tensor, Var};

/// Named tensors of one model part, in a fixed order. The order is the
/// optimizer's view; names are the checkpoint's.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub(crate) fn normal(&mut self, name: String, shape: &[usize], std: f64, rng: &mut Rng) -> usize {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.push(
            name,
            Tensor::from_vec(shape, data)
                .expect("extent product")
                .with_requires_grad(true),
        )
    }

    pub(crate) fn uniform(&mut self, name: String, shape: &[usize], bound: f64, rng: &mut Rng) -> usize {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.push(
            name,
            Tensor::from_vec(shape, data)
                .expect("extent product")
                .with_requires_grad(true),
        )
    }

    pub(crate) fn constant(&mut self, name: String, shape: &[usize], value: f64) -> usize {
        self.push(name, Tensor::full(shape, value).with_requires_grad(true))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn set_trainable(&mut self, i: usize, flag: bool) {
        self.tensors[i].set_requires_grad(flag);
    }

    /// Scalar count over all tensors.
    pub fn total_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Scalar count over tensors flagged `requires_grad`.
    pub fn trainable_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.requires_grad()).map(Tensor::len).sum()
    }

    /// Records every tensor on `tape`; the result is indexed like the store.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t)).collect()
    }

    /// Adds the tape's gradients for `vars` (from [`bind`](Self::bind))
    /// into the trainable tensors' gradient slots.
    pub fn accumulate(&mut self, grads: &[Option<Vec<f64>>]) -> Result<()> {
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            if let Some(g) = g {
                if t.requires_grad() {
                    t.accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let pairs: Vec<(&str, &Tensor)> = self.iter().collect();
        write_checkpoint(w, &pairs)?;
        Ok(())
    }

    /// Replaces values from a checkpoint holding exactly these names and
    /// shapes. Trainable flags are kept.
    pub fn load<R: Read>(&mut self, r: R) -> Result<()> {
        let loaded = read_checkpoint(r)?;
        if loaded.len() != self.len() {
            return Err(ModelError::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                loaded.len(),
                self.len()
            )));
        }
        for (name, t) in loaded {
            let i = self
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| ModelError::Checkpoint(format!("unexpected tensor `{name}`")))?;
            if t.shape() != self.tensors[i].shape() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
            let flag = self.tensors[i].requires_grad();
            self.tensors[i] = t.with_requires_grad(flag);
        }
        Ok(())
    }

    /// Little-endian bytes of every tensor, in order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.tensors.iter().flat_map(Tensor::to_le_bytes).collect()
    }
}

/// Gradients of `vars` after `tape.backward`, detached from the tape's borrow.
pub fn take_grads(tape: &Tape<'_>, vars: &[Var]) -> Vec<Option<Vec<f64>>> {
    vars.iter().map(|&v| tape.grad_data(v).map(<[f64]>::to_vec)).collect()
}
