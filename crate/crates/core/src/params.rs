//! Named, ordered parameter collections and their binding onto a [`Graph`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, LabResult};
use crate::tensor::{Tensor, TensorResult};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor on the graph; `trainable(i)` decides which ones
    /// receive gradients.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(usize) -> bool) -> TensorResult<Vec<Var>> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| g.leaf(t.clone(), trainable(i)))
            .collect()
    }

    /// Gradients for bound parameters, zero-filled where none arrived.
    pub fn grads(&self, g: &Graph, vars: &[Var]) -> Vec<Tensor> {
        vars.iter().map(|&v| g.grad_tensor(v)).collect()
    }

    /// All parameters concatenated in store order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> LabResult<()> {
        if flat.len() != self.numel() {
            return invalid(format!(
                "flat vector has {} entries, store holds {}",
                flat.len(),
                self.numel()
            ));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Offsets of each tensor inside [`ParamStore::flatten`].
    pub fn offsets(&self) -> Vec<(usize, usize)> {
        let mut offset = 0;
        self.tensors
            .iter()
            .map(|t| {
                let s = (offset, t.numel());
                offset += t.numel();
                s
            })
            .collect()
    }
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for x in t.data_mut() {
        *x = rng.gen_range(-bound..bound);
    }
    t
}
