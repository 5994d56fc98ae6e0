//! Named parameter storage and the evaluation backends shared by all networks.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dual::DualBatch;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
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

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn set_by_name(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("no parameter named {name}")))?;
        if self.tensors[i].shape() != value.shape() {
            return Err(Error::dim(format!(
                "{name}: stored {:?}, incoming {:?}",
                self.tensors[i].shape(),
                value.shape()
            )));
        }
        self.tensors[i] = value;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::squared_norm).sum()
    }

    /// Euclidean distance between two stores with identical layout.
    pub fn distance(&self, other: &ParamStore) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| a.sub(b).expect("same layout").squared_norm())
            .sum::<f64>()
            .sqrt()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            h.update(n.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// An affine layer `x W + b` whose parameters live in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: usize,
    pub bias: Option<usize>,
}

/// Operations a network forward pass needs. Implemented for plain tensors,
/// for the reverse-mode tape and for forward-mode duals, so every network
/// describes its forward pass once.
pub trait Graph {
    type Value: Clone;

    fn linear(
        &mut self,
        params: &ParamStore,
        layer: Linear,
        x: &Self::Value,
    ) -> Result<Self::Value>;
    fn silu(&mut self, x: &Self::Value) -> Self::Value;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
}

/// Direct evaluation without recording.
pub struct Plain;

impl Graph for Plain {
    type Value = Tensor;

    fn linear(&mut self, params: &ParamStore, layer: Linear, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(params.get(layer.weight))?;
        match layer.bias {
            Some(b) => y.add_row(params.get(b)),
            None => Ok(y),
        }
    }

    fn silu(&mut self, x: &Tensor) -> Tensor {
        x.map(crate::tape::silu)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.add(b)
    }
}

/// Records onto a tape; `vars[i]` is the tape leaf holding parameter `i`.
pub struct Taped<'a> {
    pub tape: &'a mut Tape,
    pub vars: &'a [Var],
}

impl Graph for Taped<'_> {
    type Value = Var;

    fn linear(&mut self, _params: &ParamStore, layer: Linear, x: &Var) -> Result<Var> {
        let y = self.tape.matmul(*x, self.vars[layer.weight])?;
        match layer.bias {
            Some(b) => self.tape.add_row(y, self.vars[b]),
            None => Ok(y),
        }
    }

    fn silu(&mut self, x: &Var) -> Var {
        self.tape.silu(*x)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.add(*a, *b)
    }
}

/// Forward-mode evaluation with parameters held constant.
pub struct Forward;

impl Graph for Forward {
    type Value = DualBatch;

    fn linear(&mut self, params: &ParamStore, layer: Linear, x: &DualBatch) -> Result<DualBatch> {
        let y = x.matmul_const(params.get(layer.weight))?;
        match layer.bias {
            Some(b) => y.add_row_const(params.get(b)),
            None => Ok(y),
        }
    }

    fn silu(&mut self, x: &DualBatch) -> DualBatch {
        x.silu()
    }

    fn add(&mut self, a: &DualBatch, b: &DualBatch) -> Result<DualBatch> {
        a.add(b)
    }
}
