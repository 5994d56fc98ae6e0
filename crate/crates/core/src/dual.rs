//! Forward-mode directional derivatives.
//!
//! A [`DualBatch`] carries a primal tensor together with its tangent; every
//! operation propagates both, so evaluating a function on `(x, d)` yields
//! `(f(x), J_f(x) d)` in one pass.

use crate::error::{Error, Result};
use crate::tape::{silu, silu_grad};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DualBatch {
    primal: Tensor,
    tangent: Tensor,
}

impl DualBatch {
    pub fn new(primal: Tensor, tangent: Tensor) -> Result<Self> {
        if primal.shape() != tangent.shape() {
            return Err(Error::dim(format!(
                "dual: primal {:?} vs tangent {:?}",
                primal.shape(),
                tangent.shape()
            )));
        }
        Ok(Self { primal, tangent })
    }

    /// A value with zero tangent.
    pub fn constant(primal: Tensor) -> Self {
        let tangent =
            Tensor::new(primal.shape().to_vec(), vec![0.0; primal.len()]).expect("same shape");
        Self { primal, tangent }
    }

    pub fn primal(&self) -> &Tensor {
        &self.primal
    }

    pub fn tangent(&self) -> &Tensor {
        &self.tangent
    }

    pub fn into_parts(self) -> (Tensor, Tensor) {
        (self.primal, self.tangent)
    }

    pub fn add(&self, other: &DualBatch) -> Result<DualBatch> {
        Ok(Self {
            primal: self.primal.add(&other.primal)?,
            tangent: self.tangent.add(&other.tangent)?,
        })
    }

    pub fn sub(&self, other: &DualBatch) -> Result<DualBatch> {
        Ok(Self {
            primal: self.primal.sub(&other.primal)?,
            tangent: self.tangent.sub(&other.tangent)?,
        })
    }

    pub fn mul(&self, other: &DualBatch) -> Result<DualBatch> {
        let tangent = self
            .tangent
            .mul(&other.primal)?
            .add(&self.primal.mul(&other.tangent)?)?;
        Ok(Self {
            primal: self.primal.mul(&other.primal)?,
            tangent,
        })
    }

    pub fn matmul(&self, other: &DualBatch) -> Result<DualBatch> {
        let tangent = self
            .tangent
            .matmul(&other.primal)?
            .add(&self.primal.matmul(&other.tangent)?)?;
        Ok(Self {
            primal: self.primal.matmul(&other.primal)?,
            tangent,
        })
    }

    /// Right-multiplication by a constant matrix.
    pub fn matmul_const(&self, w: &Tensor) -> Result<DualBatch> {
        Ok(Self {
            primal: self.primal.matmul(w)?,
            tangent: self.tangent.matmul(w)?,
        })
    }

    /// Adds a constant `[1, cols]` bias to every row.
    pub fn add_row_const(&self, bias: &Tensor) -> Result<DualBatch> {
        Ok(Self {
            primal: self.primal.add_row(bias)?,
            tangent: self.tangent.clone(),
        })
    }

    pub fn tanh(&self) -> DualBatch {
        let primal = self.primal.map(f64::tanh);
        let tangent = self
            .tangent
            .zip_map(&primal, |d, y| d * (1.0 - y * y))
            .expect("same shape");
        Self { primal, tangent }
    }

    pub fn silu(&self) -> DualBatch {
        let tangent = self
            .tangent
            .zip_map(&self.primal, |d, x| d * silu_grad(x))
            .expect("same shape");
        Self {
            primal: self.primal.map(silu),
            tangent,
        }
    }

    pub fn scale(&self, k: f64) -> DualBatch {
        Self {
            primal: self.primal.scale(k),
            tangent: self.tangent.scale(k),
        }
    }

    pub fn sum(&self) -> DualBatch {
        Self {
            primal: Tensor::scalar(self.primal.sum()),
            tangent: Tensor::scalar(self.tangent.sum()),
        }
    }

    pub fn squared_norm(&self) -> DualBatch {
        Self {
            primal: Tensor::scalar(self.primal.squared_norm()),
            tangent: Tensor::scalar(2.0 * self.primal.dot(&self.tangent).expect("same shape")),
        }
    }

    pub fn concat(parts: &[&DualBatch]) -> Result<DualBatch> {
        let p: Vec<&Tensor> = parts.iter().map(|d| &d.primal).collect();
        let t: Vec<&Tensor> = parts.iter().map(|d| &d.tangent).collect();
        Ok(Self {
            primal: Tensor::concat_cols(&p)?,
            tangent: Tensor::concat_cols(&t)?,
        })
    }

    pub fn slice(&self, start: usize, end: usize) -> Result<DualBatch> {
        Ok(Self {
            primal: self.primal.slice_cols(start, end)?,
            tangent: self.tangent.slice_cols(start, end)?,
        })
    }
}

/// `(d f / d point) * direction`, computed by one forward-mode pass.
pub fn jvp<F>(f: F, point: &Tensor, direction: &Tensor) -> Result<Tensor>
where
    F: FnOnce(&DualBatch) -> Result<DualBatch>,
{
    let input = DualBatch::new(point.clone(), direction.clone())?;
    Ok(f(&input)?.tangent)
}
