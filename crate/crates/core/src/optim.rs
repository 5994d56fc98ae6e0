//! Adam and the EMA parameter shadow.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|p| Tensor::new(p.shape().to_vec(), vec![0.0; p.len()]).expect("same shape"))
            .collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if g.shape() != p.shape() {
                return Err(Error::dim(format!(
                    "gradient {:?} vs param {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gd[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Exponential moving average of parameters, used only for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaTracker {
    pub beta: f64,
    shadow: ParamStore,
}

impl EmaTracker {
    pub fn new(params: &ParamStore, beta: f64) -> Self {
        Self {
            beta,
            shadow: params.clone(),
        }
    }

    pub fn from_shadow(shadow: ParamStore, beta: f64) -> Self {
        Self { beta, shadow }
    }

    /// `shadow <- beta * shadow + (1 - beta) * params`
    pub fn update(&mut self, params: &ParamStore) {
        for (s, p) in self.shadow.tensors_mut().iter_mut().zip(params.tensors()) {
            for (a, b) in s.data_mut().iter_mut().zip(p.data()) {
                *a = self.beta * *a + (1.0 - self.beta) * b;
            }
        }
    }

    pub fn shadow(&self) -> &ParamStore {
        &self.shadow
    }

    pub fn distance(&self, params: &ParamStore) -> f64 {
        self.shadow.distance(params)
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_matches_geometric_average() {
        let mut p = ParamStore::new();
        p.push("x", Tensor::row(&[1.0, -2.0]));
        let beta = 0.7;
        let mut ema = EmaTracker::new(&p, beta);
        let mut seq = vec![vec![1.0, -2.0]];
        for k in 1..=10 {
            let v = vec![k as f64 * 0.3, (k as f64).sin()];
            p.tensors_mut()[0] = Tensor::row(&v);
            ema.update(&p);
            seq.push(v);
        }
        // shadow_n = beta^n x_0 + sum_k (1 - beta) beta^(n-k) x_k
        let n = seq.len() - 1;
        for d in 0..2 {
            let mut want = beta.powi(n as i32) * seq[0][d];
            for (k, x) in seq.iter().enumerate().skip(1) {
                want += (1.0 - beta) * beta.powi((n - k) as i32) * x[d];
            }
            assert!((ema.shadow().get(0).data()[d] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = ParamStore::new();
        p.push("x", Tensor::row(&[3.0, -4.0]));
        let mut opt = Adam::new(&p, 0.05, 0.9, 0.999, 1e-8);
        for _ in 0..2000 {
            let g = p.get(0).clone();
            opt.step(&mut p, &[g]).unwrap();
        }
        assert!(p.get(0).max_abs() < 1e-3);
    }
}
