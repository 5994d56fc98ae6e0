//! Exact marginal quantities for finite-support data.
//!
//! With data supported on finitely many atoms the posterior over atoms given
//! `z_t` is a softmax, so the marginal velocity `E[alpha' z0 + sigma' eps | z_t]`
//! is available in closed form and the mean flow reduces to integrating that
//! field with a high-order solver.

use crate::dataset::FiniteSupportDataset;
use crate::error::{Error, Result};
use crate::schedule::Schedule;

/// Posterior over atoms at a query `(z_t, t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorTable {
    pub z: Vec<f64>,
    pub t: f64,
    /// Index into the dataset of every atom carried by the table.
    pub atoms: Vec<usize>,
    pub probs: Vec<f64>,
    /// Implied noise `(z_t - alpha_t x_k) / sigma_t` per atom.
    pub eps: Vec<Vec<f64>>,
}

impl PosteriorTable {
    /// One-point velocity implied by atom `j` of the table.
    pub fn one_point(
        &self,
        dataset: &FiniteSupportDataset,
        schedule: Schedule,
        j: usize,
    ) -> Vec<f64> {
        let (da, ds) = (schedule.alpha_dot(self.t), schedule.sigma_dot(self.t));
        dataset.atoms[self.atoms[j]]
            .iter()
            .zip(&self.eps[j])
            .map(|(x, e)| da * x + ds * e)
            .collect()
    }
}

/// The exact marginal field of a dataset, optionally conditioned on a class.
#[derive(Clone, Copy, Debug)]
pub struct Oracle<'a> {
    pub dataset: &'a FiniteSupportDataset,
    pub schedule: Schedule,
    pub class: Option<usize>,
}

impl<'a> Oracle<'a> {
    pub fn new(dataset: &'a FiniteSupportDataset, schedule: Schedule) -> Self {
        Self {
            dataset,
            schedule,
            class: None,
        }
    }

    pub fn conditional(
        dataset: &'a FiniteSupportDataset,
        schedule: Schedule,
        class: Option<usize>,
    ) -> Self {
        Self {
            dataset,
            schedule,
            class,
        }
    }

    fn members(&self) -> Vec<usize> {
        (0..self.dataset.len())
            .filter(|&k| self.class.is_none_or(|c| self.dataset.labels[k] == c))
            .collect()
    }

    pub fn posterior(&self, z: &[f64], t: f64) -> Result<PosteriorTable> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain {
                t,
                domain: "(0, 1]",
            });
        }
        if z.len() != self.dataset.dim {
            return Err(Error::dim(format!(
                "posterior query has dimension {}, dataset {}",
                z.len(),
                self.dataset.dim
            )));
        }
        let (a, s) = (self.schedule.alpha(t), self.schedule.sigma(t));
        if s <= 0.0 {
            return Err(Error::DegeneratePosterior { t });
        }
        let atoms = self.members();
        if atoms.is_empty() {
            return Err(Error::Config(format!(
                "class {:?} has no atoms",
                self.class
            )));
        }
        let mut eps = Vec::with_capacity(atoms.len());
        let mut logits = Vec::with_capacity(atoms.len());
        for &k in &atoms {
            let e: Vec<f64> = z
                .iter()
                .zip(&self.dataset.atoms[k])
                .map(|(zi, xi)| (zi - a * xi) / s)
                .collect();
            let sq: f64 = e.iter().map(|v| v * v).sum();
            // ||z - a x||^2 / (2 s^2) == ||eps||^2 / 2
            logits.push(self.dataset.weights[k].ln() - 0.5 * sq);
            eps.push(e);
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = unnorm.iter().sum();
        let probs = unnorm.iter().map(|u| u / total).collect();
        Ok(PosteriorTable {
            z: z.to_vec(),
            t,
            atoms,
            probs,
            eps,
        })
    }

    /// `sum_k p(k | z_t) (alpha'_t x_k + sigma'_t eps_k)`.
    pub fn velocity(&self, z: &[f64], t: f64) -> Result<Vec<f64>> {
        let post = self.posterior(z, t)?;
        let mut v = vec![0.0; z.len()];
        for j in 0..post.atoms.len() {
            let u = post.one_point(self.dataset, self.schedule, j);
            for (vi, ui) in v.iter_mut().zip(&u) {
                *vi += post.probs[j] * ui;
            }
        }
        Ok(v)
    }

    /// Integrates the oracle field from `t` down to `s` with classical RK4
    /// on `steps` uniform substeps and returns the endpoint.
    pub fn transport(&self, z: &[f64], t: f64, s: f64, steps: usize) -> Result<Vec<f64>> {
        if t <= s {
            return Err(Error::Ordering(format!("need t > s, got t = {t}, s = {s}")));
        }
        if steps == 0 {
            return Err(Error::Config("RK4 needs at least one step".into()));
        }
        let h = (s - t) / steps as f64;
        let mut y = z.to_vec();
        for i in 0..steps {
            let u = t + h * i as f64;
            let u_next = if i + 1 == steps {
                s
            } else {
                t + h * (i + 1) as f64
            };
            let hh = u_next - u;
            let k1 = self.velocity(&y, u)?;
            let k2 = self.velocity(&axpy(&y, 0.5 * hh, &k1), u + 0.5 * hh)?;
            let k3 = self.velocity(&axpy(&y, 0.5 * hh, &k2), u + 0.5 * hh)?;
            let k4 = self.velocity(&axpy(&y, hh, &k3), u_next)?;
            for d in 0..y.len() {
                y[d] += hh / 6.0 * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d]);
            }
        }
        Ok(y)
    }

    /// Oracle average velocity `(z_t - z_s) / (t - s)` along the exact flow.
    pub fn meanflow(&self, z: &[f64], t: f64, s: f64, steps: usize) -> Result<Vec<f64>> {
        let end = self.transport(z, t, s, steps)?;
        Ok(z.iter().zip(&end).map(|(a, b)| (a - b) / (t - s)).collect())
    }
}

pub(crate) fn axpy(y: &[f64], k: f64, x: &[f64]) -> Vec<f64> {
    y.iter().zip(x).map(|(a, b)| a + k * b).collect()
}

pub fn posterior(
    z: &[f64],
    t: f64,
    dataset: &FiniteSupportDataset,
    schedule: Schedule,
) -> Result<PosteriorTable> {
    Oracle::new(dataset, schedule).posterior(z, t)
}

pub fn oracle_velocity(
    z: &[f64],
    t: f64,
    dataset: &FiniteSupportDataset,
    schedule: Schedule,
) -> Result<Vec<f64>> {
    Oracle::new(dataset, schedule).velocity(z, t)
}

pub fn oracle_meanflow(
    z: &[f64],
    t: f64,
    s: f64,
    dataset: &FiniteSupportDataset,
    schedule: Schedule,
    steps: usize,
) -> Result<Vec<f64>> {
    Oracle::new(dataset, schedule).meanflow(z, t, s, steps)
}

/// Default RK4 substep count for oracle mean flows.
pub const ORACLE_RK4_STEPS: usize = 256;
