//! Finite-support datasets: weighted, labelled atoms.
//!
//! Stored as JSON with fields `dim`, `atoms`, `weights`, `labels`.

use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::LabRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiniteSupportDataset {
    pub dim: usize,
    pub atoms: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub labels: Vec<usize>,
}

impl FiniteSupportDataset {
    pub fn new(atoms: Vec<Vec<f64>>, weights: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let dim = atoms.first().map_or(0, Vec::len);
        let ds = Self {
            dim,
            atoms,
            weights,
            labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Equal weights on every atom.
    pub fn uniform(atoms: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        let n = atoms.len().max(1);
        Self::new(atoms, vec![1.0 / n as f64; n], labels)
    }

    pub fn single_atom(x: Vec<f64>) -> Self {
        Self::new(vec![x], vec![1.0], vec![0]).expect("one valid atom")
    }

    /// The `k` centers of a radius-`radius` ring, one class per center.
    pub fn ring(k: usize, radius: f64) -> Self {
        let atoms = (0..k)
            .map(|i| {
                let a = TAU * i as f64 / k as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self::uniform(atoms, (0..k).collect()).expect("ring is valid")
    }

    /// `n` equally weighted draws from a `k`-component Gaussian mixture whose
    /// means sit on a ring; each atom is labelled with its component.
    pub fn ring_mixture(k: usize, radius: f64, std: f64, n: usize, rng: &mut LabRng) -> Self {
        let mut atoms = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let c = rng.index(k);
            let a = TAU * c as f64 / k as f64;
            atoms.push(vec![
                radius * a.cos() + std * rng.normal(),
                radius * a.sin() + std * rng.normal(),
            ]);
            labels.push(c);
        }
        Self::uniform(atoms, labels).expect("mixture draw is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.atoms.is_empty() {
            return Err(Error::Config("dataset needs at least one atom".into()));
        }
        if self.weights.len() != self.atoms.len() || self.labels.len() != self.atoms.len() {
            return Err(Error::Config(format!(
                "dataset has {} atoms, {} weights, {} labels",
                self.atoms.len(),
                self.weights.len(),
                self.labels.len()
            )));
        }
        if let Some(i) = self.atoms.iter().position(|a| a.len() != self.dim) {
            return Err(Error::dim(format!(
                "atom {i} has dimension {}, dataset dim is {}",
                self.atoms[i].len(),
                self.dim
            )));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("weights sum to {total}, not 1")));
        }
        if self.atoms.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("atoms must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn atoms_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.atoms).expect("validated rows")
    }

    /// Applies `f` to every atom, keeping weights and labels.
    pub fn map_atoms(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Self> {
        Self::new(
            self.atoms.iter().map(|a| f(a)).collect(),
            self.weights.clone(),
            self.labels.clone(),
        )
    }

    /// Draws an atom index according to the weights.
    pub fn sample_index(&self, rng: &mut LabRng) -> usize {
        rng.categorical(&self.weights)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ds: Self = serde_json::from_str(s)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}
