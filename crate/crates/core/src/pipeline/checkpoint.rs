//! Self-describing JSON checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{FlowMapNet, NetConfig, VelocityNet};
use crate::params::ParamStore;
use crate::rae::{DecoderConfig, DecoderNet, EncoderSpec};
use crate::rng::RngState;
use crate::schedule::Schedule;
use crate::tensor::Tensor;
use crate::training::{Model, Stage, TrainConfig, TrainState};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn arrays_from_params(p: &ParamStore) -> Vec<NamedArray> {
    p.names()
        .iter()
        .zip(p.tensors())
        .map(|(name, t)| NamedArray {
            name: name.clone(),
            shape: t.shape().to_vec(),
            values: t.data().to_vec(),
        })
        .collect()
}

pub fn params_from_arrays(arrays: &[NamedArray]) -> Result<ParamStore> {
    let mut p = ParamStore::new();
    for a in arrays {
        let t = Tensor::new(a.shape.clone(), a.values.clone())
            .map_err(|e| Error::Checkpoint(format!("array {}: {e}", a.name)))?;
        p.push(a.name.clone(), t);
    }
    Ok(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Velocity,
    FlowMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Stage that produced the weights; `None` for untrained initial weights.
    pub stage: Option<Stage>,
    pub iteration: usize,
    /// All completed stages in this checkpoint's lineage, oldest first.
    pub history: Vec<Stage>,
    pub rng: RngState,
    pub seed: u64,
    pub schedule: Schedule,
    pub encoder: EncoderSpec,
    pub kind: ModelKind,
    pub network: NetConfig,
    pub params: Vec<NamedArray>,
    pub ema: Vec<NamedArray>,
    pub config: Option<TrainConfig>,
    /// Hash of the checkpoint this one was trained from.
    pub parent: Option<String>,
}

fn check_version(found: u32) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format_version {found} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

/// Reads `format_version` before committing to the full schema so that a
/// version mismatch is reported as such.
fn peek_version(text: &str) -> Result<()> {
    #[derive(Deserialize)]
    struct Peek {
        format_version: Option<u32>,
    }
    let p: Peek = serde_json::from_str(text)?;
    match p.format_version {
        Some(v) => check_version(v),
        None => Err(Error::Checkpoint("missing format_version".into())),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        for a in self.params.iter().chain(&self.ema) {
            if a.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("checkpoint parameters"));
            }
        }
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        peek_version(text)?;
        let c: Checkpoint = serde_json::from_str(text)?;
        c.model()?;
        Ok(c)
    }

    /// SHA-256 of the serialized form; this is what children record as
    /// their parent.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_json()?.as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let text = self.to_json()?;
        fs::write(path, &text)?;
        Ok(sha256_hex(text.as_bytes()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn model(&self) -> Result<Model> {
        let p = params_from_arrays(&self.params)?;
        let cfg = self.network.clone();
        Ok(match self.kind {
            ModelKind::Velocity => Model::Velocity(VelocityNet::from_params(cfg, p)?),
            ModelKind::FlowMap => Model::FlowMap(FlowMapNet::from_params(cfg, p)?),
        })
    }

    pub fn state(&self) -> Result<TrainState> {
        let ema = params_from_arrays(&self.ema)?;
        Ok(TrainState {
            model: self.model()?,
            ema,
            iteration: self.iteration,
            history: self.history.clone(),
        })
    }

    pub fn velocity_net(&self, use_ema: bool) -> Result<VelocityNet> {
        match self.evaluation_model(use_ema)? {
            Model::Velocity(n) => Ok(n),
            Model::FlowMap(_) => Err(Error::Checkpoint("expected a velocity checkpoint".into())),
        }
    }

    pub fn flow_map(&self, use_ema: bool) -> Result<FlowMapNet> {
        match self.evaluation_model(use_ema)? {
            Model::FlowMap(n) => Ok(n),
            Model::Velocity(_) => Err(Error::Checkpoint("expected a flow-map checkpoint".into())),
        }
    }

    /// The online weights, or the EMA shadow with `use_ema`.
    pub fn evaluation_model(&self, use_ema: bool) -> Result<Model> {
        if use_ema {
            self.state()?.ema_model()
        } else {
            self.model()
        }
    }
}

/// Describes where a [`TrainState`] came from.
#[derive(Clone, Debug)]
pub struct Provenance {
    pub stage: Option<Stage>,
    pub rng: RngState,
    pub seed: u64,
    pub schedule: Schedule,
    pub encoder: EncoderSpec,
    pub config: Option<TrainConfig>,
    pub parent: Option<String>,
}

pub fn checkpoint_from_state(state: &TrainState, meta: Provenance) -> Checkpoint {
    let kind = match state.model {
        Model::Velocity(_) => ModelKind::Velocity,
        Model::FlowMap(_) => ModelKind::FlowMap,
    };
    Checkpoint {
        format_version: FORMAT_VERSION,
        stage: meta.stage,
        iteration: state.iteration,
        history: state.history.clone(),
        rng: meta.rng,
        seed: meta.seed,
        schedule: meta.schedule,
        encoder: meta.encoder,
        kind,
        network: state.model.config().clone(),
        params: arrays_from_params(state.model.params()),
        ema: arrays_from_params(&state.ema),
        config: meta.config,
        parent: meta.parent,
    }
}

/// A trained decoder with the encoder it inverts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderCheckpoint {
    pub format_version: u32,
    pub encoder: EncoderSpec,
    pub config: DecoderConfig,
    pub output_dim: usize,
    pub params: Vec<NamedArray>,
    pub train_rmse: f64,
    pub heldout_rmse: f64,
    pub converged: bool,
}

impl DecoderCheckpoint {
    pub fn decoder(&self) -> Result<DecoderNet> {
        DecoderNet::from_params(
            self.encoder.latent_dim,
            self.output_dim,
            &self.config,
            params_from_arrays(&self.params)?,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        peek_version(text)?;
        let c: DecoderCheckpoint = serde_json::from_str(text)?;
        c.decoder()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
