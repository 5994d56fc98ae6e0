//! Experiment configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NetConfig;
use crate::rae::DecoderConfig;
use crate::schedule::Schedule;
use crate::solver::Method;
use crate::training::{Stage, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Dataset JSON in data space.
    pub path: PathBuf,
    /// Optional held-out set used as the reference for sample metrics.
    #[serde(default)]
    pub heldout_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub latent_dim: usize,
    #[serde(default)]
    pub nonlinear: bool,
    /// Defaults to the experiment seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub hidden: usize,
    pub depth: usize,
    pub num_frequencies: usize,
    pub max_frequency: f64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let d = NetConfig::new(1, 1);
        Self {
            hidden: d.hidden,
            depth: d.depth,
            num_frequencies: d.num_frequencies,
            max_frequency: d.max_frequency,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub num_samples: usize,
    /// Flow-map step counts evaluated after training.
    pub nfe: Vec<usize>,
    /// Solver steps for the teacher baseline.
    pub teacher_steps: usize,
    pub teacher_method: Method,
    pub two_step_midpoint: f64,
    /// Sample from the EMA weights rather than the online weights.
    pub use_ema: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            num_samples: 1024,
            nfe: vec![1, 2],
            teacher_steps: 16,
            teacher_method: Method::Euler,
            two_step_midpoint: 0.5,
            use_ema: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub schedule: Schedule,
    /// Log real elapsed time; off by default so logs are reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
    /// Allow MFD from weights without a CMT ancestor.
    #[serde(default)]
    pub allow_without_cmt: bool,
    pub data: DataSection,
    pub encoder: EncoderSection,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub decoder: Option<DecoderConfig>,
    #[serde(default)]
    pub pretrain: Option<toml::Table>,
    #[serde(default)]
    pub cmt: Option<toml::Table>,
    #[serde(default)]
    pub mfd: Option<toml::Table>,
    #[serde(default)]
    pub mft: Option<toml::Table>,
    #[serde(default)]
    pub sampler: SamplerSection,
}

impl ExperimentConfig {
    /// Parses a config; relative paths are resolved against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        resolve(&mut cfg.output_dir);
        resolve(&mut cfg.data.path);
        if let Some(h) = cfg.data.heldout_path.as_mut() {
            resolve(h);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The section for `stage` merged onto its defaults, or `None` when the
    /// section is absent.
    pub fn stage(&self, stage: Stage) -> Result<Option<TrainConfig>> {
        let table = match stage {
            Stage::Pretrain => &self.pretrain,
            Stage::Cmt => &self.cmt,
            Stage::Mfd => &self.mfd,
            Stage::Mft => &self.mft,
        };
        table
            .as_ref()
            .map(|t| TrainConfig::from_overrides(stage, t))
            .transpose()
    }

    pub fn encoder_seed(&self) -> u64 {
        self.encoder.seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        for p in std::iter::once(&self.data.path).chain(&self.data.heldout_path) {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        for stage in Stage::ALL {
            self.stage(stage)?;
        }
        let s = &self.sampler;
        if s.nfe.contains(&0) || s.teacher_steps == 0 {
            return Err(Error::Config("sampler step counts must be positive".into()));
        }
        if !(s.two_step_midpoint > 0.0 && s.two_step_midpoint < 1.0) {
            return Err(Error::Config("two_step_midpoint must lie in (0, 1)".into()));
        }
        let n = &self.network;
        if n.hidden == 0 || n.depth < 2 || n.num_frequencies == 0 || n.max_frequency <= 0.0 {
            return Err(Error::Config(
                "network needs hidden > 0, depth >= 2 and a nonempty time embedding".into(),
            ));
        }
        Ok(())
    }
}
