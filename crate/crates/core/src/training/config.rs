//! Per-stage training hyperparameters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Cmt,
    Mfd,
    Mft,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Pretrain, Stage::Cmt, Stage::Mfd, Stage::Mft];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Cmt => "cmt",
            Stage::Mfd => "mfd",
            Stage::Mft => "mft",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// How the transport derivative in the MeanFlow target is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeMode {
    Fd,
    Jvp,
}

/// Flow-matching time weighting `w(t)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeWeight {
    Constant,
}

impl TimeWeight {
    pub fn weight(self, _t: f64) -> f64 {
        match self {
            TimeWeight::Constant => 1.0,
        }
    }
}

/// Law for `(t, s)`: `t ~ U[t_min, 1]`, `s ~ U[s_min, t]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeSampling {
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub ema_beta: f64,
    pub t_min: f64,
    pub s_min: f64,
    pub time_sampling: TimeSampling,
    pub equal_time_fraction: f64,
    pub lambda: f64,
    pub derivative: DerivativeMode,
    pub delta_t: f64,
    pub time_weight: TimeWeight,
    /// Gradient norm treated as a spike.
    pub grad_threshold: f64,
    /// Consecutive spikes that abort the stage.
    pub divergence_patience: usize,
    /// Save an intermediate checkpoint every this many iterations; 0 saves
    /// only at the end.
    pub checkpoint_every: usize,
    pub trajectories_per_iter: usize,
    pub pairs_per_trajectory: usize,
    pub grid_points: usize,
}

impl TrainConfig {
    pub fn defaults(stage: Stage) -> Self {
        let base = TrainConfig {
            iterations: 1000,
            batch_size: 128,
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            ema_beta: 0.999,
            t_min: 1e-3,
            s_min: 0.0,
            time_sampling: TimeSampling::Uniform,
            equal_time_fraction: 0.25,
            lambda: 1.0,
            derivative: DerivativeMode::Fd,
            delta_t: 0.005,
            time_weight: TimeWeight::Constant,
            grad_threshold: 1e4,
            divergence_patience: 10,
            checkpoint_every: 0,
            trajectories_per_iter: 8,
            pairs_per_trajectory: 16,
            grid_points: 16,
        };
        match stage {
            Stage::Pretrain => base,
            Stage::Cmt => TrainConfig {
                learning_rate: 1e-4,
                ..base
            },
            Stage::Mfd => TrainConfig {
                learning_rate: 1e-4,
                ema_beta: 0.9999,
                ..base
            },
            Stage::Mft => TrainConfig {
                learning_rate: 1e-4,
                ema_beta: 0.9999,
                lambda: 0.0,
                ..base
            },
        }
    }

    /// Stage defaults with the keys of `table` laid over them. Unknown keys
    /// and ill-typed values are errors.
    pub fn from_overrides(stage: Stage, table: &toml::Table) -> Result<Self> {
        let defaults = toml::Table::try_from(Self::defaults(stage))
            .map_err(|e| Error::Config(format!("serializing defaults: {e}")))?;
        let mut merged = defaults;
        for (k, v) in table {
            merged.insert(k.clone(), v.clone());
        }
        let cfg: TrainConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("[{stage}] {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(1e-4..=0.05).contains(&self.delta_t) {
            return bad(format!("delta_t {} outside [1e-4, 0.05]", self.delta_t));
        }
        if !(0.0..=1.0).contains(&self.equal_time_fraction) {
            return bad(format!(
                "equal_time_fraction {} outside [0, 1]",
                self.equal_time_fraction
            ));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return bad(format!("t_min {} outside (0, 1)", self.t_min));
        }
        if !(0.0..=self.t_min).contains(&self.s_min) {
            return bad(format!("s_min {} outside [0, t_min]", self.s_min));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            ));
        }
        for (name, b) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("ema_beta", self.ema_beta),
        ] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} outside [0, 1)"));
            }
        }
        if self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive".into());
        }
        if self.grad_threshold <= 0.0 || self.divergence_patience == 0 {
            return bad("grad_threshold and divergence_patience must be positive".into());
        }
        if self.grid_points < 2 || self.trajectories_per_iter == 0 || self.pairs_per_trajectory == 0
        {
            return bad("CMT needs grid_points >= 2 and positive trajectory/pair counts".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_defaults_validate() {
        for st in Stage::ALL {
            TrainConfig::defaults(st).validate().unwrap();
        }
        assert_eq!(TrainConfig::defaults(Stage::Mfd).lambda, 1.0);
        assert_eq!(TrainConfig::defaults(Stage::Mft).lambda, 0.0);
        assert_eq!(TrainConfig::defaults(Stage::Mfd).delta_t, 0.005);
    }

    #[test]
    fn overrides_merge_and_unknown_keys_fail() {
        let t: toml::Table = toml::from_str("iterations = 7\nlambda = 0.5").unwrap();
        let cfg = TrainConfig::from_overrides(Stage::Mfd, &t).unwrap();
        assert_eq!(cfg.iterations, 7);
        assert_eq!(cfg.lambda, 0.5);
        let t: toml::Table = toml::from_str("iteratons = 7").unwrap();
        assert!(matches!(
            TrainConfig::from_overrides(Stage::Mfd, &t),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn invariants_are_enforced() {
        for (key, val) in [
            ("lambda", "1.5"),
            ("delta_t", "0.1"),
            ("equal_time_fraction", "-0.1"),
        ] {
            let t: toml::Table = toml::from_str(&format!("{key} = {val}")).unwrap();
            assert!(
                TrainConfig::from_overrides(Stage::Mft, &t).is_err(),
                "{key}"
            );
        }
    }
}
