//! Sampling cost: decoder plus `nfe` backbone passes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSpec {
    pub decoder_gflops: f64,
    pub backbone_gflops: f64,
    pub nfe: u32,
}

impl BudgetSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.decoder_gflops) || !ok(self.backbone_gflops) {
            return Err(Error::Config(
                "GFLOPS must be finite and nonnegative".into(),
            ));
        }
        if self.nfe == 0 {
            return Err(Error::Config("nfe must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn budget(spec: &BudgetSpec) -> Result<f64> {
    spec.validate()?;
    Ok(spec.decoder_gflops + f64::from(spec.nfe) * spec.backbone_gflops)
}
