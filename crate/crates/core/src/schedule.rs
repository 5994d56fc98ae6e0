//! Interpolant schedules `z_t = alpha(t) z_0 + sigma(t) eps`.

use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `alpha = 1 - t`, `sigma = t`.
    #[default]
    Linear,
    /// `alpha = cos(pi t / 2)`, `sigma = sin(pi t / 2)`. Its single-atom
    /// probability-flow paths are curved, unlike the linear schedule's.
    Trigonometric,
}

impl Schedule {
    pub fn alpha(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => 1.0 - t,
            Schedule::Trigonometric => (FRAC_PI_2 * t).cos(),
        }
    }

    pub fn sigma(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => t,
            Schedule::Trigonometric => (FRAC_PI_2 * t).sin(),
        }
    }

    pub fn alpha_dot(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => -1.0,
            Schedule::Trigonometric => -FRAC_PI_2 * (FRAC_PI_2 * t).sin(),
        }
    }

    pub fn sigma_dot(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => 1.0,
            Schedule::Trigonometric => FRAC_PI_2 * (FRAC_PI_2 * t).cos(),
        }
    }
}

pub(crate) fn check_unit(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain {
            t,
            domain: "[0, 1]",
        })
    }
}

/// `z_t = alpha_t z0 + sigma_t eps`.
pub fn noise(z0: &[f64], eps: &[f64], t: f64, schedule: Schedule) -> Result<Vec<f64>> {
    check_unit(t)?;
    if z0.len() != eps.len() {
        return Err(Error::dim(format!("noise: {} vs {}", z0.len(), eps.len())));
    }
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    Ok(z0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

/// Conditional (one-point) velocity `alpha'_t z0 + sigma'_t eps`.
pub fn one_point_velocity(z0: &[f64], eps: &[f64], t: f64, schedule: Schedule) -> Result<Vec<f64>> {
    if z0.len() != eps.len() {
        return Err(Error::dim(format!(
            "one_point_velocity: {} vs {}",
            z0.len(),
            eps.len()
        )));
    }
    let (da, ds) = (schedule.alpha_dot(t), schedule.sigma_dot(t));
    Ok(z0.iter().zip(eps).map(|(x, e)| da * x + ds * e).collect())
}
