//! Convergence of the finite-difference transport derivative.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::LabRng;
use crate::tensor::Tensor;
use crate::training::{transport_derivative_fd, transport_derivative_jvp, TransportMap};

pub const DEFAULT_LADDER: [f64; 4] = [0.02, 0.01, 0.005, 0.0025];

/// A batch of points `(z, t, s)` with a direction `w` each.
#[derive(Clone, Debug, PartialEq)]
pub struct FdProbes {
    pub z: Tensor,
    pub w: Tensor,
    pub t: Vec<f64>,
    pub s: Vec<f64>,
    pub classes: Vec<usize>,
}

impl FdProbes {
    /// Gaussian `z` and `w`, `t ~ U[t_lo, t_hi]`, `s ~ U[0, t]`.
    pub fn random(
        n: usize,
        dim: usize,
        num_classes: usize,
        (t_lo, t_hi): (f64, f64),
        rng: &mut LabRng,
    ) -> Self {
        let t: Vec<f64> = (0..n).map(|_| rng.uniform(t_lo, t_hi)).collect();
        let s = t.iter().map(|&u| rng.uniform(0.0, u)).collect();
        Self {
            z: rng.normal_tensor(n, dim),
            w: rng.normal_tensor(n, dim),
            t,
            s,
            classes: (0..n).map(|_| rng.index(num_classes.max(1))).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdRow {
    pub dt: f64,
    /// Largest per-probe `||fd - jvp|| / ||jvp||`.
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    /// Slope against the previous rung.
    pub local_order: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdStudy {
    pub rows: Vec<FdRow>,
    /// Least-squares slope of `log max_rel_err` on `log dt`.
    pub fitted_order: f64,
}

pub fn fd_order_study(
    map: &dyn TransportMap,
    probes: &FdProbes,
    ladder: &[f64],
) -> Result<FdStudy> {
    if ladder.len() < 3 {
        return Err(Error::Config(
            "the step ladder needs at least 3 rungs".into(),
        ));
    }
    if ladder.windows(2).any(|w| w[1] >= w[0]) || ladder.iter().any(|&h| h <= 0.0) {
        return Err(Error::Config(
            "the step ladder must be positive and strictly decreasing".into(),
        ));
    }
    let p = probes;
    let exact = transport_derivative_jvp(map, &p.z, &p.t, &p.s, &p.classes, &p.w)?;
    let mut rows: Vec<FdRow> = Vec::with_capacity(ladder.len());
    for &dt in ladder {
        let fd = transport_derivative_fd(map, &p.z, &p.t, &p.s, &p.classes, &p.w, dt)?;
        let errs: Vec<f64> = (0..exact.rows())
            .map(|i| {
                let (a, b) = (fd.row_slice(i), exact.row_slice(i));
                let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
                let den: f64 = b.iter().map(|y| y * y).sum();
                (num / den.max(f64::MIN_POSITIVE)).sqrt()
            })
            .collect();
        let max_rel_err = errs.iter().copied().fold(0.0, f64::max);
        let mean_rel_err = errs.iter().sum::<f64>() / errs.len().max(1) as f64;
        let local_order = rows
            .last()
            .map(|prev| (prev.max_rel_err / max_rel_err).ln() / (prev.dt / dt).ln());
        rows.push(FdRow {
            dt,
            max_rel_err,
            mean_rel_err,
            local_order,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.dt.ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.max_rel_err.ln()).collect();
    Ok(FdStudy {
        fitted_order: slope(&xs, &ys),
        rows,
    })
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

impl FdStudy {
    /// Columns `dt,max_rel_err,mean_rel_err,local_order,fitted_order`; the
    /// first rung has no local order.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "dt",
            "max_rel_err",
            "mean_rel_err",
            "local_order",
            "fitted_order",
        ])?;
        for r in &self.rows {
            w.write_record([
                format!("{:?}", r.dt),
                format!("{:?}", r.max_rel_err),
                format!("{:?}", r.mean_rel_err),
                r.local_order.map(|o| format!("{o:?}")).unwrap_or_default(),
                format!("{:?}", self.fitted_order),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
