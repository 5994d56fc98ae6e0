//! Bias/variance decomposition of the mean-flow loss at fixed `(z_t, t, s)`.
//!
//! With `A = I - (t - s) grad_z h_target`, `delta_h = h_target - h` and the
//! exact field `v`, the target built from a proxy `w` is affine in `w`:
//!
//! ```text
//! h_tgt(w) = h - B + A (w - v),   B = (t - s) (d_t delta_h + grad_z delta_h v)
//! ```
//!
//! Averaging `||h_theta - h_tgt(w_lambda)||^2` over the exact posterior then
//! splits into `||Y||^2 + (1 - lambda)^2 E||A delta_v_hat||^2` where
//! `Y = h_theta - (h - B + lambda A delta_v_phi)`; the cross term vanishes
//! because the posterior mean of the one-point velocity is `v`.

use serde::{Deserialize, Serialize};

use crate::dataset::FiniteSupportDataset;
use crate::dual::DualBatch;
use crate::error::{Error, Result};
use crate::network::{FlowMapNet, VelocityNet};
use crate::oracle::Oracle;
use crate::rng::LabRng;
use crate::schedule::{noise, Schedule};
use crate::tensor::Tensor;
use crate::training::transport_derivative_jvp;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub z: Vec<f64>,
    pub t: f64,
    pub s: f64,
    pub class: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifySettings {
    /// RK4 substeps for the oracle flow map.
    pub rk4_steps: usize,
    /// Stencil step for derivatives of the oracle flow map.
    pub fd_step: f64,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            rk4_steps: 512,
            fd_step: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaTerms {
    pub lambda: f64,
    pub y: Vec<f64>,
    pub lhs: f64,
    pub bias: f64,
    pub variance: f64,
    pub cross: f64,
    /// `lhs - (bias + variance)`.
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub probe: Probe,
    /// Row-major `d x d`.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub posterior: Vec<f64>,
    /// One row per posterior atom.
    pub delta_v_hat: Vec<Vec<f64>>,
    pub delta_v_phi: Vec<f64>,
    pub terms: Vec<LambdaTerms>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSummary {
    pub lambda: f64,
    pub mean_lhs: f64,
    pub mean_bias: f64,
    pub mean_variance: f64,
    pub max_abs_residual: f64,
    pub max_abs_cross: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub schedule: Schedule,
    pub settings: VerifySettings,
    pub lambdas: Vec<f64>,
    pub probes: Vec<ProbeRecord>,
    pub summary: Vec<LambdaSummary>,
}

impl DecompositionReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Stratified probes: `t` in `{0.1, ..., 0.9}`, `s` in `{t/4, t/2, 3t/4}`,
/// `per_cell` noised atoms per pair.
pub fn stratified_probes(
    dataset: &FiniteSupportDataset,
    schedule: Schedule,
    per_cell: usize,
    seed: u64,
) -> Result<Vec<Probe>> {
    let mut rng = LabRng::named(seed, "prop1-probes");
    let mut out = Vec::new();
    for i in 1..=9 {
        let t = i as f64 / 10.0;
        for frac in [0.25, 0.5, 0.75] {
            for _ in 0..per_cell {
                let k = dataset.sample_index(&mut rng);
                let eps: Vec<f64> = (0..dataset.dim).map(|_| rng.normal()).collect();
                out.push(Probe {
                    z: noise(&dataset.atoms[k], &eps, t, schedule)?,
                    t,
                    s: frac * t,
                    class: dataset.labels[k],
                });
            }
        }
    }
    Ok(out)
}

fn check_probe(p: &Probe, dim: usize, fd_step: f64) -> Result<()> {
    let fd = 2.0 * fd_step;
    if p.z.len() != dim {
        return Err(Error::dim(format!(
            "probe has dimension {}, dataset {dim}",
            p.z.len()
        )));
    }
    if !(p.t > 0.0 && p.t + fd <= 1.0) {
        return Err(Error::Domain {
            t: p.t,
            domain: "(0, 1 - 2 fd_step]",
        });
    }
    if !(p.s >= 0.0 && p.s < p.t - fd) {
        return Err(Error::Ordering(format!(
            "probe needs 0 <= s < t - 2 fd_step, got t = {}, s = {}",
            p.t, p.s
        )));
    }
    Ok(())
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec(m: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    (0..d).map(|i| dot(&m[i * d..(i + 1) * d], x)).collect()
}

fn finite(what: &'static str, xs: &[f64]) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Row-major Jacobian of `net` in `z` via one forward-mode pass per column,
/// plus the partial derivative in `t`.
fn net_derivatives(net: &FlowMapNet, p: &Probe) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = p.z.len();
    let n = d + 1;
    let rows: Vec<Vec<f64>> = vec![p.z.clone(); n];
    let mut tan = Tensor::zeros(n, d);
    for j in 0..d {
        tan.row_slice_mut(j)[j] = 1.0;
    }
    let mut t_tan = vec![0.0; n];
    t_tan[d] = 1.0;
    let zd = DualBatch::new(Tensor::from_rows(&rows)?, tan)?;
    let out = net
        .eval_dual(
            &zd,
            &vec![p.t; n],
            &t_tan,
            &vec![p.s; n],
            &vec![0.0; n],
            &vec![p.class; n],
        )?
        .into_parts()
        .1;
    let mut jac = vec![0.0; d * d];
    for j in 0..d {
        for i in 0..d {
            jac[i * d + j] = out.get(j, i);
        }
    }
    Ok((jac, out.row_slice(d).to_vec()))
}

/// `(-f(2e) + 8 f(e) - 8 f(-e) + f(-2e)) / 12e` for `f(k) = g(k)`.
fn five_point(g: impl Fn(f64) -> Result<Vec<f64>>, eps: f64) -> Result<Vec<f64>> {
    let (p2, p1, m1, m2) = (g(2.0 * eps)?, g(eps)?, g(-eps)?, g(-2.0 * eps)?);
    Ok((0..p1.len())
        .map(|i| (m2[i] - p2[i] + 8.0 * (p1[i] - m1[i])) / (12.0 * eps))
        .collect())
}

/// Same quantities for the oracle flow map by fourth-order central
/// differences.
fn oracle_derivatives(
    oracle: &Oracle,
    p: &Probe,
    settings: VerifySettings,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let d = p.z.len();
    let (eps, steps) = (settings.fd_step, settings.rk4_steps);
    let h = oracle.meanflow(&p.z, p.t, p.s, steps)?;
    let mut jac = vec![0.0; d * d];
    for j in 0..d {
        let col = five_point(
            |k| {
                let mut z = p.z.clone();
                z[j] += k;
                oracle.meanflow(&z, p.t, p.s, steps)
            },
            eps,
        )?;
        for i in 0..d {
            jac[i * d + j] = col[i];
        }
    }
    let dt = five_point(|k| oracle.meanflow(&p.z, p.t + k, p.s, steps), eps)?;
    Ok((h, jac, dt))
}

fn verify_probe(
    online: &FlowMapNet,
    target: &FlowMapNet,
    teacher: &VelocityNet,
    dataset: &FiniteSupportDataset,
    schedule: Schedule,
    lambdas: &[f64],
    p: &Probe,
    settings: VerifySettings,
) -> Result<ProbeRecord> {
    let d = p.z.len();
    let gap = p.t - p.s;
    let oracle = Oracle::conditional(dataset, schedule, Some(p.class));
    let z = Tensor::row(&p.z);

    let h_theta = online.eval(&z, &[p.t], &[p.s], &[p.class])?.into_data();
    let (jac_tgt, dt_tgt) = net_derivatives(target, p)?;
    let (h_orc, jac_orc, dt_orc) = oracle_derivatives(&oracle, p, settings)?;

    let post = oracle.posterior(&p.z, p.t)?;
    let v = oracle.velocity(&p.z, p.t)?;
    let v_hat: Vec<Vec<f64>> = (0..post.atoms.len())
        .map(|j| post.one_point(dataset, schedule, j))
        .collect();
    let v_phi = teacher.eval(&z, &[p.t], &[p.class])?.into_data();
    let delta_v_hat: Vec<Vec<f64>> = v_hat.iter().map(|u| sub(u, &v)).collect();
    let delta_v_phi = sub(&v_phi, &v);

    let mut a: Vec<f64> = jac_tgt.iter().map(|g| -gap * g).collect();
    for i in 0..d {
        a[i * d + i] += 1.0;
    }
    let jac_dh = sub(&jac_tgt, &jac_orc);
    let dt_dh = sub(&dt_tgt, &dt_orc);
    let b: Vec<f64> = matvec(&jac_dh, &v)
        .iter()
        .zip(&dt_dh)
        .map(|(x, y)| gap * (x + y))
        .collect();
    let a_dv_hat: Vec<Vec<f64>> = delta_v_hat.iter().map(|u| matvec(&a, u)).collect();
    let a_dv_phi = matvec(&a, &delta_v_phi);
    let spread: f64 = a_dv_hat
        .iter()
        .zip(&post.probs)
        .map(|(u, pk)| pk * dot(u, u))
        .sum();

    finite("decomposition matrices", &a)?;
    finite("decomposition bias vector", &b)?;
    finite("oracle flow map", &h_orc)?;

    let n = v_hat.len();
    let zs = Tensor::from_rows(&vec![p.z.clone(); n])?;
    let mut terms = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        // Left side: the production target, one row per posterior atom.
        let w_rows: Vec<Vec<f64>> = v_hat
            .iter()
            .map(|u| {
                u.iter()
                    .zip(&v_phi)
                    .map(|(x, y)| (1.0 - lambda) * x + lambda * y)
                    .collect()
            })
            .collect();
        let w = Tensor::from_rows(&w_rows)?;
        let jvp = transport_derivative_jvp(
            target,
            &zs,
            &vec![p.t; n],
            &vec![p.s; n],
            &vec![p.class; n],
            &w,
        )?;
        let tgt = w.sub(&jvp.scale(gap))?;
        let mut lhs = 0.0;
        for (k, pk) in post.probs.iter().enumerate() {
            let r = sub(&h_theta, tgt.row_slice(k));
            lhs += pk * dot(&r, &r);
        }

        // Right side from oracle quantities only.
        let y: Vec<f64> = (0..d)
            .map(|i| h_theta[i] - (h_orc[i] - b[i] + lambda * a_dv_phi[i]))
            .collect();
        let bias = dot(&y, &y);
        let variance = (1.0 - lambda).powi(2) * spread;
        let cross: f64 = a_dv_hat
            .iter()
            .zip(&post.probs)
            .map(|(u, pk)| pk * dot(&y, u))
            .sum();
        finite("decomposition terms", &[lhs, bias, variance, cross])?;
        terms.push(LambdaTerms {
            lambda,
            y,
            lhs,
            bias,
            variance,
            cross,
            residual: lhs - (bias + variance),
        });
    }
    Ok(ProbeRecord {
        probe: p.clone(),
        a,
        b,
        posterior: post.probs,
        delta_v_hat,
        delta_v_phi,
        terms,
    })
}

/// Evaluates both sides of the decomposition on every probe for every
/// `lambda`. The oracle is conditioned on each probe's class.
#[allow(clippy::too_many_arguments)]
pub fn verify_prop1(
    online: &FlowMapNet,
    target: &FlowMapNet,
    teacher: &VelocityNet,
    dataset: &FiniteSupportDataset,
    schedule: Schedule,
    lambdas: &[f64],
    probes: &[Probe],
    settings: VerifySettings,
) -> Result<DecompositionReport> {
    dataset
        .validate()
        .map_err(|e| Error::UnsupportedOracle(format!("no exact posterior: {e}")))?;
    for cfg in [online.config(), target.config(), teacher.config()] {
        if cfg.data_dim != dataset.dim {
            return Err(Error::dim("network and dataset dimensions differ"));
        }
    }
    if online.params().names() != target.params().names() {
        return Err(Error::Contract(
            "online and target maps differ in layout".into(),
        ));
    }
    if let Some(l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::Config(format!("lambda {l} outside [0, 1]")));
    }
    if settings.fd_step <= 0.0 || settings.rk4_steps == 0 {
        return Err(Error::Config(
            "fd_step and rk4_steps must be positive".into(),
        ));
    }
    let mut records = Vec::with_capacity(probes.len());
    for p in probes {
        check_probe(p, dataset.dim, settings.fd_step)?;
        records.push(verify_probe(
            online, target, teacher, dataset, schedule, lambdas, p, settings,
        )?);
    }
    let summary = lambdas
        .iter()
        .enumerate()
        .map(|(li, &lambda)| {
            let n = records.len().max(1) as f64;
            let col = |f: fn(&LambdaTerms) -> f64| records.iter().map(move |r| f(&r.terms[li]));
            LambdaSummary {
                lambda,
                mean_lhs: col(|x| x.lhs).sum::<f64>() / n,
                mean_bias: col(|x| x.bias).sum::<f64>() / n,
                mean_variance: col(|x| x.variance).sum::<f64>() / n,
                max_abs_residual: col(|x| x.residual.abs()).fold(0.0, f64::max),
                max_abs_cross: col(|x| x.cross.abs()).fold(0.0, f64::max),
            }
        })
        .collect();
    Ok(DecompositionReport {
        schedule,
        settings,
        lambdas: lambdas.to_vec(),
        probes: records,
        summary,
    })
}
