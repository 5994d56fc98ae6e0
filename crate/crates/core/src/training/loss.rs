//! Flow matching, consistency mid-training and MeanFlow losses.

use crate::dataset::FiniteSupportDataset;
use crate::dual::DualBatch;
use crate::error::{Error, Result};
use crate::network::{FlowMapNet, VelocityNet};
use crate::rng::LabRng;
use crate::schedule::Schedule;
use crate::solver::Trajectory;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::config::{DerivativeMode, TimeWeight, TrainConfig};

/// A scalar loss and its gradient for every network parameter, in
/// parameter-store order.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Vec<Tensor>,
}

fn mean_squared_rows(tape: &mut Tape, pred: Var, target: Var, rows: usize) -> Result<Var> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.squared_norm(diff);
    Ok(tape.scale(sq, 1.0 / rows as f64))
}

fn finish(tape: &Tape, loss: Var, vars: &[Var]) -> Result<LossOutput> {
    let value = tape.value(loss).as_scalar()?;
    let g = tape.backward(loss)?;
    Ok(LossOutput {
        loss: value,
        grads: vars.iter().map(|v| g.wrt(tape, *v)).collect(),
    })
}

/// `z_t = alpha_t z0 + sigma_t eps`, row by row.
pub fn noise_batch(z0: &Tensor, eps: &Tensor, t: &[f64], schedule: Schedule) -> Result<Tensor> {
    let a: Vec<f64> = t.iter().map(|&u| schedule.alpha(u)).collect();
    let s: Vec<f64> = t.iter().map(|&u| schedule.sigma(u)).collect();
    z0.scale_rows(&a)?.add(&eps.scale_rows(&s)?)
}

/// `alpha'_t z0 + sigma'_t eps`, row by row.
pub fn one_point_batch(z0: &Tensor, eps: &Tensor, t: &[f64], schedule: Schedule) -> Result<Tensor> {
    let a: Vec<f64> = t.iter().map(|&u| schedule.alpha_dot(u)).collect();
    let s: Vec<f64> = t.iter().map(|&u| schedule.sigma_dot(u)).collect();
    z0.scale_rows(&a)?.add(&eps.scale_rows(&s)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FmBatch {
    pub z0: Tensor,
    pub eps: Tensor,
    pub t: Vec<f64>,
    pub classes: Vec<usize>,
}

/// Monte-Carlo flow-matching loss
/// `mean_r w(t_r) |v(z_t, t) - (alpha' z0 + sigma' eps)|^2`.
pub fn fm_loss(
    net: &VelocityNet,
    batch: &FmBatch,
    schedule: Schedule,
    weight: TimeWeight,
) -> Result<LossOutput> {
    let zt = noise_batch(&batch.z0, &batch.eps, &batch.t, schedule)?;
    let target = one_point_batch(&batch.z0, &batch.eps, &batch.t, schedule)?;
    let mut tape = Tape::new();
    let vars = net.param_leaves(&mut tape);
    let z = tape.leaf(zt);
    let out = net.eval_taped(&mut tape, &vars, z, &batch.t, &batch.classes)?;
    let tgt = tape.leaf(target);
    let rows = batch.t.len();
    let loss = match weight {
        TimeWeight::Constant => mean_squared_rows(&mut tape, out, tgt, rows)?,
    };
    finish(&tape, loss, &vars)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmtBatch {
    pub z: Tensor,
    pub t: Vec<f64>,
    pub s: Vec<f64>,
    pub target: Tensor,
    pub classes: Vec<usize>,
}

/// Regression rows for `(trajectory, i, j)` triples with `i > j`: input
/// `z_{t_i}` at `(t_i, t_j)`, target the chord slope.
pub fn cmt_batch(traj: &Trajectory, pairs: &[(usize, usize, usize)]) -> Result<CmtBatch> {
    if pairs.is_empty() {
        return Err(Error::Contract("CMT batch needs at least one pair".into()));
    }
    let times = traj.grid.times();
    let mut z = Vec::with_capacity(pairs.len());
    let mut target = Vec::with_capacity(pairs.len());
    let (mut t, mut s, mut classes) = (Vec::new(), Vec::new(), Vec::new());
    for &(k, i, j) in pairs {
        target.push(traj.slope(k, i, j)?);
        z.push(traj.state(k, i).to_vec());
        t.push(times[i]);
        s.push(times[j]);
        classes.push(traj.classes[k]);
    }
    Ok(CmtBatch {
        z: Tensor::from_rows(&z)?,
        t,
        s,
        target: Tensor::from_rows(&target)?,
        classes,
    })
}

/// Up to `per_traj` distinct pairs from each trajectory, drawn uniformly
/// without replacement.
pub fn sample_cmt_pairs(
    traj: &Trajectory,
    per_traj: usize,
    rng: &mut LabRng,
) -> Vec<(usize, usize, usize)> {
    let all = traj.grid.pairs();
    let take = per_traj.min(all.len());
    let mut out = Vec::with_capacity(take * traj.num_trajectories());
    for k in 0..traj.num_trajectories() {
        let mut pool = all.clone();
        for m in 0..take {
            let r = m + rng.index(pool.len() - m);
            pool.swap(m, r);
            out.push((k, pool[m].0, pool[m].1));
        }
    }
    out
}

/// `mean_r |h(z_{t_i}, t_i, t_j) - (z_{t_i} - z_{t_j}) / (t_i - t_j)|^2`.
pub fn cmt_loss(net: &FlowMapNet, batch: &CmtBatch) -> Result<LossOutput> {
    if batch.t.iter().zip(&batch.s).any(|(t, s)| t <= s) {
        return Err(Error::Contract("CMT pairs need t_i > t_j".into()));
    }
    let mut tape = Tape::new();
    let vars = net.param_leaves(&mut tape);
    let z = tape.leaf(batch.z.clone());
    let out = net.eval_taped(&mut tape, &vars, z, &batch.t, &batch.s, &batch.classes)?;
    let tgt = tape.leaf(batch.target.clone());
    let loss = mean_squared_rows(&mut tape, out, tgt, batch.t.len())?;
    finish(&tape, loss, &vars)
}

/// A batched flow map that can also report its transport derivative
/// `(d_z h) w + d_t h` exactly.
pub trait TransportMap {
    fn eval_rows(&self, z: &Tensor, t: &[f64], s: &[f64], classes: &[usize]) -> Result<Tensor>;
    fn transport_jvp(
        &self,
        z: &Tensor,
        t: &[f64],
        s: &[f64],
        classes: &[usize],
        w: &Tensor,
    ) -> Result<Tensor>;
}

impl TransportMap for FlowMapNet {
    fn eval_rows(&self, z: &Tensor, t: &[f64], s: &[f64], classes: &[usize]) -> Result<Tensor> {
        self.eval(z, t, s, classes)
    }

    fn transport_jvp(
        &self,
        z: &Tensor,
        t: &[f64],
        s: &[f64],
        classes: &[usize],
        w: &Tensor,
    ) -> Result<Tensor> {
        let zd = DualBatch::new(z.clone(), w.clone())?;
        let ones = vec![1.0; t.len()];
        let zeros = vec![0.0; s.len()];
        Ok(self
            .eval_dual(&zd, t, &ones, s, &zeros, classes)?
            .into_parts()
            .1)
    }
}

/// Offsets `(lo - t, hi - t)` of the central stencil at `t`. Near the ends of
/// `[0, 1]` the window keeps its width `2 dt` and shifts inward.
pub fn fd_offsets(t: f64, dt: f64) -> (f64, f64) {
    if t + dt > 1.0 {
        (1.0 - 2.0 * dt - t, 1.0 - t)
    } else if t - dt < 0.0 {
        (-t, 2.0 * dt - t)
    } else {
        (-dt, dt)
    }
}

/// Central difference of `h` along the Euler-perturbed path
/// `(z + k w, t + k)`, `k` in `{-dt, +dt}`.
pub fn transport_derivative_fd(
    map: &dyn TransportMap,
    z: &Tensor,
    t: &[f64],
    s: &[f64],
    classes: &[usize],
    w: &Tensor,
    dt: f64,
) -> Result<Tensor> {
    if dt <= 0.0 {
        return Err(Error::Config(format!(
            "finite-difference step {dt} must be positive"
        )));
    }
    let offs: Vec<(f64, f64)> = t.iter().map(|&u| fd_offsets(u, dt)).collect();
    let lo: Vec<f64> = offs.iter().map(|o| o.0).collect();
    let hi: Vec<f64> = offs.iter().map(|o| o.1).collect();
    let z_lo = z.add(&w.scale_rows(&lo)?)?;
    let z_hi = z.add(&w.scale_rows(&hi)?)?;
    let t_lo: Vec<f64> = t.iter().zip(&lo).map(|(a, b)| a + b).collect();
    let t_hi: Vec<f64> = t.iter().zip(&hi).map(|(a, b)| a + b).collect();
    let h_lo = map.eval_rows(&z_lo, &t_lo, s, classes)?;
    let h_hi = map.eval_rows(&z_hi, &t_hi, s, classes)?;
    let inv: Vec<f64> = offs.iter().map(|(l, h)| 1.0 / (h - l)).collect();
    h_hi.sub(&h_lo)?.scale_rows(&inv)
}

/// Exact transport derivative: a JVP in the direction `[w, 1, 0]`.
pub fn transport_derivative_jvp(
    map: &dyn TransportMap,
    z: &Tensor,
    t: &[f64],
    s: &[f64],
    classes: &[usize],
    w: &Tensor,
) -> Result<Tensor> {
    map.transport_jvp(z, t, s, classes, w)
}

/// `(1 - lambda) v_hat + lambda v_teacher`; the unused ingredient may be
/// absent at the endpoints.
pub fn mix_velocities(
    v_hat: Option<&Tensor>,
    v_teacher: Option<&Tensor>,
    lambda: f64,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    let need = |v: Option<&Tensor>, what: &str| {
        v.cloned()
            .ok_or_else(|| Error::Config(format!("lambda = {lambda} requires the {what}")))
    };
    if lambda == 1.0 {
        return need(v_teacher, "teacher velocity");
    }
    if lambda == 0.0 {
        return need(v_hat, "one-point velocity");
    }
    let a = need(v_hat, "one-point velocity")?;
    let b = need(v_teacher, "teacher velocity")?;
    a.scale(1.0 - lambda).add(&b.scale(lambda))
}

/// The proxy velocity `w_lambda` at `z_t`. `one_point` is the `(z0, eps)`
/// pair that generated `z_t`.
#[allow(clippy::too_many_arguments)]
pub fn build_w_lambda(
    z_t: &Tensor,
    t: &[f64],
    classes: &[usize],
    lambda: f64,
    teacher: Option<&VelocityNet>,
    one_point: Option<(&Tensor, &Tensor)>,
    schedule: Schedule,
) -> Result<Tensor> {
    let v_teacher = match teacher {
        Some(net) if lambda > 0.0 => Some(net.eval(z_t, t, classes)?),
        _ => None,
    };
    let v_hat = match one_point {
        Some((z0, eps)) if lambda < 1.0 => Some(one_point_batch(z0, eps, t, schedule)?),
        _ => None,
    };
    mix_velocities(v_hat.as_ref(), v_teacher.as_ref(), lambda)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MfSettings {
    pub lambda: f64,
    pub derivative: DerivativeMode,
    pub delta_t: f64,
}

impl From<&TrainConfig> for MfSettings {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lambda: c.lambda,
            derivative: c.derivative,
            delta_t: c.delta_t,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MfBatch {
    pub z0: Tensor,
    pub eps: Tensor,
    pub t: Vec<f64>,
    pub s: Vec<f64>,
    pub classes: Vec<usize>,
}

/// Target ingredients, all computed from plain tensors and therefore outside
/// any gradient path.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetTerms {
    pub z_t: Tensor,
    pub w_lambda: Tensor,
    pub transport: Tensor,
    pub target: Tensor,
}

/// `h_tgt = w - (t - s) ((d_z h) w + d_t h)` with the current parameters.
pub fn mf_target(
    net: &dyn TransportMap,
    batch: &MfBatch,
    schedule: Schedule,
    settings: MfSettings,
    teacher: Option<&VelocityNet>,
) -> Result<TargetTerms> {
    let z_t = noise_batch(&batch.z0, &batch.eps, &batch.t, schedule)?;
    let w = build_w_lambda(
        &z_t,
        &batch.t,
        &batch.classes,
        settings.lambda,
        teacher,
        Some((&batch.z0, &batch.eps)),
        schedule,
    )?;
    let transport = match settings.derivative {
        DerivativeMode::Fd => transport_derivative_fd(
            net,
            &z_t,
            &batch.t,
            &batch.s,
            &batch.classes,
            &w,
            settings.delta_t,
        )?,
        DerivativeMode::Jvp => {
            transport_derivative_jvp(net, &z_t, &batch.t, &batch.s, &batch.classes, &w)?
        }
    };
    let gap: Vec<f64> = batch.t.iter().zip(&batch.s).map(|(t, s)| t - s).collect();
    let target = w.sub(&transport.scale_rows(&gap)?)?;
    Ok(TargetTerms {
        z_t,
        w_lambda: w,
        transport,
        target,
    })
}

/// `mean_r |h(z_t, t, s) - h_tgt|^2` with gradients through the online
/// evaluation only; the target uses the same parameters, detached.
pub fn mf_loss(
    net: &FlowMapNet,
    batch: &MfBatch,
    schedule: Schedule,
    settings: MfSettings,
    teacher: Option<&VelocityNet>,
) -> Result<(LossOutput, TargetTerms)> {
    mf_loss_split(net, net, batch, schedule, settings, teacher)
}

/// [`mf_loss`] with the target built from a separate map.
pub fn mf_loss_split(
    net: &FlowMapNet,
    target_map: &dyn TransportMap,
    batch: &MfBatch,
    schedule: Schedule,
    settings: MfSettings,
    teacher: Option<&VelocityNet>,
) -> Result<(LossOutput, TargetTerms)> {
    let terms = mf_target(target_map, batch, schedule, settings, teacher)?;
    let mut tape = Tape::new();
    let vars = net.param_leaves(&mut tape);
    let z = tape.leaf(terms.z_t.clone());
    let out = net.eval_taped(&mut tape, &vars, z, &batch.t, &batch.s, &batch.classes)?;
    let tgt = tape.leaf(terms.target.clone());
    let loss = mean_squared_rows(&mut tape, out, tgt, batch.t.len())?;
    Ok((finish(&tape, loss, &vars)?, terms))
}

/// Gradients of the reference MeanFlow loss, split by path.
#[derive(Clone, Debug)]
pub struct ReferenceGradients {
    pub loss: f64,
    /// Through the online evaluation `h_theta(z_t, t, s)`.
    pub online: Vec<Tensor>,
    /// Through the finite-difference target.
    pub target_path: Vec<Tensor>,
}

/// The MeanFlow loss recorded entirely on one tape, with the target built
/// from a second, separately tracked copy of the parameters. With `detach`
/// the target is cut from the graph as in [`mf_loss`]; without it the
/// full gradient flows through both paths. Finite-difference transport only.
pub fn mf_loss_reference(
    net: &FlowMapNet,
    batch: &MfBatch,
    schedule: Schedule,
    settings: MfSettings,
    teacher: Option<&VelocityNet>,
    detach: bool,
) -> Result<ReferenceGradients> {
    if settings.derivative != DerivativeMode::Fd {
        return Err(Error::Config(
            "the reference loss records finite differences only".into(),
        ));
    }
    let z_t = noise_batch(&batch.z0, &batch.eps, &batch.t, schedule)?;
    let w = build_w_lambda(
        &z_t,
        &batch.t,
        &batch.classes,
        settings.lambda,
        teacher,
        Some((&batch.z0, &batch.eps)),
        schedule,
    )?;
    let offs: Vec<(f64, f64)> = batch
        .t
        .iter()
        .map(|&u| fd_offsets(u, settings.delta_t))
        .collect();
    let lo: Vec<f64> = offs.iter().map(|o| o.0).collect();
    let hi: Vec<f64> = offs.iter().map(|o| o.1).collect();
    let t_lo: Vec<f64> = batch.t.iter().zip(&lo).map(|(a, b)| a + b).collect();
    let t_hi: Vec<f64> = batch.t.iter().zip(&hi).map(|(a, b)| a + b).collect();
    let coef: Vec<f64> = batch
        .t
        .iter()
        .zip(&batch.s)
        .zip(&offs)
        .map(|((t, s), (l, h))| (t - s) / (h - l))
        .collect();
    let coef = Tensor::filled(z_t.rows(), z_t.cols(), 1.0).scale_rows(&coef)?;

    let mut tape = Tape::new();
    let online = net.param_leaves(&mut tape);
    let target_copy = net.param_leaves(&mut tape);
    let zv = tape.leaf(z_t.clone());
    let h = net.eval_taped(&mut tape, &online, zv, &batch.t, &batch.s, &batch.classes)?;

    let z_hi = tape.leaf(z_t.add(&w.scale_rows(&hi)?)?);
    let z_lo = tape.leaf(z_t.add(&w.scale_rows(&lo)?)?);
    let h_hi = net.eval_taped(
        &mut tape,
        &target_copy,
        z_hi,
        &t_hi,
        &batch.s,
        &batch.classes,
    )?;
    let h_lo = net.eval_taped(
        &mut tape,
        &target_copy,
        z_lo,
        &t_lo,
        &batch.s,
        &batch.classes,
    )?;
    let diff = tape.sub(h_hi, h_lo)?;
    let c = tape.leaf(coef);
    let scaled = tape.mul(diff, c)?;
    let wv = tape.leaf(w);
    let mut target = tape.sub(wv, scaled)?;
    if detach {
        target = tape.detach(target);
    }
    let loss = mean_squared_rows(&mut tape, h, target, batch.t.len())?;
    let value = tape.value(loss).as_scalar()?;
    let g = tape.backward(loss)?;
    Ok(ReferenceGradients {
        loss: value,
        online: online.iter().map(|v| g.wrt(&tape, *v)).collect(),
        target_path: target_copy.iter().map(|v| g.wrt(&tape, *v)).collect(),
    })
}

fn sample_atoms(data: &FiniteSupportDataset, n: usize, rng: &mut LabRng) -> (Tensor, Vec<usize>) {
    let mut rows = Vec::with_capacity(n * data.dim);
    let mut classes = Vec::with_capacity(n);
    for _ in 0..n {
        let k = data.sample_index(rng);
        rows.extend_from_slice(&data.atoms[k]);
        classes.push(data.labels[k]);
    }
    (
        Tensor::matrix(n, data.dim, rows).expect("sized buffer"),
        classes,
    )
}

pub fn sample_fm_batch(
    data: &FiniteSupportDataset,
    cfg: &TrainConfig,
    rng: &mut LabRng,
) -> FmBatch {
    let n = cfg.batch_size;
    let (z0, classes) = sample_atoms(data, n, rng);
    let eps = rng.normal_tensor(n, data.dim);
    let t = (0..n).map(|_| rng.uniform(cfg.t_min, 1.0)).collect();
    FmBatch {
        z0,
        eps,
        t,
        classes,
    }
}

/// `t ~ U[t_min, 1]`; `s = t` with probability `equal_time_fraction`,
/// otherwise `s ~ U[s_min, t]`.
pub fn sample_mf_batch(
    data: &FiniteSupportDataset,
    cfg: &TrainConfig,
    rng: &mut LabRng,
) -> MfBatch {
    let n = cfg.batch_size;
    let (z0, classes) = sample_atoms(data, n, rng);
    let eps = rng.normal_tensor(n, data.dim);
    let mut t = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    for _ in 0..n {
        let ti = rng.uniform(cfg.t_min, 1.0);
        let si = if rng.bernoulli(cfg.equal_time_fraction) {
            ti
        } else {
            rng.uniform(cfg.s_min, ti)
        };
        t.push(ti);
        s.push(si);
    }
    MfBatch {
        z0,
        eps,
        t,
        s,
        classes,
    }
}
