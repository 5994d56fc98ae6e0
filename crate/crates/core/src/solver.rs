//! Probability-flow ODE integration, trajectory recording and few-step
//! flow-map sampling.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::FiniteSupportDataset;
use crate::error::{Error, Result};
use crate::network::{FlowMapNet, VelocityNet};
use crate::oracle::Oracle;
use crate::rng::LabRng;
use crate::schedule::Schedule;
use crate::tensor::Tensor;

/// Lower end of every integration; oracles are singular at `t = 0`.
pub const T_MIN: f64 = 1e-3;

/// A batched velocity field `v(z, t, c)`; all rows share one time.
pub trait VelocityField {
    fn velocity(&self, z: &Tensor, t: f64, classes: &[usize]) -> Result<Tensor>;
}

/// A batched average-velocity map `h(z, t, s, c)`.
pub trait FlowMap {
    fn mean_velocity(&self, z: &Tensor, t: f64, s: f64, classes: &[usize]) -> Result<Tensor>;
}

impl VelocityField for VelocityNet {
    fn velocity(&self, z: &Tensor, t: f64, classes: &[usize]) -> Result<Tensor> {
        self.eval(z, &vec![t; z.rows()], classes)
    }
}

impl FlowMap for FlowMapNet {
    fn mean_velocity(&self, z: &Tensor, t: f64, s: f64, classes: &[usize]) -> Result<Tensor> {
        let n = z.rows();
        self.eval(z, &vec![t; n], &vec![s; n], classes)
    }
}

/// Any closure `(z, t) -> v` for a single row.
pub struct FnField<F>(pub F);

impl<F> VelocityField for FnField<F>
where
    F: Fn(&[f64], f64) -> Vec<f64>,
{
    fn velocity(&self, z: &Tensor, t: f64, _classes: &[usize]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = (0..z.rows()).map(|i| (self.0)(z.row_slice(i), t)).collect();
        if rows.is_empty() {
            return Ok(Tensor::zeros(0, z.cols()));
        }
        Tensor::from_rows(&rows)
    }
}

/// Any closure `(z, t, s) -> h` for a single row.
pub struct FnMap<F>(pub F);

impl<F> FlowMap for FnMap<F>
where
    F: Fn(&[f64], f64, f64) -> Vec<f64>,
{
    fn mean_velocity(&self, z: &Tensor, t: f64, s: f64, _classes: &[usize]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = (0..z.rows())
            .map(|i| (self.0)(z.row_slice(i), t, s))
            .collect();
        if rows.is_empty() {
            return Ok(Tensor::zeros(0, z.cols()));
        }
        Tensor::from_rows(&rows)
    }
}

/// The exact marginal field of a finite dataset. With `conditional` set, row
/// `i` uses the posterior restricted to atoms labelled `classes[i]`.
#[derive(Clone, Copy, Debug)]
pub struct OracleField<'a> {
    pub dataset: &'a FiniteSupportDataset,
    pub schedule: Schedule,
    pub conditional: bool,
    pub rk4_steps: usize,
}

impl<'a> OracleField<'a> {
    pub fn new(dataset: &'a FiniteSupportDataset, schedule: Schedule) -> Self {
        Self {
            dataset,
            schedule,
            conditional: false,
            rk4_steps: crate::oracle::ORACLE_RK4_STEPS,
        }
    }

    fn oracle(&self, class: usize) -> Oracle<'a> {
        Oracle::conditional(
            self.dataset,
            self.schedule,
            self.conditional.then_some(class),
        )
    }

    fn per_row(
        &self,
        z: &Tensor,
        classes: &[usize],
        f: impl Fn(&Oracle, &[f64]) -> Result<Vec<f64>>,
    ) -> Result<Tensor> {
        if classes.len() != z.rows() {
            return Err(Error::dim("one class per row required"));
        }
        let mut out = Tensor::zeros(z.rows(), z.cols());
        for i in 0..z.rows() {
            let v = f(&self.oracle(classes[i]), z.row_slice(i))?;
            out.row_slice_mut(i).copy_from_slice(&v);
        }
        Ok(out)
    }
}

impl VelocityField for OracleField<'_> {
    fn velocity(&self, z: &Tensor, t: f64, classes: &[usize]) -> Result<Tensor> {
        self.per_row(z, classes, |o, zi| o.velocity(zi, t))
    }
}

impl FlowMap for OracleField<'_> {
    fn mean_velocity(&self, z: &Tensor, t: f64, s: f64, classes: &[usize]) -> Result<Tensor> {
        self.per_row(z, classes, |o, zi| o.meanflow(zi, t, s, self.rk4_steps))
    }
}

/// Strictly increasing times inside `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Config(
                "a time grid needs at least two points".into(),
            ));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Ordering(
                "grid times must be strictly increasing".into(),
            ));
        }
        if times[0] < 0.0 || times[times.len() - 1] > 1.0 {
            return Err(Error::Domain {
                t: if times[0] < 0.0 {
                    times[0]
                } else {
                    times[times.len() - 1]
                },
                domain: "[0, 1]",
            });
        }
        Ok(Self { times })
    }

    /// `n` evenly spaced points from `lo` to `hi` inclusive.
    pub fn uniform(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config(
                "a time grid needs at least two points".into(),
            ));
        }
        let h = (hi - lo) / (n - 1) as f64;
        let mut times: Vec<f64> = (0..n).map(|i| lo + h * i as f64).collect();
        times[n - 1] = hi;
        Self::new(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// All index pairs `(i, j)` with `i > j`.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let n = self.len();
        (0..n).flat_map(|i| (0..i).map(move |j| (i, j))).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Euler,
    Heun,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "heun" => Ok(Method::Heun),
            other => Err(Error::Config(format!("unknown solver method {other:?}"))),
        }
    }
}

/// A batch of PF-ODE solutions recorded on a grid. `states[i]` holds every
/// trajectory's state at `grid.times()[i]`, one row per trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub states: Vec<Tensor>,
    pub classes: Vec<usize>,
}

impl Trajectory {
    pub fn num_trajectories(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.states[0].cols()
    }

    pub fn state(&self, traj: usize, i: usize) -> &[f64] {
        self.states[i].row_slice(traj)
    }

    /// Final states at the lowest grid time.
    pub fn endpoints(&self) -> &Tensor {
        &self.states[0]
    }

    /// Slope `(z_i - z_j) / (t_i - t_j)` for one trajectory.
    pub fn slope(&self, traj: usize, i: usize, j: usize) -> Result<Vec<f64>> {
        if i <= j {
            return Err(Error::Contract(format!("pair needs i > j, got ({i}, {j})")));
        }
        let t = self.grid.times();
        let dt = t[i] - t[j];
        Ok(self
            .state(traj, i)
            .iter()
            .zip(self.state(traj, j))
            .map(|(a, b)| (a - b) / dt)
            .collect())
    }

    /// CSV with columns `traj_id, i, t_i, z0, z1, ...`, ordered by trajectory
    /// then grid index.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["traj_id".to_string(), "i".into(), "t_i".into()];
        header.extend((0..self.dim()).map(|k| format!("z{k}")));
        w.write_record(&header)?;
        for traj in 0..self.num_trajectories() {
            for (i, t) in self.grid.times().iter().enumerate() {
                let mut rec = vec![traj.to_string(), i.to_string(), format_f64(*t)];
                rec.extend(self.state(traj, i).iter().map(|v| format_f64(*v)));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest decimal that parses back to the same `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

fn check_step(z: &Tensor, step: usize) -> Result<()> {
    if z.all_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            stage: "solver".into(),
            step,
            reason: "non-finite state".into(),
        })
    }
}

/// Integrates `dz/dt = v(z, t)` downward through every grid point, starting
/// from `z_init` at the top of the grid.
pub fn integrate_on_grid(
    field: &dyn VelocityField,
    z_init: &Tensor,
    classes: &[usize],
    grid: &TimeGrid,
    method: Method,
) -> Result<Trajectory> {
    if classes.len() != z_init.rows() {
        return Err(Error::dim("one class per trajectory required"));
    }
    let t = grid.times();
    let n = t.len();
    let mut states = vec![Tensor::zeros(0, 0); n];
    let mut z = z_init.clone();
    states[n - 1] = z.clone();
    for (step, i) in (1..n).rev().enumerate() {
        let (tc, tn) = (t[i], t[i - 1]);
        let h = tn - tc;
        let v = field.velocity(&z, tc, classes)?;
        z = match method {
            Method::Euler => {
                let mut next = z.clone();
                next.axpy(h, &v)?;
                next
            }
            Method::Heun => {
                let mut pred = z.clone();
                pred.axpy(h, &v)?;
                let v2 = field.velocity(&pred, tn, classes)?;
                let mut next = z.clone();
                next.axpy(0.5 * h, &v)?;
                next.axpy(0.5 * h, &v2)?;
                next
            }
        };
        check_step(&z, step + 1)?;
        states[i - 1] = z.clone();
    }
    Ok(Trajectory {
        grid: grid.clone(),
        states,
        classes: classes.to_vec(),
    })
}

/// Uniform-step PF-ODE solve from `t_start` down to `t_end`.
pub fn solve_pfode(
    field: &dyn VelocityField,
    z_init: &Tensor,
    classes: &[usize],
    t_start: f64,
    t_end: f64,
    n_steps: usize,
    method: Method,
) -> Result<Trajectory> {
    if t_start <= t_end {
        return Err(Error::Ordering(format!(
            "integration runs downward, got {t_start} -> {t_end}"
        )));
    }
    if n_steps == 0 {
        return Err(Error::Config("n_steps must be at least 1".into()));
    }
    let grid = TimeGrid::uniform(t_end, t_start, n_steps + 1)?;
    integrate_on_grid(field, z_init, classes, &grid, method)
}

/// Validates a sampler schedule: starts at 1, strictly decreasing, ends in
/// `[0, 1)`.
pub fn check_step_times(step_times: &[f64]) -> Result<()> {
    if step_times.len() < 2 {
        return Err(Error::Ordering("need at least two step times".into()));
    }
    if step_times[0] != 1.0 {
        return Err(Error::Ordering(format!(
            "step times must start at 1, got {}",
            step_times[0]
        )));
    }
    if step_times.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Ordering(
            "step times must be strictly decreasing".into(),
        ));
    }
    let last = step_times[step_times.len() - 1];
    if last < 0.0 {
        return Err(Error::Domain {
            t: last,
            domain: "[0, 1]",
        });
    }
    Ok(())
}

/// `n`-step schedule. One step is `[1, 0]`; two steps use `midpoint`;
/// more steps are uniform.
pub fn step_times(nfe: usize, midpoint: f64) -> Result<Vec<f64>> {
    match nfe {
        0 => Err(Error::Config("nfe must be at least 1".into())),
        1 => Ok(vec![1.0, 0.0]),
        2 => {
            if !(midpoint > 0.0 && midpoint < 1.0) {
                return Err(Error::Config(format!(
                    "two-step midpoint {midpoint} outside (0, 1)"
                )));
            }
            Ok(vec![1.0, midpoint, 0.0])
        }
        n => Ok((0..=n).map(|i| 1.0 - i as f64 / n as f64).collect()),
    }
}

/// `z <- z - (t - s) h(z, t, s)` over consecutive step-time pairs.
pub fn sample_flowmap(
    map: &dyn FlowMap,
    z_noise: &Tensor,
    step_times: &[f64],
    classes: &[usize],
) -> Result<Tensor> {
    check_step_times(step_times)?;
    let mut z = z_noise.clone();
    for (k, w) in step_times.windows(2).enumerate() {
        let h = map.mean_velocity(&z, w[0], w[1], classes)?;
        z.axpy(-(w[0] - w[1]), &h)?;
        check_step(&z, k + 1)?;
    }
    Ok(z)
}

/// `n_traj` teacher trajectories from fresh Gaussian noise, integrated with
/// Euler on `grid`. Classes are drawn by `class_sampler`.
pub fn make_cmt_trajectories(
    teacher: &dyn VelocityField,
    grid: &TimeGrid,
    n_traj: usize,
    dim: usize,
    class_sampler: &mut dyn FnMut(&mut LabRng) -> usize,
    rng: &mut LabRng,
) -> Result<Trajectory> {
    let classes: Vec<usize> = (0..n_traj).map(|_| class_sampler(rng)).collect();
    let z = rng.normal_tensor(n_traj, dim);
    integrate_on_grid(teacher, &z, &classes, grid, Method::Euler)
}
