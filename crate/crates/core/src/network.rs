//! Time-conditioned MLPs: the flow map `h(z, t, s, c)` and the velocity
//! `v(z, t, c)`.
//!
//! Conditioning is a sum of embeddings: class, `t`, and (for the flow map)
//! the interval `t - s`. The summed embedding is added to the first trunk
//! pre-activation. All activations are SiLU, so outputs are smooth in every
//! input.

use serde::{Deserialize, Serialize};

use crate::dual::DualBatch;
use crate::error::{Error, Result};
use crate::params::{Forward, Graph, Linear, ParamStore, Plain, Taped};
use crate::rng::LabRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Sinusoidal features `[sin(w_i t), cos(w_i t)]` with angular frequencies
/// spaced geometrically from 1 to `max_frequency`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    pub num_frequencies: usize,
    pub max_frequency: f64,
}

impl TimeEmbedding {
    pub fn width(&self) -> usize {
        2 * self.num_frequencies
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let n = self.num_frequencies;
        (0..n)
            .map(|i| {
                if n == 1 {
                    1.0
                } else {
                    self.max_frequency.powf(i as f64 / (n - 1) as f64)
                }
            })
            .collect()
    }

    pub fn features(&self, times: &[f64]) -> Tensor {
        let freqs = self.frequencies();
        let n = freqs.len();
        let mut data = Vec::with_capacity(times.len() * 2 * n);
        for &t in times {
            data.extend(freqs.iter().map(|w| (w * t).sin()));
            data.extend(freqs.iter().map(|w| (w * t).cos()));
        }
        Tensor::matrix(times.len(), 2 * n, data).expect("sized buffer")
    }

    /// Features with their tangent along `dtimes`.
    pub fn features_dual(&self, times: &[f64], dtimes: &[f64]) -> DualBatch {
        let freqs = self.frequencies();
        let n = freqs.len();
        let mut tan = Vec::with_capacity(times.len() * 2 * n);
        for (&t, &dt) in times.iter().zip(dtimes) {
            tan.extend(freqs.iter().map(|w| w * (w * t).cos() * dt));
            tan.extend(freqs.iter().map(|w| -w * (w * t).sin() * dt));
        }
        let tangent = Tensor::matrix(times.len(), 2 * n, tan).expect("sized buffer");
        DualBatch::new(self.features(times), tangent).expect("same shape")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub data_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Number of affine layers in the trunk (input, hidden..., output).
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// Real classes; id `num_classes` is reserved as "unconditional".
    pub num_classes: usize,
    #[serde(default = "default_frequencies")]
    pub num_frequencies: usize,
    #[serde(default = "default_max_frequency")]
    pub max_frequency: f64,
}

fn default_hidden() -> usize {
    256
}
fn default_depth() -> usize {
    4
}
fn default_frequencies() -> usize {
    32
}
fn default_max_frequency() -> f64 {
    8.0
}

impl NetConfig {
    pub fn new(data_dim: usize, num_classes: usize) -> Self {
        Self {
            data_dim,
            hidden: default_hidden(),
            depth: default_depth(),
            num_classes,
            num_frequencies: default_frequencies(),
            max_frequency: default_max_frequency(),
        }
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn with_frequencies(mut self, n: usize) -> Self {
        self.num_frequencies = n;
        self
    }

    pub fn embedding(&self) -> TimeEmbedding {
        TimeEmbedding {
            num_frequencies: self.num_frequencies,
            max_frequency: self.max_frequency,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 || self.hidden == 0 || self.data_dim == 0 || self.num_frequencies == 0 {
            return Err(Error::Config(format!("invalid network config {self:?}")));
        }
        if !(self.max_frequency >= 1.0) {
            return Err(Error::Config("max_frequency must be >= 1".into()));
        }
        Ok(())
    }
}

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Truncated normal (std 0.02) weights, zero biases, zero final layer.
    Standard,
    /// Every weight `N(0, 1/fan_in)` and biases `N(0, 0.1^2)`, including the
    /// final layer. Produces generic non-zero functions for testing.
    Dense,
}

fn init_weight(rng: &mut LabRng, init: Init, fan_in: usize, fan_out: usize, zero: bool) -> Tensor {
    let data = (0..fan_in * fan_out)
        .map(|_| match (init, zero) {
            (Init::Standard, true) => 0.0,
            (Init::Standard, false) => rng.truncated_normal(0.02),
            (Init::Dense, _) => rng.normal() / (fan_in as f64).sqrt(),
        })
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("sized buffer")
}

fn init_bias(rng: &mut LabRng, init: Init, n: usize) -> Tensor {
    match init {
        Init::Standard => Tensor::zeros(1, n),
        Init::Dense => Tensor::row(&(0..n).map(|_| 0.1 * rng.normal()).collect::<Vec<_>>()),
    }
}

fn add_linear(
    params: &mut ParamStore,
    rng: &mut LabRng,
    init: Init,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    zero: bool,
    bias: bool,
) -> Linear {
    let weight = params.push(
        format!("{name}.w"),
        init_weight(rng, init, fan_in, fan_out, zero),
    );
    let bias = bias.then(|| params.push(format!("{name}.b"), init_bias(rng, init, fan_out)));
    Linear { weight, bias }
}

/// The shared architecture behind [`FlowMapNet`] and [`VelocityNet`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionedNet {
    config: NetConfig,
    params: ParamStore,
    trunk: Vec<Linear>,
    embed_t: [Linear; 2],
    embed_dt: Option<[Linear; 2]>,
    embed_class: Linear,
}

impl ConditionedNet {
    fn build(config: NetConfig, interval: bool, init: Init, rng: &mut LabRng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let (d, h, e) = (config.data_dim, config.hidden, config.embedding().width());
        let mut trunk = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let fan_in = if i == 0 { d } else { h };
            let last = i + 1 == config.depth;
            let fan_out = if last { d } else { h };
            trunk.push(add_linear(
                &mut params,
                rng,
                init,
                &format!("trunk.{i}"),
                fan_in,
                fan_out,
                last,
                true,
            ));
        }
        let embed_t = [
            add_linear(&mut params, rng, init, "embed_t.0", e, h, false, true),
            add_linear(&mut params, rng, init, "embed_t.1", h, h, false, true),
        ];
        let embed_dt = interval.then(|| {
            [
                add_linear(&mut params, rng, init, "embed_dt.0", e, h, false, true),
                add_linear(&mut params, rng, init, "embed_dt.1", h, h, false, true),
            ]
        });
        let embed_class = add_linear(
            &mut params,
            rng,
            init,
            "embed_class",
            config.num_classes + 1,
            h,
            false,
            false,
        );
        Ok(Self {
            config,
            params,
            trunk,
            embed_t,
            embed_dt,
            embed_class,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .tensors()
            .iter()
            .map(|p| tape.leaf(p.clone()))
            .collect()
    }

    /// Replaces every parameter; layout must match.
    pub fn load_params(&mut self, params: ParamStore) -> Result<()> {
        if params.names() != self.params.names() {
            return Err(Error::Checkpoint("parameter layout mismatch".into()));
        }
        for (a, b) in params.tensors().iter().zip(self.params.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::dim(format!(
                    "parameter shape {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn one_hot(&self, classes: &[usize]) -> Result<Tensor> {
        let width = self.config.num_classes + 1;
        let mut m = Tensor::zeros(classes.len(), width);
        for (i, &c) in classes.iter().enumerate() {
            if c >= width {
                return Err(Error::Config(format!(
                    "class {c} out of range (num_classes = {})",
                    self.config.num_classes
                )));
            }
            m.data_mut()[i * width + c] = 1.0;
        }
        Ok(m)
    }

    fn check_batch(&self, z_rows: usize, z_cols: usize, n: &[usize]) -> Result<()> {
        if z_cols != self.config.data_dim {
            return Err(Error::dim(format!(
                "network input has width {z_cols}, expected {}",
                self.config.data_dim
            )));
        }
        if n.iter().any(|&k| k != z_rows) {
            return Err(Error::dim(
                "per-row conditioning length differs from batch size",
            ));
        }
        Ok(())
    }

    fn forward<G: Graph>(
        &self,
        g: &mut G,
        z: &G::Value,
        t_feat: &G::Value,
        dt_feat: Option<&G::Value>,
        onehot: &G::Value,
    ) -> Result<G::Value> {
        let p = &self.params;
        let te = g.linear(p, self.embed_t[0], t_feat)?;
        let te = g.silu(&te);
        let mut cond = g.linear(p, self.embed_t[1], &te)?;
        if let (Some(layers), Some(f)) = (&self.embed_dt, dt_feat) {
            let de = g.linear(p, layers[0], f)?;
            let de = g.silu(&de);
            let de = g.linear(p, layers[1], &de)?;
            cond = g.add(&cond, &de)?;
        }
        let ce = g.linear(p, self.embed_class, onehot)?;
        cond = g.add(&cond, &ce)?;

        let mut h = g.linear(p, self.trunk[0], z)?;
        h = g.add(&h, &cond)?;
        h = g.silu(&h);
        let last = self.trunk.len() - 1;
        for layer in &self.trunk[1..last] {
            h = g.linear(p, *layer, &h)?;
            h = g.silu(&h);
        }
        g.linear(p, self.trunk[last], &h)
    }

    fn eval_plain(
        &self,
        z: &Tensor,
        t: &[f64],
        dt: Option<&[f64]>,
        classes: &[usize],
    ) -> Result<Tensor> {
        let mut lens = vec![t.len(), classes.len()];
        lens.extend(dt.map(<[f64]>::len));
        self.check_batch(z.rows(), z.cols(), &lens)?;
        let emb = self.config.embedding();
        let tf = emb.features(t);
        let df = dt.map(|d| emb.features(d));
        let oh = self.one_hot(classes)?;
        self.forward(&mut Plain, z, &tf, df.as_ref(), &oh)
    }

    fn eval_taped(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        z: Var,
        t: &[f64],
        dt: Option<&[f64]>,
        classes: &[usize],
    ) -> Result<Var> {
        let zv = tape.value(z);
        let mut lens = vec![t.len(), classes.len()];
        lens.extend(dt.map(<[f64]>::len));
        self.check_batch(zv.rows(), zv.cols(), &lens)?;
        if vars.len() != self.params.len() {
            return Err(Error::Contract(
                "tape leaves do not match parameters".into(),
            ));
        }
        let emb = self.config.embedding();
        let tf = tape.leaf(emb.features(t));
        let df = dt.map(|d| tape.leaf(emb.features(d)));
        let oh = tape.leaf(self.one_hot(classes)?);
        let mut g = Taped { tape, vars };
        self.forward(&mut g, &z, &tf, df.as_ref(), &oh)
    }

    #[allow(clippy::too_many_arguments)]
    fn eval_dual(
        &self,
        z: &DualBatch,
        t: &[f64],
        t_tan: &[f64],
        dt: Option<(&[f64], &[f64])>,
        classes: &[usize],
    ) -> Result<DualBatch> {
        let mut lens = vec![t.len(), t_tan.len(), classes.len()];
        if let Some((a, b)) = dt {
            lens.push(a.len());
            lens.push(b.len());
        }
        self.check_batch(z.primal().rows(), z.primal().cols(), &lens)?;
        let emb = self.config.embedding();
        let tf = emb.features_dual(t, t_tan);
        let df = dt.map(|(d, dd)| emb.features_dual(d, dd));
        let oh = DualBatch::constant(self.one_hot(classes)?);
        self.forward(&mut Forward, z, &tf, df.as_ref(), &oh)
    }
}

/// Flow map `h_theta(z, t, s, c)`: the average velocity from time `t` to `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowMapNet {
    net: ConditionedNet,
}

impl FlowMapNet {
    pub fn new(config: NetConfig, init: Init, rng: &mut LabRng) -> Result<Self> {
        Ok(Self {
            net: ConditionedNet::build(config, true, init, rng)?,
        })
    }

    /// Initializes from a velocity network: trunk, `t` and class embeddings
    /// are copied, the interval embedding is fresh with a zero output layer,
    /// so the new map starts out equal to the teacher's velocity.
    pub fn from_teacher(teacher: &VelocityNet, rng: &mut LabRng) -> Result<Self> {
        let mut fresh = Self::new(teacher.config().clone(), Init::Standard, rng)?;
        let src = teacher.inner().params();
        for (name, value) in src.names().iter().zip(src.tensors()) {
            fresh.net.params.set_by_name(name, value.clone())?;
        }
        let out = fresh
            .net
            .embed_dt
            .expect("flow map has an interval embedding")[1];
        let w = fresh.net.params.get(out.weight);
        let zero = Tensor::zeros(w.rows(), w.cols());
        fresh.net.params.tensors_mut()[out.weight] = zero;
        Ok(fresh)
    }

    pub fn from_params(config: NetConfig, params: ParamStore) -> Result<Self> {
        let mut net = Self::new(config, Init::Standard, &mut LabRng::new(0))?;
        net.net.load_params(params)?;
        Ok(net)
    }

    pub fn inner(&self) -> &ConditionedNet {
        &self.net
    }

    pub fn inner_mut(&mut self) -> &mut ConditionedNet {
        &mut self.net
    }

    pub fn config(&self) -> &NetConfig {
        &self.net.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.net.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.net.params
    }

    /// Batched evaluation. No ordering check, so finite-difference stencils
    /// may probe `t < s`.
    pub fn eval(&self, z: &Tensor, t: &[f64], s: &[f64], classes: &[usize]) -> Result<Tensor> {
        let dt = interval(t, s)?;
        self.net.eval_plain(z, t, Some(&dt), classes)
    }

    pub fn eval_taped(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        z: Var,
        t: &[f64],
        s: &[f64],
        classes: &[usize],
    ) -> Result<Var> {
        let dt = interval(t, s)?;
        self.net.eval_taped(tape, vars, z, t, Some(&dt), classes)
    }

    /// Forward-mode evaluation with tangents for `z`, `t` and `s`.
    pub fn eval_dual(
        &self,
        z: &DualBatch,
        t: &[f64],
        t_tan: &[f64],
        s: &[f64],
        s_tan: &[f64],
        classes: &[usize],
    ) -> Result<DualBatch> {
        let dt = interval(t, s)?;
        let dt_tan = interval(t_tan, s_tan)?;
        self.net
            .eval_dual(z, t, t_tan, Some((&dt, &dt_tan)), classes)
    }

    pub fn param_leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.net.param_leaves(tape)
    }
}

fn interval(t: &[f64], s: &[f64]) -> Result<Vec<f64>> {
    if t.len() != s.len() {
        return Err(Error::dim("t and s batches differ in length"));
    }
    Ok(t.iter().zip(s).map(|(a, b)| a - b).collect())
}

/// Velocity field `v_phi(z, t, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityNet {
    net: ConditionedNet,
}

impl VelocityNet {
    pub fn new(config: NetConfig, init: Init, rng: &mut LabRng) -> Result<Self> {
        Ok(Self {
            net: ConditionedNet::build(config, false, init, rng)?,
        })
    }

    pub fn from_params(config: NetConfig, params: ParamStore) -> Result<Self> {
        let mut net = Self::new(config, Init::Standard, &mut LabRng::new(0))?;
        net.net.load_params(params)?;
        Ok(net)
    }

    pub fn inner(&self) -> &ConditionedNet {
        &self.net
    }

    pub fn config(&self) -> &NetConfig {
        &self.net.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.net.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.net.params
    }

    pub fn eval(&self, z: &Tensor, t: &[f64], classes: &[usize]) -> Result<Tensor> {
        self.net.eval_plain(z, t, None, classes)
    }

    pub fn eval_taped(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        z: Var,
        t: &[f64],
        classes: &[usize],
    ) -> Result<Var> {
        self.net.eval_taped(tape, vars, z, t, None, classes)
    }

    pub fn eval_dual(
        &self,
        z: &DualBatch,
        t: &[f64],
        t_tan: &[f64],
        classes: &[usize],
    ) -> Result<DualBatch> {
        self.net.eval_dual(z, t, t_tan, None, classes)
    }

    pub fn param_leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.net.param_leaves(tape)
    }
}

/// Single-point flow map evaluation with input validation.
pub fn eval_flowmap(net: &FlowMapNet, z: &[f64], t: f64, s: f64, class: usize) -> Result<Vec<f64>> {
    if s > t {
        return Err(Error::Ordering(format!(
            "flow map needs s <= t, got t = {t}, s = {s}"
        )));
    }
    if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain {
            t,
            domain: "[0, 1]",
        });
    }
    let zt = Tensor::row(z);
    Ok(net.eval(&zt, &[t], &[s], &[class])?.into_data())
}

pub fn eval_velocity(net: &VelocityNet, z: &[f64], t: f64, class: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain {
            t,
            domain: "[0, 1]",
        });
    }
    Ok(net.eval(&Tensor::row(z), &[t], &[class])?.into_data())
}

/// The flow map at a degenerate interval is an instantaneous velocity.
pub fn flowmap_as_velocity(net: &FlowMapNet, z: &[f64], t: f64, class: usize) -> Result<Vec<f64>> {
    eval_flowmap(net, z, t, t, class)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(init: Init, seed: u64) -> FlowMapNet {
        let cfg = NetConfig::new(3, 2).with_hidden(16).with_frequencies(4);
        FlowMapNet::new(cfg, init, &mut LabRng::new(seed)).unwrap()
    }

    #[test]
    fn standard_init_outputs_zero() {
        let net = small(Init::Standard, 1);
        let out = eval_flowmap(&net, &[0.3, -1.0, 2.0], 0.8, 0.2, 1).unwrap();
        assert_eq!(out, vec![0.0; 3]);
        let v = VelocityNet::new(
            NetConfig::new(3, 2).with_hidden(16),
            Init::Standard,
            &mut LabRng::new(2),
        )
        .unwrap();
        assert_eq!(
            eval_velocity(&v, &[1.0, 2.0, 3.0], 0.5, 0).unwrap(),
            vec![0.0; 3]
        );
    }

    #[test]
    fn evaluation_is_deterministic() {
        let net = small(Init::Dense, 3);
        let a = eval_flowmap(&net, &[0.3, -1.0, 2.0], 0.8, 0.2, 1).unwrap();
        let b = eval_flowmap(&net, &[0.3, -1.0, 2.0], 0.8, 0.2, 1).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn ordering_and_shape_errors() {
        let net = small(Init::Dense, 3);
        assert!(matches!(
            eval_flowmap(&net, &[0.0; 3], 0.2, 0.5, 0),
            Err(Error::Ordering(_))
        ));
        assert!(matches!(
            eval_flowmap(&net, &[0.0; 2], 0.5, 0.2, 0),
            Err(Error::Dimension(_))
        ));
        assert!(eval_flowmap(&net, &[0.0; 3], 0.5, 0.2, 5).is_err());
    }

    #[test]
    fn flowmap_as_velocity_is_equal_time_evaluation() {
        let net = small(Init::Dense, 4);
        let z = [0.1, 0.2, -0.3];
        assert_eq!(
            flowmap_as_velocity(&net, &z, 0.6, 0).unwrap(),
            eval_flowmap(&net, &z, 0.6, 0.6, 0).unwrap()
        );
    }

    #[test]
    fn class_label_changes_output() {
        let net = small(Init::Dense, 5);
        let mut rng = LabRng::new(6);
        for _ in 0..10 {
            let z: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let t = rng.uniform(0.1, 1.0);
            let s = rng.uniform(0.0, t);
            let a = eval_flowmap(&net, &z, t, s, 0).unwrap();
            let b = eval_flowmap(&net, &z, t, s, 1).unwrap();
            assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-8));
        }
    }

    #[test]
    fn standard_init_still_conditions_on_class() {
        // Zero final layer hides the difference, so compare hidden features
        // by giving the final layer a non-zero weight.
        let mut net = small(Init::Standard, 7);
        let last = net.params().len() - 1;
        let names = net.params().names().to_vec();
        let idx = names.iter().position(|n| n == "trunk.3.w").unwrap();
        assert!(idx < last);
        let w = net.params().get(idx).map(|_| 1.0);
        net.params_mut().tensors_mut()[idx] = w;
        let a = eval_flowmap(&net, &[0.5, 0.5, 0.5], 0.7, 0.1, 0).unwrap();
        let b = eval_flowmap(&net, &[0.5, 0.5, 0.5], 0.7, 0.1, 1).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn embeddings_separate_nearby_times() {
        let emb = NetConfig::new(2, 1).embedding();
        let grid: Vec<f64> = (0..=10_000).map(|i| i as f64 * 1e-4).collect();
        let f = emb.features(&grid);
        for i in 0..grid.len() - 1 {
            let d: f64 = f
                .row_slice(i)
                .iter()
                .zip(f.row_slice(i + 1))
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            assert!(d > 0.0, "t = {} and t + 1e-4 collide", grid[i]);
        }
    }

    #[test]
    fn from_teacher_copies_shared_weights_and_matches_teacher() {
        let cfg = NetConfig::new(3, 2).with_hidden(16).with_frequencies(4);
        let teacher = VelocityNet::new(cfg, Init::Dense, &mut LabRng::new(8)).unwrap();
        let fm = FlowMapNet::from_teacher(&teacher, &mut LabRng::new(9)).unwrap();
        for (n, v) in teacher
            .params()
            .names()
            .iter()
            .zip(teacher.params().tensors())
        {
            assert_eq!(fm.params().by_name(n).unwrap(), v);
        }
        let z = Tensor::row(&[0.2, -0.4, 1.0]);
        let h = fm.eval(&z, &[0.7], &[0.3], &[1]).unwrap();
        let v = teacher.eval(&z, &[0.7], &[1]).unwrap();
        assert_eq!(h, v);
    }
}
