//! The Adam loop shared by every stage.

use std::time::Instant;

use crate::dataset::FiniteSupportDataset;
use crate::error::{Error, Result};
use crate::network::{FlowMapNet, NetConfig, VelocityNet};
use crate::optim::{global_norm, Adam, EmaTracker};
use crate::params::ParamStore;
use crate::rng::LabRng;
use crate::schedule::Schedule;
use crate::solver::{make_cmt_trajectories, TimeGrid};

use super::config::{Stage, TrainConfig};
use super::loss::{
    cmt_batch, cmt_loss, fm_loss, mf_loss, sample_cmt_pairs, sample_fm_batch, sample_mf_batch,
    LossOutput, MfSettings,
};
use super::metrics::MetricsRow;

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Velocity(VelocityNet),
    FlowMap(FlowMapNet),
}

impl Model {
    pub fn params(&self) -> &ParamStore {
        match self {
            Model::Velocity(n) => n.params(),
            Model::FlowMap(n) => n.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Velocity(n) => n.params_mut(),
            Model::FlowMap(n) => n.params_mut(),
        }
    }

    pub fn config(&self) -> &NetConfig {
        match self {
            Model::Velocity(n) => n.config(),
            Model::FlowMap(n) => n.config(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Model::Velocity(_) => "velocity",
            Model::FlowMap(_) => "flow_map",
        }
    }
}

/// Everything a stage reads and writes.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    /// EMA shadow of the model parameters.
    pub ema: ParamStore,
    /// Iterations completed in the most recent stage.
    pub iteration: usize,
    /// Completed stages, oldest first.
    pub history: Vec<Stage>,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let ema = model.params().clone();
        Self {
            model,
            ema,
            iteration: 0,
            history: Vec::new(),
        }
    }

    /// A copy of the model with the EMA parameters swapped in.
    pub fn ema_model(&self) -> Result<Model> {
        let cfg = self.model.config().clone();
        Ok(match &self.model {
            Model::Velocity(_) => Model::Velocity(VelocityNet::from_params(cfg, self.ema.clone())?),
            Model::FlowMap(_) => Model::FlowMap(FlowMapNet::from_params(cfg, self.ema.clone())?),
        })
    }
}

pub struct StageContext<'a> {
    /// Training data in the latent space.
    pub data: &'a FiniteSupportDataset,
    pub schedule: Schedule,
    pub teacher: Option<&'a VelocityNet>,
    pub config: &'a TrainConfig,
    /// Lets MFD start from weights that never went through CMT.
    pub allow_without_cmt: bool,
    /// When unset, `wall_ms` is logged as 0 so logs are reproducible.
    pub record_wall_time: bool,
}

/// Receives telemetry and intermediate states while a stage runs.
pub trait StageObserver {
    fn metrics(&mut self, row: &MetricsRow) -> Result<()>;

    fn checkpoint(&mut self, _state: &TrainState, _rng: &LabRng) -> Result<()> {
        Ok(())
    }
}

impl StageObserver for Vec<MetricsRow> {
    fn metrics(&mut self, row: &MetricsRow) -> Result<()> {
        self.push(row.clone());
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub iterations: usize,
    pub final_loss: Option<f64>,
    pub max_grad_norm: f64,
    /// Iterations whose gradient norm exceeded the threshold.
    pub spikes: usize,
}

fn check_preconditions(stage: Stage, state: &TrainState, ctx: &StageContext) -> Result<()> {
    let cfg = ctx.config;
    let need_flow_map = || match state.model {
        Model::FlowMap(_) => Ok(()),
        Model::Velocity(_) => Err(Error::Pipeline(format!(
            "stage {stage} trains a flow map, got a velocity model"
        ))),
    };
    match stage {
        Stage::Pretrain => {
            if !matches!(state.model, Model::Velocity(_)) {
                return Err(Error::Pipeline("pretrain trains a velocity model".into()));
            }
        }
        Stage::Cmt => {
            need_flow_map()?;
            if ctx.teacher.is_none() {
                return Err(Error::Pipeline("cmt requires a teacher".into()));
            }
        }
        Stage::Mfd | Stage::Mft => {
            need_flow_map()?;
            if stage == Stage::Mfd && !ctx.allow_without_cmt && !state.history.contains(&Stage::Cmt)
            {
                return Err(Error::Pipeline(
                    "mfd requires CMT-initialized weights (override to run anyway)".into(),
                ));
            }
            if cfg.lambda > 0.0 && ctx.teacher.is_none() {
                return Err(Error::Config(format!(
                    "lambda = {} requires a teacher",
                    cfg.lambda
                )));
            }
        }
    }
    if let Some(t) = ctx.teacher {
        if t.config().data_dim != ctx.data.dim {
            return Err(Error::dim("teacher and data dimensions differ"));
        }
    }
    if state.model.config().data_dim != ctx.data.dim {
        return Err(Error::dim("model and data dimensions differ"));
    }
    Ok(())
}

fn step_loss(
    stage: Stage,
    model: &Model,
    ctx: &StageContext,
    rng: &mut LabRng,
) -> Result<LossOutput> {
    let cfg = ctx.config;
    match (stage, model) {
        (Stage::Pretrain, Model::Velocity(net)) => {
            let batch = sample_fm_batch(ctx.data, cfg, rng);
            fm_loss(net, &batch, ctx.schedule, cfg.time_weight)
        }
        (Stage::Cmt, Model::FlowMap(net)) => {
            let teacher = ctx.teacher.expect("checked");
            let grid = TimeGrid::uniform(cfg.t_min, 1.0, cfg.grid_points)?;
            let data = ctx.data;
            let mut classes = |r: &mut LabRng| data.labels[data.sample_index(r)];
            let traj = make_cmt_trajectories(
                teacher,
                &grid,
                cfg.trajectories_per_iter,
                data.dim,
                &mut classes,
                rng,
            )?;
            let pairs = sample_cmt_pairs(&traj, cfg.pairs_per_trajectory, rng);
            cmt_loss(net, &cmt_batch(&traj, &pairs)?)
        }
        (Stage::Mfd | Stage::Mft, Model::FlowMap(net)) => {
            let batch = sample_mf_batch(ctx.data, cfg, rng);
            Ok(mf_loss(
                net,
                &batch,
                ctx.schedule,
                MfSettings::from(cfg),
                ctx.teacher,
            )?
            .0)
        }
        _ => unreachable!("preconditions checked"),
    }
}

/// Runs one stage to completion. Telemetry is emitted every iteration;
/// divergence aborts with the offending iteration.
pub fn train_stage(
    stage: Stage,
    mut state: TrainState,
    ctx: &StageContext,
    rng: &mut LabRng,
    observer: &mut dyn StageObserver,
) -> Result<(TrainState, StageReport)> {
    let cfg = ctx.config;
    cfg.validate()?;
    check_preconditions(stage, &state, ctx)?;

    let start = Instant::now();
    let mut opt = Adam::new(
        state.model.params(),
        cfg.learning_rate,
        cfg.beta1,
        cfg.beta2,
        cfg.adam_eps,
    );
    let shadow = if state.ema.names() == state.model.params().names() {
        state.ema.clone()
    } else {
        state.model.params().clone()
    };
    let mut ema = EmaTracker::from_shadow(shadow, cfg.ema_beta);
    let mut report = StageReport {
        stage,
        iterations: 0,
        final_loss: None,
        max_grad_norm: 0.0,
        spikes: 0,
    };
    let mut consecutive = 0usize;
    state.iteration = 0;

    for iter in 0..cfg.iterations {
        let out = step_loss(stage, &state.model, ctx, rng)?;
        let grad_norm = global_norm(&out.grads);
        let row = MetricsRow {
            stage: stage.name().to_string(),
            iter,
            loss: out.loss,
            grad_norm,
            ema_dist: ema.distance(state.model.params()),
            wall_ms: if ctx.record_wall_time {
                start.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        observer.metrics(&row)?;
        if !out.loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Divergence {
                stage: stage.name().into(),
                step: iter,
                reason: format!(
                    "non-finite loss {} or gradient norm {}",
                    out.loss, grad_norm
                ),
            });
        }
        report.max_grad_norm = report.max_grad_norm.max(grad_norm);
        if grad_norm > cfg.grad_threshold {
            consecutive += 1;
            report.spikes += 1;
            log::warn!(
                "{stage} iter {iter}: gradient norm {grad_norm:.3e} above {:.1e}",
                cfg.grad_threshold
            );
            if consecutive >= cfg.divergence_patience {
                return Err(Error::Divergence {
                    stage: stage.name().into(),
                    step: iter,
                    reason: format!(
                        "gradient norm above {:.1e} for {} consecutive iterations",
                        cfg.grad_threshold, consecutive
                    ),
                });
            }
        } else {
            consecutive = 0;
        }

        opt.step(state.model.params_mut(), &out.grads)?;
        ema.update(state.model.params());
        state.iteration = iter + 1;
        report.iterations = iter + 1;
        report.final_loss = Some(out.loss);

        if cfg.checkpoint_every > 0
            && (iter + 1) % cfg.checkpoint_every == 0
            && iter + 1 < cfg.iterations
        {
            state.ema = ema.shadow().clone();
            observer.checkpoint(&state, rng)?;
        }
    }

    state.ema = ema.shadow().clone();
    state.history.push(stage);
    Ok((state, report))
}
