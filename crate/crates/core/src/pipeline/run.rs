//! Stage orchestration over an experiment directory.

use std::fs::{self, File, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{two_sample_metrics, TwoSampleMetrics};
use crate::dataset::FiniteSupportDataset;
use crate::error::{Error, Result};
use crate::network::{FlowMapNet, Init, NetConfig, VelocityNet};
use crate::rae::{train_decoder, DecoderNet, EncoderSpec, FrozenEncoder};
use crate::rng::LabRng;
use crate::training::{
    train_stage, MetricsRow, MetricsWriter, Model, Stage, StageContext, StageObserver, StageReport,
    TrainConfig, TrainState,
};

use super::checkpoint::{
    arrays_from_params, checkpoint_from_state, Checkpoint, DecoderCheckpoint, Provenance,
    FORMAT_VERSION,
};
use super::config::ExperimentConfig;
use super::lock::DirLock;
use super::samples::{decode_latents, draw_classes, sample_map, sample_teacher, write_samples_csv};

pub const METRICS_FILE: &str = "metrics.csv";
pub const DECODER_FILE: &str = "decoder.json";
pub const EVALUATION_FILE: &str = "evaluation.json";

pub fn checkpoint_file(stage: Stage) -> String {
    format!("{stage}.ckpt.json")
}

/// Appends metrics to a CSV and writes periodic checkpoints.
pub struct FileObserver {
    metrics: MetricsWriter<BufWriter<File>>,
    periodic: Option<(PathBuf, Provenance)>,
}

impl FileObserver {
    /// Opens `path` for appending; the header is written when the file is new.
    pub fn open(path: &Path, periodic: Option<(PathBuf, Provenance)>) -> Result<Self> {
        let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            metrics: MetricsWriter::new(BufWriter::new(file), fresh)?,
            periodic,
        })
    }

    pub fn flush(&mut self) -> Result<()> {
        self.metrics.flush()
    }
}

impl StageObserver for FileObserver {
    fn metrics(&mut self, row: &MetricsRow) -> Result<()> {
        self.metrics.write(row)
    }

    fn checkpoint(&mut self, state: &TrainState, rng: &LabRng) -> Result<()> {
        if let Some((dir, meta)) = &self.periodic {
            let mut meta = meta.clone();
            meta.rng = rng.state();
            let ckpt = checkpoint_from_state(state, meta);
            let name = format!(
                "{}-{:08}.ckpt.json",
                ckpt.stage.map(|s| s.name()).unwrap_or("init"),
                state.iteration
            );
            ckpt.save(&dir.join(name))?;
        }
        Ok(())
    }
}

/// A loaded experiment: raw data, its latent image and the configuration.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub raw: FiniteSupportDataset,
    pub heldout: Option<FiniteSupportDataset>,
    pub encoder: FrozenEncoder,
    pub latent: FiniteSupportDataset,
}

impl Experiment {
    pub fn load(config_path: &Path) -> Result<Self> {
        Self::new(ExperimentConfig::load(config_path)?)
    }

    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let raw = FiniteSupportDataset::load(&config.data.path)?;
        let heldout = config
            .data
            .heldout_path
            .as_ref()
            .map(|p| FiniteSupportDataset::load(p))
            .transpose()?;
        if let Some(h) = &heldout {
            if h.dim != raw.dim {
                return Err(Error::Config(
                    "held-out data has a different dimension".into(),
                ));
            }
        }
        let encoder = FrozenEncoder::new(EncoderSpec {
            input_dim: raw.dim,
            latent_dim: config.encoder.latent_dim,
            seed: config.encoder_seed(),
            nonlinear: config.encoder.nonlinear,
        })?;
        let latent = encoder.encode_dataset(&raw)?;
        Ok(Self {
            config,
            raw,
            heldout,
            encoder,
            latent,
        })
    }

    pub fn output_dir(&self) -> &Path {
        &self.config.output_dir
    }

    pub fn net_config(&self) -> NetConfig {
        let n = &self.config.network;
        NetConfig {
            data_dim: self.latent.dim,
            hidden: n.hidden,
            depth: n.depth,
            num_classes: self.latent.num_classes(),
            num_frequencies: n.num_frequencies,
            max_frequency: n.max_frequency,
        }
    }

    fn provenance(
        &self,
        stage: Option<Stage>,
        rng: &LabRng,
        cfg: Option<&TrainConfig>,
        parent: Option<String>,
    ) -> Provenance {
        Provenance {
            stage,
            rng: rng.state(),
            seed: self.config.seed,
            schedule: self.config.schedule,
            encoder: self.encoder.spec(),
            config: cfg.cloned(),
            parent,
        }
    }

    fn check_compatible(&self, ckpt: &Checkpoint, what: &str) -> Result<()> {
        if ckpt.encoder != self.encoder.spec() {
            return Err(Error::Checkpoint(format!(
                "{what} was trained with a different encoder"
            )));
        }
        if ckpt.network.data_dim != self.latent.dim
            || ckpt.network.num_classes != self.latent.num_classes()
        {
            return Err(Error::Checkpoint(format!(
                "{what} has incompatible dimensions"
            )));
        }
        if ckpt.schedule != self.config.schedule {
            return Err(Error::Checkpoint(format!(
                "{what} uses a different schedule"
            )));
        }
        Ok(())
    }

    fn stage_config(&self, stage: Stage) -> Result<TrainConfig> {
        self.config
            .stage(stage)?
            .ok_or_else(|| Error::Config(format!("no [{stage}] section in the config")))
    }

    #[allow(clippy::too_many_arguments)]
    fn run_stage(
        &self,
        stage: Stage,
        state: TrainState,
        cfg: &TrainConfig,
        teacher: Option<&VelocityNet>,
        parent: Option<String>,
        observer: &mut dyn StageObserver,
    ) -> Result<(Checkpoint, StageReport)> {
        let mut rng = LabRng::named(self.config.seed, stage.name());
        let ctx = StageContext {
            data: &self.latent,
            schedule: self.config.schedule,
            teacher,
            config: cfg,
            allow_without_cmt: self.config.allow_without_cmt,
            record_wall_time: self.config.record_wall_time,
        };
        let (state, report) = train_stage(stage, state, &ctx, &mut rng, observer)?;
        let meta = self.provenance(Some(stage), &rng, Some(cfg), parent);
        Ok((checkpoint_from_state(&state, meta), report))
    }

    /// Flow-matching teacher from fresh weights (or from `init`).
    pub fn pretrain(
        &self,
        init: Option<&Checkpoint>,
        observer: &mut dyn StageObserver,
    ) -> Result<(Checkpoint, StageReport)> {
        let cfg = self.stage_config(Stage::Pretrain)?;
        let (state, parent) = match init {
            Some(c) => {
                self.check_compatible(c, "init checkpoint")?;
                (c.state()?, Some(c.hash()?))
            }
            None => {
                let mut rng = LabRng::named(self.config.seed, "init-teacher");
                let net = VelocityNet::new(self.net_config(), Init::Standard, &mut rng)?;
                (TrainState::new(Model::Velocity(net)), None)
            }
        };
        self.run_stage(Stage::Pretrain, state, &cfg, None, parent, observer)
    }

    /// Flow map initialized from the teacher, trained on its trajectories.
    pub fn cmt(
        &self,
        teacher: &Checkpoint,
        observer: &mut dyn StageObserver,
    ) -> Result<(Checkpoint, StageReport)> {
        let cfg = self.stage_config(Stage::Cmt)?;
        self.check_compatible(teacher, "teacher")?;
        let teacher_net = teacher.velocity_net(true)?;
        let mut rng = LabRng::named(self.config.seed, "init-flow-map");
        let map = FlowMapNet::from_teacher(&teacher_net, &mut rng)?;
        let mut state = TrainState::new(Model::FlowMap(map));
        state.history = teacher.history.clone();
        self.run_stage(
            Stage::Cmt,
            state,
            &cfg,
            Some(&teacher_net),
            Some(teacher.hash()?),
            observer,
        )
    }

    /// MeanFlow post-training from `init`. `lambda` overrides the section's
    /// value.
    pub fn mf(
        &self,
        stage: Stage,
        init: &Checkpoint,
        teacher: Option<&Checkpoint>,
        lambda: Option<f64>,
        observer: &mut dyn StageObserver,
    ) -> Result<(Checkpoint, StageReport)> {
        if !matches!(stage, Stage::Mfd | Stage::Mft) {
            return Err(Error::Config(format!("{stage} is not a MeanFlow stage")));
        }
        let mut cfg = self.stage_config(stage)?;
        if let Some(l) = lambda {
            cfg.lambda = l;
            cfg.validate()?;
        }
        self.check_compatible(init, "init checkpoint")?;
        let teacher_net = match teacher {
            Some(t) => {
                self.check_compatible(t, "teacher")?;
                Some(t.velocity_net(true)?)
            }
            None => None,
        };
        let state = match init.state()? {
            s @ TrainState {
                model: Model::FlowMap(_),
                ..
            } => s,
            s => {
                // A velocity checkpoint starts a flow map that skips CMT.
                let Model::Velocity(v) = &s.model else {
                    unreachable!()
                };
                let mut rng = LabRng::named(self.config.seed, "init-flow-map");
                let mut fresh =
                    TrainState::new(Model::FlowMap(FlowMapNet::from_teacher(v, &mut rng)?));
                fresh.history = s.history;
                fresh
            }
        };
        self.run_stage(
            stage,
            state,
            &cfg,
            teacher_net.as_ref(),
            Some(init.hash()?),
            observer,
        )
    }

    /// Metrics appended to the experiment's log, plus periodic checkpoints
    /// when the stage asks for them.
    pub fn stage_observer(&self, stage: Stage, parent: Option<String>) -> Result<FileObserver> {
        let dir = self.output_dir();
        fs::create_dir_all(dir)?;
        let periodic = match self.config.stage(stage)? {
            Some(cfg) if cfg.checkpoint_every > 0 => {
                let rng = LabRng::named(self.config.seed, stage.name());
                Some((
                    dir.to_path_buf(),
                    self.provenance(Some(stage), &rng, Some(&cfg), parent),
                ))
            }
            _ => None,
        };
        FileObserver::open(&dir.join(METRICS_FILE), periodic)
    }

    pub fn train_decoder(&self) -> Result<DecoderCheckpoint> {
        let cfg = self.config.decoder.clone().unwrap_or_default();
        let report = train_decoder(&self.raw, self.heldout.as_ref(), &self.encoder, &cfg)?;
        Ok(DecoderCheckpoint {
            format_version: FORMAT_VERSION,
            encoder: self.encoder.spec(),
            config: cfg,
            output_dim: self.raw.dim,
            params: arrays_from_params(report.decoder.params()),
            train_rmse: report.train_rmse,
            heldout_rmse: report.heldout_rmse,
            converged: report.converged,
        })
    }

    /// Reference set for sample metrics: held-out data when configured.
    pub fn reference(&self) -> &FiniteSupportDataset {
        self.heldout.as_ref().unwrap_or(&self.raw)
    }

    /// Teacher samples and flow-map samples for every configured NFE, all
    /// from the same noise, decoded and compared against the reference.
    pub fn evaluate(
        &self,
        teacher: &Checkpoint,
        map: &Checkpoint,
        decoder: Option<&DecoderNet>,
        out_dir: Option<&Path>,
    ) -> Result<Evaluation> {
        let s = &self.config.sampler;
        let mut rng = LabRng::named(self.config.seed, "evaluate");
        let classes = draw_classes(s.num_samples, None, &self.latent, &mut rng);
        let noise = rng.normal_tensor(s.num_samples, self.latent.dim);
        let reference = self.reference().atoms.clone();

        let score = |name: String, z: &crate::tensor::Tensor| -> Result<TwoSampleMetrics> {
            let x = decode_latents(z, &self.encoder, decoder)?;
            if let Some(dir) = out_dir {
                write_samples_csv(
                    File::create(dir.join(format!("samples_{name}.csv")))?,
                    "x",
                    &classes,
                    &x,
                )?;
            }
            two_sample_metrics(&x.to_rows(), &reference)
        };

        let teacher_net = teacher.velocity_net(s.use_ema)?;
        let z = sample_teacher(
            &teacher_net,
            &noise,
            &classes,
            s.teacher_steps,
            s.teacher_method,
        )?;
        let teacher_metrics = score(format!("teacher_{}", s.teacher_steps), &z)?;
        let map_net = map.flow_map(s.use_ema)?;
        let mut flow_map = Vec::new();
        for &nfe in &s.nfe {
            let z = sample_map(&map_net, &noise, &classes, nfe, s.two_step_midpoint)?;
            flow_map.push(NfeMetrics {
                nfe,
                metrics: score(format!("nfe{nfe}"), &z)?,
            });
        }
        Ok(Evaluation {
            reference: if self.heldout.is_some() {
                "heldout"
            } else {
                "train"
            }
            .into(),
            num_samples: s.num_samples,
            teacher: NfeMetrics {
                nfe: s.teacher_steps,
                metrics: teacher_metrics,
            },
            flow_map,
        })
    }

    /// Every configured stage in order, writing checkpoints, metrics, samples
    /// and the evaluation into the output directory. A stage without a
    /// section is skipped and its checkpoint is read from the directory.
    pub fn run_all(&self) -> Result<PipelineSummary> {
        let dir = self.output_dir().to_path_buf();
        let _lock = DirLock::acquire(&dir)?;
        let mut summary = PipelineSummary::default();

        let decoder = match &self.config.decoder {
            Some(_) => {
                let d = self.train_decoder()?;
                d.save(&dir.join(DECODER_FILE))?;
                Some(d.decoder()?)
            }
            None => None,
        };

        let mut run = |stage: Stage,
                       parent: Option<&Checkpoint>,
                       f: &dyn Fn(&mut dyn StageObserver) -> Result<(Checkpoint, StageReport)>|
         -> Result<Option<Checkpoint>> {
            let path = dir.join(checkpoint_file(stage));
            if self.config.stage(stage)?.is_none() {
                return if path.exists() {
                    Ok(Some(Checkpoint::load(&path)?))
                } else {
                    Ok(None)
                };
            }
            let parent = parent.map(|p| p.hash()).transpose()?;
            let mut obs = self.stage_observer(stage, parent)?;
            let result = f(&mut obs);
            obs.flush()?;
            let (ckpt, report) = result?;
            let hash = ckpt.save(&path)?;
            summary.stages.push(StageRecord {
                report,
                checkpoint: path,
                hash,
            });
            Ok(Some(ckpt))
        };
        let missing = |what: &str| -> Result<(Checkpoint, StageReport)> {
            Err(Error::Pipeline(what.to_string()))
        };

        let teacher = run(Stage::Pretrain, None, &|o| self.pretrain(None, o))?;
        let cmt = match &teacher {
            Some(t) => run(Stage::Cmt, Some(t), &|o| self.cmt(t, o))?,
            None => run(Stage::Cmt, None, &|_| missing("cmt needs a teacher"))?,
        };
        let mfd = match &cmt {
            Some(init) => run(Stage::Mfd, Some(init), &|o| {
                self.mf(Stage::Mfd, init, teacher.as_ref(), None, o)
            })?,
            None => run(Stage::Mfd, None, &|_| missing("mfd needs a CMT checkpoint"))?,
        };
        let mft_init = mfd.clone().or_else(|| cmt.clone());
        let mft = match &mft_init {
            Some(init) => run(Stage::Mft, Some(init), &|o| {
                self.mf(Stage::Mft, init, teacher.as_ref(), None, o)
            })?,
            None => run(Stage::Mft, None, &|_| {
                missing("mft needs a flow-map checkpoint")
            })?,
        };

        if let (Some(t), Some(map)) = (&teacher, mft.as_ref().or(mfd.as_ref()).or(cmt.as_ref())) {
            let eval = self.evaluate(t, map, decoder.as_ref(), Some(&dir))?;
            fs::write(
                dir.join(EVALUATION_FILE),
                serde_json::to_string_pretty(&eval)? + "\n",
            )?;
            summary.evaluation = Some(eval);
        }
        Ok(summary)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NfeMetrics {
    pub nfe: usize,
    pub metrics: TwoSampleMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub reference: String,
    pub num_samples: usize,
    pub teacher: NfeMetrics,
    pub flow_map: Vec<NfeMetrics>,
}

#[derive(Clone, Debug)]
pub struct StageRecord {
    pub report: StageReport,
    pub checkpoint: PathBuf,
    pub hash: String,
}

#[derive(Clone, Debug, Default)]
pub struct PipelineSummary {
    pub stages: Vec<StageRecord>,
    pub evaluation: Option<Evaluation>,
}
