use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mflab::analysis::{
    budget, fd_order_study, instability_summary, read_metrics, stratified_probes,
    two_sample_metrics, verify_prop1, BudgetSpec, FdProbes, VerifySettings,
};
use mflab::dataset::FiniteSupportDataset;
use mflab::pipeline::{
    checkpoint_file, decode_latents, draw_classes, read_samples_csv, sample_map, sample_teacher,
    write_samples_csv, Checkpoint, DecoderCheckpoint, DirLock, Experiment, ModelKind, DECODER_FILE,
    METRICS_FILE,
};
use mflab::rae::FrozenEncoder;
use mflab::rng::LabRng;
use mflab::solver::{solve_pfode, Method};
use mflab::training::{Stage, StageReport};
use mflab::Error;

/// Flow-map training laboratory: pre-training, consistency mid-training,
/// MeanFlow post-training and the numerical checks around them.
#[derive(Parser)]
#[command(name = "mflab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the flow-matching teacher.
    Pretrain(PretrainArgs),
    /// Initialize a flow map from the teacher and fit its trajectories.
    Cmt(CmtArgs),
    /// MeanFlow post-training (distillation or self-training).
    Mf(MfArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Evaluate the bias/variance decomposition of the MeanFlow loss.
    #[command(name = "verify-prop1")]
    VerifyProp1(VerifyArgs),
    /// Convergence of the finite-difference transport derivative.
    #[command(name = "fd-study")]
    FdStudy(FdStudyArgs),
    /// Sampling cost: decoder plus NFE backbone passes, in GFLOPS.
    Budget(BudgetArgs),
    /// Fit the decoder that maps latents back to data space.
    #[command(name = "decoder-train")]
    DecoderTrain(DecoderArgs),
    /// Summarize a metrics log or score a samples file.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// Resume from this velocity checkpoint instead of fresh weights.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Output checkpoint [default: <output_dir>/pretrain.ckpt.json].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CmtArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// Teacher checkpoint from `pretrain`.
    #[arg(long)]
    teacher: PathBuf,
    /// Output checkpoint [default: <output_dir>/cmt.ckpt.json].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MfStage {
    Mfd,
    Mft,
}

#[derive(Args)]
struct MfArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// Checkpoint to start from (normally the CMT output).
    #[arg(long)]
    init: PathBuf,
    /// Teacher checkpoint; required when lambda > 0.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Config section and stage tag to use.
    #[arg(long, value_enum, default_value = "mfd")]
    stage: MfStage,
    /// Mixing weight of the teacher velocity; overrides the config
    /// (1 distills, 0 self-trains).
    #[arg(long)]
    lambda: Option<f64>,
    /// Output checkpoint [default: <output_dir>/<stage>.ckpt.json].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Euler,
    Heun,
}

impl From<SolverArg> for Method {
    fn from(m: SolverArg) -> Self {
        match m {
            SolverArg::Euler => Method::Euler,
            SolverArg::Heun => Method::Heun,
        }
    }
}

#[derive(Args)]
struct SampleArgs {
    /// Velocity or flow-map checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of samples.
    #[arg(short, long, default_value_t = 1024)]
    n: usize,
    /// Network evaluations: flow-map jumps, or solver steps for a velocity
    /// model.
    #[arg(long, default_value_t = 1)]
    nfe: usize,
    /// Fixed class label; classes follow the dataset labels otherwise.
    #[arg(long)]
    class: Option<usize>,
    /// Seed for noise and class draws.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Intermediate time of the two-step sampler.
    #[arg(long, default_value_t = 0.5)]
    midpoint: f64,
    /// Solver for velocity checkpoints.
    #[arg(long, value_enum, default_value = "euler")]
    method: SolverArg,
    /// Use the online weights instead of the EMA weights.
    #[arg(long)]
    online: bool,
    /// Dataset JSON that supplies the class distribution, and the reference
    /// set for two-sample metrics printed to stdout.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Trained decoder; without one a linear lift is inverted exactly.
    #[arg(long)]
    decoder: Option<PathBuf>,
    /// Write latents instead of decoded samples.
    #[arg(long)]
    latent: bool,
    /// Samples CSV [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the latent solver path (velocity checkpoints only).
    #[arg(long)]
    trajectory: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Flow map being trained.
    #[arg(long)]
    online: PathBuf,
    /// Stop-gradient copy [default: the online checkpoint].
    #[arg(long)]
    target: Option<PathBuf>,
    /// Teacher velocity checkpoint.
    #[arg(long)]
    teacher: PathBuf,
    /// Dataset JSON in data space; it is encoded with the checkpoint's lift.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated mixing weights.
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    lambdas: Vec<f64>,
    /// Probes per (t, s) cell; there are 27 cells.
    #[arg(long, default_value_t = 3)]
    per_cell: usize,
    /// Seed for the probe draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// RK4 substeps for the exact flow map.
    #[arg(long, default_value_t = 512)]
    rk4_steps: usize,
    /// Step of the derivative stencil on the exact flow map.
    #[arg(long, default_value_t = 1e-4)]
    fd_step: f64,
    /// Use EMA weights for all three networks.
    #[arg(long)]
    ema: bool,
    /// Report JSON [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FdStudyArgs {
    /// Flow-map checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated decreasing step sizes.
    #[arg(long, value_delimiter = ',', default_value = "0.02,0.01,0.005,0.0025")]
    ladder: Vec<f64>,
    /// Number of random probes.
    #[arg(long, default_value_t = 64)]
    probes: usize,
    /// Probe times are drawn uniformly from [t_lo, t_hi].
    #[arg(long, default_value_t = 0.1)]
    t_lo: f64,
    #[arg(long, default_value_t = 0.9)]
    t_hi: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use the EMA weights.
    #[arg(long)]
    ema: bool,
    /// CSV [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BudgetArgs {
    /// Decoder cost in GFLOPS.
    decoder_gflops: Option<f64>,
    /// Backbone cost per evaluation in GFLOPS.
    backbone_gflops: Option<f64>,
    /// Number of backbone evaluations.
    nfe: Option<u32>,
    /// JSON file with decoder_gflops, backbone_gflops and nfe instead of
    /// positional arguments.
    #[arg(long, conflicts_with_all = ["decoder_gflops", "backbone_gflops", "nfe"])]
    spec: Option<PathBuf>,
}

#[derive(Args)]
struct DecoderArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// Output [default: <output_dir>/decoder.json].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    /// Training log to summarize.
    #[arg(long, required_unless_present = "samples")]
    log: Option<PathBuf>,
    /// Gradient norm counted as a spike.
    #[arg(long, default_value_t = 1e4)]
    threshold: f64,
    /// Consecutive spikes that count as divergence.
    #[arg(long, default_value_t = 10)]
    patience: usize,
    /// Samples CSV to score against --reference.
    #[arg(long, requires = "reference", conflicts_with = "log")]
    samples: Option<PathBuf>,
    /// Reference dataset JSON.
    #[arg(long)]
    reference: Option<PathBuf>,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Toml(_) => 2,
        Error::Divergence { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Pretrain(a) => pretrain(a),
        Command::Cmt(a) => cmt(a),
        Command::Mf(a) => mf(a),
        Command::Sample(a) => sample(a),
        Command::VerifyProp1(a) => verify(a),
        Command::FdStudy(a) => fd_study(a),
        Command::Budget(a) => budget_cmd(a),
        Command::DecoderTrain(a) => decoder_train(a),
        Command::Metrics(a) => metrics(a),
    }
}

fn output<'a>(path: &'a Option<PathBuf>) -> Result<Box<dyn Write + 'a>, Error> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Error> {
    Checkpoint::load(path)
}

/// Runs one training stage under the directory lock and saves the result.
fn train(
    exp: &Experiment,
    stage: Stage,
    parent: Option<&Checkpoint>,
    out: Option<PathBuf>,
    body: impl FnOnce(&mut mflab::pipeline::FileObserver) -> Result<(Checkpoint, StageReport), Error>,
) -> Result<(), Error> {
    let _lock = DirLock::acquire(exp.output_dir())?;
    let parent = parent.map(|p| p.hash()).transpose()?;
    let mut obs = exp.stage_observer(stage, parent)?;
    let result = body(&mut obs);
    obs.flush()?;
    let (ckpt, report) = match result {
        Err(e @ Error::Divergence { .. }) => {
            eprintln!(
                "telemetry: {}",
                exp.output_dir().join(METRICS_FILE).display()
            );
            return Err(e);
        }
        other => other?,
    };
    let path = out.unwrap_or_else(|| exp.output_dir().join(checkpoint_file(stage)));
    let hash = ckpt.save(&path)?;
    println!(
        "{stage}: {} iterations, final loss {}, max grad norm {:.3e}, {} spikes",
        report.iterations,
        report
            .final_loss
            .map(|l| format!("{l:.6e}"))
            .unwrap_or_else(|| "n/a".into()),
        report.max_grad_norm,
        report.spikes
    );
    println!("wrote {} (sha256 {hash})", path.display());
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<(), Error> {
    let exp = Experiment::load(&a.cfg.config)?;
    let init = a.init.as_deref().map(load_checkpoint).transpose()?;
    train(&exp, Stage::Pretrain, init.as_ref(), a.out, |o| {
        exp.pretrain(init.as_ref(), o)
    })
}

fn cmt(a: CmtArgs) -> Result<(), Error> {
    let exp = Experiment::load(&a.cfg.config)?;
    let teacher = load_checkpoint(&a.teacher)?;
    train(&exp, Stage::Cmt, Some(&teacher), a.out, |o| {
        exp.cmt(&teacher, o)
    })
}

fn mf(a: MfArgs) -> Result<(), Error> {
    let exp = Experiment::load(&a.cfg.config)?;
    let stage = match a.stage {
        MfStage::Mfd => Stage::Mfd,
        MfStage::Mft => Stage::Mft,
    };
    let init = load_checkpoint(&a.init)?;
    let teacher = a.teacher.as_deref().map(load_checkpoint).transpose()?;
    train(&exp, stage, Some(&init), a.out, |o| {
        exp.mf(stage, &init, teacher.as_ref(), a.lambda, o)
    })
}

fn sample(a: SampleArgs) -> Result<(), Error> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let encoder = FrozenEncoder::new(ckpt.encoder)?;
    let data = a
        .data
        .as_deref()
        .map(FiniteSupportDataset::load)
        .transpose()?;
    let num_classes = ckpt.network.num_classes;
    if let Some(c) = a.class {
        if c >= num_classes {
            return Err(Error::Config(format!(
                "class {c} out of range (num_classes = {num_classes})"
            )));
        }
    }
    let mut rng = LabRng::named(a.seed, "sample");
    let classes = match (&data, a.class) {
        (Some(d), c) => draw_classes(a.n, c, d, &mut rng),
        (None, Some(c)) => vec![c; a.n],
        (None, None) => (0..a.n).map(|_| rng.index(num_classes)).collect(),
    };
    let noise = rng.normal_tensor(a.n, ckpt.network.data_dim);
    let z = match ckpt.kind {
        ModelKind::Velocity => {
            let net = ckpt.velocity_net(!a.online)?;
            if let Some(p) = &a.trajectory {
                if a.n > 0 {
                    let traj =
                        solve_pfode(&net, &noise, &classes, 1.0, 0.0, a.nfe, a.method.into())?;
                    traj.write_csv(BufWriter::new(File::create(p)?))?;
                }
            }
            sample_teacher(&net, &noise, &classes, a.nfe, a.method.into())?
        }
        ModelKind::FlowMap => {
            if a.trajectory.is_some() {
                return Err(Error::Config(
                    "--trajectory needs a velocity checkpoint".into(),
                ));
            }
            sample_map(
                &ckpt.flow_map(!a.online)?,
                &noise,
                &classes,
                a.nfe,
                a.midpoint,
            )?
        }
    };
    let (x, prefix) = if a.latent {
        (z, "z")
    } else {
        let decoder = match &a.decoder {
            Some(p) => {
                let d = DecoderCheckpoint::load(p)?;
                if d.encoder != ckpt.encoder {
                    return Err(Error::Config(
                        "decoder was trained for a different encoder".into(),
                    ));
                }
                Some(d.decoder()?)
            }
            None => None,
        };
        (decode_latents(&z, &encoder, decoder.as_ref())?, "x")
    };
    write_samples_csv(output(&a.out)?, prefix, &classes, &x)?;
    if let (Some(d), Some(_)) = (&data, &a.out) {
        let reference = if a.latent {
            encoder.encode_dataset(d)?.atoms
        } else {
            d.atoms.clone()
        };
        let m = two_sample_metrics(&x.to_rows(), &reference)?;
        println!("{}", serde_json::to_string_pretty(&m)?);
    }
    Ok(())
}

fn verify(a: VerifyArgs) -> Result<(), Error> {
    let online_ckpt = load_checkpoint(&a.online)?;
    let target_ckpt = match &a.target {
        Some(p) => load_checkpoint(p)?,
        None => online_ckpt.clone(),
    };
    let teacher_ckpt = load_checkpoint(&a.teacher)?;
    for c in [&target_ckpt, &teacher_ckpt] {
        if c.encoder != online_ckpt.encoder || c.schedule != online_ckpt.schedule {
            return Err(Error::Config(
                "checkpoints disagree on encoder or schedule".into(),
            ));
        }
    }
    let encoder = FrozenEncoder::new(online_ckpt.encoder)?;
    let latent = encoder.encode_dataset(&FiniteSupportDataset::load(&a.data)?)?;
    let schedule = online_ckpt.schedule;
    let probes = stratified_probes(&latent, schedule, a.per_cell, a.seed)?;
    let report = verify_prop1(
        &online_ckpt.flow_map(a.ema)?,
        &target_ckpt.flow_map(a.ema)?,
        &teacher_ckpt.velocity_net(a.ema)?,
        &latent,
        schedule,
        &a.lambdas,
        &probes,
        VerifySettings {
            rk4_steps: a.rk4_steps,
            fd_step: a.fd_step,
        },
    )?;
    let mut out = output(&a.out)?;
    out.write_all(report.to_json()?.as_bytes())?;
    out.write_all(b"\n")?;
    out.flush()?;
    if a.out.is_some() {
        for s in &report.summary {
            println!(
                "lambda {:<5} lhs {:.6e}  bias {:.6e}  variance {:.6e}  max |residual| {:.2e}  max |cross| {:.2e}",
                s.lambda, s.mean_lhs, s.mean_bias, s.mean_variance, s.max_abs_residual, s.max_abs_cross
            );
        }
    }
    Ok(())
}

fn fd_study(a: FdStudyArgs) -> Result<(), Error> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let net = ckpt.flow_map(a.ema)?;
    let cfg = net.config().clone();
    let mut rng = LabRng::named(a.seed, "fd-study");
    let probes = FdProbes::random(
        a.probes,
        cfg.data_dim,
        cfg.num_classes,
        (a.t_lo, a.t_hi),
        &mut rng,
    );
    let study = fd_order_study(&net, &probes, &a.ladder)?;
    study.write_csv(output(&a.out)?)?;
    Ok(())
}

fn budget_cmd(a: BudgetArgs) -> Result<(), Error> {
    let spec = match (a.spec, a.decoder_gflops, a.backbone_gflops, a.nfe) {
        (Some(p), ..) => serde_json::from_str(&fs::read_to_string(p)?)
            .map_err(|e| Error::Config(format!("budget spec: {e}")))?,
        (None, Some(d), Some(b), Some(n)) => BudgetSpec {
            decoder_gflops: d,
            backbone_gflops: b,
            nfe: n,
        },
        _ => {
            return Err(Error::Config(
                "give DECODER_GFLOPS BACKBONE_GFLOPS NFE or --spec".into(),
            ))
        }
    };
    println!("{}", budget(&spec)?);
    Ok(())
}

fn decoder_train(a: DecoderArgs) -> Result<(), Error> {
    let exp = Experiment::load(&a.cfg.config)?;
    let _lock = DirLock::acquire(exp.output_dir())?;
    let d = exp.train_decoder()?;
    let path = a.out.unwrap_or_else(|| exp.output_dir().join(DECODER_FILE));
    d.save(&path)?;
    println!(
        "decoder: train rmse {:.3e}, held-out rmse {:.3e}, converged {}",
        d.train_rmse, d.heldout_rmse, d.converged
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn metrics(a: MetricsArgs) -> Result<(), Error> {
    if let Some(p) = &a.samples {
        let (_, rows) = read_samples_csv(File::open(p)?)?;
        let reference =
            FiniteSupportDataset::load(a.reference.as_deref().unwrap_or(Path::new("")))?;
        let m = two_sample_metrics(&rows, &reference.atoms)?;
        println!("{}", serde_json::to_string_pretty(&m)?);
        return Ok(());
    }
    let log = a.log.as_deref().unwrap_or(Path::new(""));
    let rows = read_metrics(File::open(log)?)?;
    let report = instability_summary(&rows, a.threshold, a.patience);
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
