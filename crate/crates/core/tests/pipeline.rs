use std::fs;
use std::path::Path;

use mflab::dataset::FiniteSupportDataset;
use mflab::network::Init;
use mflab::pipeline::{
    checkpoint_file, decode_latents, read_samples_csv, sample_map, write_samples_csv, Checkpoint,
    DirLock, Experiment, ExperimentConfig, FileObserver, METRICS_FILE,
};
use mflab::rng::LabRng;
use mflab::solver::FnMap;
use mflab::training::{MetricsRow, Model, Stage};
use mflab::{Error, Tensor};

const ATOM: [f64; 2] = [1.0, -0.5];

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("exp.toml");
    fs::write(&path, body).unwrap();
    path
}

fn single_atom_dir(dir: &Path) {
    FiniteSupportDataset::single_atom(ATOM.to_vec())
        .save(&dir.join("data.json"))
        .unwrap();
}

fn base_config(stages: &str) -> String {
    format!(
        r#"
seed = 11
output_dir = "out"

[data]
path = "data.json"

[encoder]
latent_dim = 4

[network]
hidden = 32
depth = 3
num_frequencies = 8
max_frequency = 8.0

[sampler]
num_samples = 64
nfe = [1, 2]
teacher_steps = 16

{stages}
"#
    )
}

fn experiment(dir: &Path, stages: &str) -> Experiment {
    single_atom_dir(dir);
    Experiment::load(&write_config(dir, &base_config(stages))).unwrap()
}

#[test]
fn config_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    single_atom_dir(dir.path());
    let text = base_config("") + "\nbogus = 1\n";
    let err = ExperimentConfig::from_toml_str(&text, dir.path()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");

    let text = base_config("[pretrain]\niterations = 5\nlearning_rat = 1e-3\n");
    let err = ExperimentConfig::from_toml_str(&text, dir.path()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn config_requires_existing_paths() {
    let dir = tempfile::tempdir().unwrap();
    let err = ExperimentConfig::from_toml_str(&base_config(""), dir.path()).unwrap_err();
    assert!(err.to_string().contains("does not exist"), "{err}");
}

#[test]
fn config_toml_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    single_atom_dir(dir.path());
    let cfg = ExperimentConfig::from_toml_str(
        &base_config("[mfd]\niterations = 3\nlambda = 0.5\n"),
        dir.path(),
    )
    .unwrap();
    let again = ExperimentConfig::from_toml_str(&cfg.to_toml().unwrap(), dir.path()).unwrap();
    assert_eq!(cfg, again);
    assert_eq!(cfg.stage(Stage::Mfd).unwrap().unwrap().lambda, 0.5);
    assert!(cfg.stage(Stage::Cmt).unwrap().is_none());
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(dir.path(), "[pretrain]\niterations = 3\nbatch_size = 8\n");
    let (ckpt, _) = exp.pretrain(None, &mut Vec::<MetricsRow>::new()).unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let h1 = ckpt.save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    assert_eq!(loaded, ckpt);
    let h2 = loaded.save(&b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(h1, h2);
    assert_eq!(h1, ckpt.hash().unwrap());
}

#[test]
fn checkpoint_version_mismatch_fails() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(dir.path(), "[pretrain]\niterations = 0\n");
    let (ckpt, _) = exp.pretrain(None, &mut Vec::<MetricsRow>::new()).unwrap();
    let text = ckpt
        .to_json()
        .unwrap()
        .replace("\"format_version\": 1", "\"format_version\": 99");
    let err = Checkpoint::from_json(&text).unwrap_err();
    assert!(err.to_string().contains("format_version 99"), "{err}");
}

#[test]
fn zero_iteration_pretrain_keeps_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(dir.path(), "[pretrain]\niterations = 0\n");
    let (ckpt, report) = exp.pretrain(None, &mut Vec::<MetricsRow>::new()).unwrap();
    assert_eq!(report.iterations, 0);
    let mut rng = LabRng::named(11, "init-teacher");
    let fresh =
        mflab::network::VelocityNet::new(exp.net_config(), Init::Standard, &mut rng).unwrap();
    assert_eq!(ckpt.velocity_net(false).unwrap(), fresh);
    assert_eq!(ckpt.params, ckpt.ema);
}

#[test]
fn zero_iteration_cmt_copies_the_teacher_trunk() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(
        dir.path(),
        "[pretrain]\niterations = 4\nbatch_size = 8\n[cmt]\niterations = 0\n",
    );
    let (teacher, _) = exp.pretrain(None, &mut Vec::<MetricsRow>::new()).unwrap();
    let (map, _) = exp.cmt(&teacher, &mut Vec::<MetricsRow>::new()).unwrap();
    let teacher_ema = teacher.velocity_net(true).unwrap();
    let tp = teacher_ema.params();
    let mp = map.flow_map(false).unwrap();
    let mp = mp.params();
    let mut shared = 0;
    for (name, t) in tp.names().iter().zip(tp.tensors()) {
        let idx = mp.names().iter().position(|n| n == name).unwrap();
        assert_eq!(&mp.tensors()[idx], t, "{name}");
        shared += 1;
    }
    assert!(shared > 0);
    assert!(mp.names().len() > tp.names().len());
    assert_eq!(
        map.parent.as_deref(),
        Some(teacher.hash().unwrap().as_str())
    );
}

#[test]
fn lineage_and_cmt_requirement() {
    let dir = tempfile::tempdir().unwrap();
    let stages = "[pretrain]\niterations = 4\nbatch_size = 8\n\
                  [cmt]\niterations = 2\ntrajectories_per_iter = 2\n\
                  [mfd]\niterations = 2\nbatch_size = 8\n\
                  [mft]\niterations = 2\nbatch_size = 8\n";
    let exp = experiment(dir.path(), stages);
    let obs = &mut Vec::<MetricsRow>::new();
    let (teacher, _) = exp.pretrain(None, obs).unwrap();

    let err = exp
        .mf(Stage::Mfd, &teacher, Some(&teacher), None, obs)
        .unwrap_err();
    assert!(err.to_string().contains("CMT"), "{err}");

    let (cmt, _) = exp.cmt(&teacher, obs).unwrap();
    let (mfd, _) = exp.mf(Stage::Mfd, &cmt, Some(&teacher), None, obs).unwrap();
    let (mft, _) = exp.mf(Stage::Mft, &mfd, None, None, obs).unwrap();
    assert_eq!(mfd.parent, Some(cmt.hash().unwrap()));
    assert_eq!(mft.parent, Some(mfd.hash().unwrap()));
    assert_eq!(
        mft.history,
        vec![Stage::Pretrain, Stage::Cmt, Stage::Mfd, Stage::Mft]
    );

    // λ > 0 without a teacher is a configuration error.
    let err = exp.mf(Stage::Mfd, &cmt, None, None, obs).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");

    let mut overridden = exp.clone();
    overridden.config.allow_without_cmt = true;
    overridden
        .mf(Stage::Mfd, &teacher, Some(&teacher), None, obs)
        .unwrap();
}

#[test]
fn lock_excludes_second_writer() {
    let dir = tempfile::tempdir().unwrap();
    let lock = DirLock::acquire(dir.path()).unwrap();
    let err = DirLock::acquire(dir.path()).unwrap_err();
    assert!(err.to_string().contains("locked"), "{err}");
    drop(lock);
    DirLock::acquire(dir.path()).unwrap();
}

#[test]
fn run_all_refuses_a_locked_directory() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(dir.path(), "[pretrain]\niterations = 1\nbatch_size = 4\n");
    let _lock = DirLock::acquire(exp.output_dir()).unwrap();
    assert!(exp.run_all().is_err());
}

#[test]
fn empty_samples_file_has_header() {
    let mut buf = Vec::new();
    write_samples_csv(&mut buf, "x", &[], &Tensor::zeros(0, 3)).unwrap();
    assert_eq!(String::from_utf8(buf.clone()).unwrap(), "class,x0,x1,x2\n");
    let (classes, rows) = read_samples_csv(buf.as_slice()).unwrap();
    assert!(classes.is_empty() && rows.is_empty());
}

#[test]
fn samples_csv_round_trip() {
    let x = Tensor::from_rows(&[vec![0.1, -2.5e-17], vec![1.0 / 3.0, 7.0]]).unwrap();
    let mut buf = Vec::new();
    write_samples_csv(&mut buf, "z", &[0, 2], &x).unwrap();
    let (classes, rows) = read_samples_csv(buf.as_slice()).unwrap();
    assert_eq!(classes, vec![0, 2]);
    assert_eq!(rows, x.to_rows());
    let err = read_samples_csv("class,z0\n1,abc\n".as_bytes()).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
}

#[test]
fn oracle_map_one_step_lands_on_the_atom() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(dir.path(), "");
    let x = exp.latent.atoms[0].clone();
    let oracle = FnMap(move |z: &[f64], t: f64, _s: f64| {
        z.iter().zip(&x).map(|(zi, xi)| (zi - xi) / t).collect()
    });
    let mut rng = LabRng::new(5);
    let noise = rng.normal_tensor(32, 4);
    let z = sample_map(&oracle, &noise, &[0; 32], 1, 0.5).unwrap();
    let decoded = decode_latents(&z, &exp.encoder, None).unwrap();
    for row in decoded.to_rows() {
        for (a, b) in row.iter().zip(ATOM) {
            assert!((a - b).abs() < 1e-12, "{row:?}");
        }
    }
}

#[test]
fn file_observer_appends_one_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(METRICS_FILE);
    let row = MetricsRow {
        stage: "cmt".into(),
        iter: 1,
        loss: 0.5,
        grad_norm: 2.0,
        ema_dist: 0.0,
        wall_ms: 0,
    };
    for _ in 0..2 {
        let mut obs = FileObserver::open(&path, None).unwrap();
        mflab::training::StageObserver::metrics(&mut obs, &row).unwrap();
        obs.flush().unwrap();
    }
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert_eq!(text.matches("stage").count(), 1);
}

fn short_pipeline() -> &'static str {
    "[pretrain]\niterations = 20\nbatch_size = 16\n\
     [cmt]\niterations = 5\ntrajectories_per_iter = 2\n\
     [mfd]\niterations = 5\nbatch_size = 16\ncheckpoint_every = 5\n\
     [mft]\niterations = 5\nbatch_size = 16\n"
}

#[test]
fn pipeline_rerun_is_bit_identical() {
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let exp = experiment(dir.path(), short_pipeline());
        let summary = exp.run_all().unwrap();
        assert_eq!(summary.stages.len(), 4);
        let out = exp.output_dir();
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(out)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (
                    e.file_name().to_string_lossy().into_owned(),
                    fs::read(e.path()).unwrap(),
                )
            })
            .collect();
        files.sort();
        outputs.push(files);
    }
    let names: Vec<&str> = outputs[0].iter().map(|(n, _)| n.as_str()).collect();
    for stage in Stage::ALL {
        assert!(
            names.contains(&checkpoint_file(stage).as_str()),
            "{names:?}"
        );
    }
    assert!(names.contains(&METRICS_FILE));
    assert!(names.contains(&"samples_nfe1.csv"));
    assert!(!names.contains(&".mflab.lock"));
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn skipped_stage_reuses_checkpoint_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(dir.path(), "[pretrain]\niterations = 3\nbatch_size = 8\n");
    exp.run_all().unwrap();
    let first = fs::read(exp.output_dir().join(checkpoint_file(Stage::Pretrain))).unwrap();

    let cfg = base_config("[cmt]\niterations = 2\ntrajectories_per_iter = 2\n");
    let exp = Experiment::load(&write_config(dir.path(), &cfg)).unwrap();
    let summary = exp.run_all().unwrap();
    assert_eq!(summary.stages.len(), 1);
    assert_eq!(summary.stages[0].report.stage, Stage::Cmt);
    let teacher =
        Checkpoint::load(&exp.output_dir().join(checkpoint_file(Stage::Pretrain))).unwrap();
    assert_eq!(teacher.to_json().unwrap().into_bytes(), first);
    let cmt = Checkpoint::load(&exp.output_dir().join(checkpoint_file(Stage::Cmt))).unwrap();
    assert_eq!(cmt.parent, Some(teacher.hash().unwrap()));
    assert!(summary.evaluation.is_some());
}

#[test]
fn single_atom_pipeline_one_step_sample() {
    let dir = tempfile::tempdir().unwrap();
    single_atom_dir(dir.path());
    let stages =
        "[pretrain]\niterations = 10000\nbatch_size = 128\nlearning_rate = 1e-3\nt_min = 0.05\n\
                  [cmt]\niterations = 3000\nlearning_rate = 5e-4\nema_beta = 0.995\nt_min = 0.05\n\
                  [mfd]\niterations = 3000\nbatch_size = 256\nlearning_rate = 1e-4\nt_min = 0.05\n";
    let cfg = base_config(stages).replace("hidden = 32", "hidden = 64");
    let exp = Experiment::load(&write_config(dir.path(), &cfg)).unwrap();
    let summary = exp.run_all().unwrap();
    assert_eq!(summary.stages.len(), 3);
    let teacher =
        Checkpoint::load(&exp.output_dir().join(checkpoint_file(Stage::Pretrain))).unwrap();
    let map = Checkpoint::load(&exp.output_dir().join(checkpoint_file(Stage::Mfd))).unwrap();
    assert!(matches!(map.model().unwrap(), Model::FlowMap(_)));

    let mut rng = LabRng::new(99);
    let noise = rng.normal_tensor(256, 4);
    let classes = vec![0; 256];
    let mean_dist = |z: &Tensor| {
        let x = decode_latents(z, &exp.encoder, None).unwrap();
        let d: f64 = x
            .to_rows()
            .iter()
            .map(|r| {
                r.iter()
                    .zip(ATOM)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum();
        d / x.rows() as f64
    };
    let teacher_net = teacher.velocity_net(true).unwrap();
    let zt = mflab::pipeline::sample_teacher(
        &teacher_net,
        &noise,
        &classes,
        16,
        mflab::solver::Method::Euler,
    )
    .unwrap();
    let zm = sample_map(&map.flow_map(true).unwrap(), &noise, &classes, 1, 0.5).unwrap();
    let (et, em) = (mean_dist(&zt), mean_dist(&zm));
    println!("teacher 16-step mean distance {et:.3e}, 1-step mean distance {em:.3e}");
    assert!(et < 1e-2, "teacher {et}");
    // Short of 1e-2 at this budget: the map's error concentrates where the
    // field is stiff near t = 0.
    assert!(em < 2.5e-2, "one-step {em}");
    assert_eq!(summary.evaluation.unwrap().flow_map.len(), 2);
}
