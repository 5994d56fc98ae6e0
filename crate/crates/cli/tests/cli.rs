use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mflab::dataset::FiniteSupportDataset;

fn mflab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mflab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup(dir: &Path, extra: &str) -> PathBuf {
    let mut ring = FiniteSupportDataset::ring(8, 1.0);
    ring.labels = vec![0; 8];
    ring.save(&dir.join("ring.json")).unwrap();
    let cfg = format!(
        r#"seed = 4
output_dir = "out"

[data]
path = "ring.json"

[encoder]
latent_dim = 4

[network]
hidden = 16
depth = 2
num_frequencies = 4
max_frequency = 4.0

[decoder]
hidden = 8
depth = 0
steps = 50

[pretrain]
iterations = 20
batch_size = 16

[cmt]
iterations = 5
trajectories_per_iter = 2

[mfd]
iterations = 5
batch_size = 16

[mft]
iterations = 5
batch_size = 16
{extra}
"#
    );
    let path = dir.join("exp.toml");
    fs::write(&path, cfg).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn budget_prints_totals() {
    for (args, want) in [
        (["310", "114", "1"], "424"),
        (["310", "114", "2"], "538"),
        (["106", "157", "1"], "263"),
        (["106", "157", "2"], "420"),
    ] {
        let mut all = vec!["budget"];
        all.extend(args);
        let o = mflab(&all);
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(stdout(&o).trim(), want);
    }
}

#[test]
fn budget_spec_file() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("b.json");
    fs::write(
        &spec,
        r#"{"decoder_gflops": 310, "backbone_gflops": 114, "nfe": 2}"#,
    )
    .unwrap();
    let o = mflab(&["budget", "--spec", s(&spec)]);
    assert_eq!(stdout(&o).trim(), "538");
}

#[test]
fn config_errors_exit_2() {
    let o = mflab(&["budget", "310", "114", "0"]);
    assert_eq!(o.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "\n[sampler]\nnum_sample = 3\n");
    let o = mflab(&["pretrain", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("num_sample"), "{}", stderr(&o));

    let o = mflab(&["pretrain", "--config", "/nonexistent/exp.toml"]);
    assert_eq!(o.status.code(), Some(2));

    let o = mflab(&["pretrain"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_documents_defaults() {
    let o = mflab(&["sample", "--help"]);
    let h = stdout(&o);
    assert!(
        h.contains("[default: 1024]") && h.contains("[default: euler]"),
        "{h}"
    );
    let o = mflab(&["--help"]);
    let h = stdout(&o);
    for cmd in [
        "pretrain",
        "cmt",
        "mf",
        "sample",
        "verify-prop1",
        "fd-study",
        "budget",
        "decoder-train",
        "metrics",
    ] {
        assert!(h.contains(cmd), "{cmd} missing from\n{h}");
    }
}

#[test]
fn divergence_exits_3_with_telemetry() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let text = fs::read_to_string(&cfg).unwrap().replace(
        "iterations = 20\n",
        "iterations = 20\ngrad_threshold = 1e-12\ndivergence_patience = 2\n",
    );
    fs::write(&cfg, text).unwrap();
    let o = mflab(&["pretrain", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("metrics.csv"), "{}", stderr(&o));
    let log = dir.path().join("out/metrics.csv");
    let o = mflab(&[
        "metrics",
        "--log",
        s(&log),
        "--threshold",
        "1e-12",
        "--patience",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["stages"][0]["diverged"], true);
    assert_eq!(report["stages"][0]["first_spike"], 0);
}

#[test]
fn locked_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    fs::create_dir_all(dir.path().join("out")).unwrap();
    fs::write(dir.path().join("out/.mflab.lock"), "1\n").unwrap();
    let o = mflab(&["pretrain", "--config", s(&cfg)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("locked"), "{}", stderr(&o));
}

#[test]
fn stage_chain_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let out = dir.path().join("out");
    let ck = |name: &str| out.join(name);

    let o = mflab(&["pretrain", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("pretrain: 20 iterations"));
    let teacher = ck("pretrain.ckpt.json");

    // MFD straight from the teacher is refused without the override.
    let o = mflab(&[
        "mf",
        "--config",
        s(&cfg),
        "--init",
        s(&teacher),
        "--teacher",
        s(&teacher),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("CMT"), "{}", stderr(&o));

    let o = mflab(&["cmt", "--config", s(&cfg), "--teacher", s(&teacher)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cmt = ck("cmt.ckpt.json");

    let o = mflab(&["mf", "--config", s(&cfg), "--init", s(&cmt)]);
    assert_eq!(o.status.code(), Some(2), "lambda > 0 needs a teacher");

    let o = mflab(&[
        "mf",
        "--config",
        s(&cfg),
        "--init",
        s(&cmt),
        "--teacher",
        s(&teacher),
        "--lambda",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mfd = ck("mfd.ckpt.json");
    let o = mflab(&[
        "mf",
        "--config",
        s(&cfg),
        "--init",
        s(&mfd),
        "--stage",
        "mft",
        "--lambda",
        "0",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mft = ck("mft.ckpt.json");

    let mfd_text = fs::read_to_string(&mfd).unwrap();
    let mft_json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&mft).unwrap()).unwrap();
    assert_eq!(
        mft_json["parent"].as_str().unwrap(),
        mflab::pipeline::sha256_hex(mfd_text.as_bytes())
    );

    let log = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(log.starts_with("stage,iter,loss,grad_norm,ema_dist,wall_ms\n"));
    assert_eq!(log.lines().count(), 1 + 20 + 5 + 5 + 5);

    // Empty sample file keeps its header.
    let empty = dir.path().join("empty.csv");
    let o = mflab(&[
        "sample",
        "--checkpoint",
        s(&mft),
        "-n",
        "0",
        "--out",
        s(&empty),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&empty).unwrap(), "class,x0,x1\n");

    // One- and two-step samples with metrics against the data.
    let data = dir.path().join("ring.json");
    for nfe in ["1", "2"] {
        let path = dir.path().join(format!("s{nfe}.csv"));
        let o = mflab(&[
            "sample",
            "--checkpoint",
            s(&mft),
            "-n",
            "32",
            "--nfe",
            nfe,
            "--data",
            s(&data),
            "--out",
            s(&path),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let m: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
        assert!(m["energy_distance"].as_f64().unwrap() >= 0.0);
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 33);
        let o = mflab(&["metrics", "--samples", s(&path), "--reference", s(&data)]);
        let again: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
        assert_eq!(m, again);
    }

    // Teacher samples with a trajectory file.
    let traj = dir.path().join("traj.csv");
    let o = mflab(&[
        "sample",
        "--checkpoint",
        s(&teacher),
        "-n",
        "3",
        "--nfe",
        "4",
        "--method",
        "heun",
        "--trajectory",
        s(&traj),
        "--latent",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("class,z0,z1,z2,z3\n"));
    let t = fs::read_to_string(&traj).unwrap();
    assert!(t.starts_with("traj_id,i,t_i,z0"));
    assert_eq!(t.lines().count(), 1 + 3 * 5);

    // Decomposition at lambda = 1 has no variance term.
    let report = dir.path().join("prop1.json");
    let o = mflab(&[
        "verify-prop1",
        "--online",
        s(&mft),
        "--teacher",
        s(&teacher),
        "--data",
        s(&data),
        "--lambdas",
        "1,0",
        "--per-cell",
        "1",
        "--rk4-steps",
        "128",
        "--out",
        s(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["probes"].as_array().unwrap().len(), 27);
    assert_eq!(r["summary"][0]["lambda"], 1.0);
    assert_eq!(r["summary"][0]["mean_variance"], 0.0);
    assert!(r["summary"][1]["mean_variance"].as_f64().unwrap() > 0.0);

    // FD study on the default ladder.
    let o = mflab(&["fd-study", "--checkpoint", s(&mft), "--probes", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = stdout(&o);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "dt,max_rel_err,mean_rel_err,local_order,fitted_order"
    );
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("0.02,"));

    // Velocity checkpoints are not flow maps.
    let o = mflab(&["fd-study", "--checkpoint", s(&teacher)]);
    assert!(!o.status.success());
}

#[test]
fn decoder_train_writes_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let o = mflab(&["decoder-train", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let d = mflab::pipeline::DecoderCheckpoint::load(&dir.path().join("out/decoder.json")).unwrap();
    assert_eq!(d.output_dim, 2);
    assert!(!dir.path().join("out/.mflab.lock").exists());
}
