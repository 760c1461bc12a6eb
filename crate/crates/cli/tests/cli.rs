use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::process::{Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_relu-qsgd");

fn cli(out: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("RELU_QSGD_SEED")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, json: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, json).unwrap();
    path.to_str().unwrap().to_string()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

/// Trace rows without the wall-clock column.
fn trace_rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn gen_data_writes_the_documented_size_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let status = cli(out, &["--seed", "4", "--n", "100", "--d", "10", "gen-data"]);
        assert!(
            status.status.success(),
            "{}",
            String::from_utf8_lossy(&status.stderr)
        );
    }
    assert_eq!(
        std::fs::metadata(a.join("dataset.bin")).unwrap().len(),
        30 + 8 * (10 + 1000 + 100)
    );
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_eq!(ma["artifacts"][0]["sha256"], mb["artifacts"][0]["sha256"]);
    assert_eq!(ma["seed"], 4);
}

#[test]
fn zero_samples_is_a_validation_error_with_no_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(dir.path(), &["--n", "0", "--d", "10", "gen-data"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset.n"));
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"run": {"batch": 8, "learning_rate": 0.1}}"#);
    let out = cli(dir.path(), &["--config", &cfg, "train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn empty_phase_grid_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"phase": {"d_values": []}}"#);
    let out = cli(dir.path(), &["--config", &cfg, "phase"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("phase.csv").exists());
}

#[test]
fn seed_flag_beats_environment_beats_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"seed": 3, "dataset": {"n": 20, "d": 4}}"#);
    let run = |extra: &[&str], env: Option<&str>| {
        let mut cmd = Command::new(BIN);
        cmd.arg("--out")
            .arg(dir.path())
            .args(["--config", &cfg])
            .args(extra)
            .arg("gen-data");
        cmd.env_remove("RELU_QSGD_SEED");
        if let Some(v) = env {
            cmd.env("RELU_QSGD_SEED", v);
        }
        assert!(cmd.output().unwrap().status.success());
        manifest(dir.path())["seed"].as_u64().unwrap()
    };
    assert_eq!(run(&[], None), 3);
    assert_eq!(run(&[], Some("5")), 5);
    assert_eq!(run(&["--seed", "7"], Some("5")), 7);
}

#[test]
fn divergence_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"dataset": {"n": 200, "d": 10}, "run": {"batch": 8, "step": {"explicit": 1e6}, "max_iters": 200}}"#,
    );
    let out = cli(dir.path(), &["--config", &cfg, "train"]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
}

#[test]
fn worker_without_master_is_a_transport_error() {
    let dir = tempfile::tempdir().unwrap();
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    drop(listener);
    let out = cli(
        dir.path(),
        &[
            "--n",
            "20",
            "--d",
            "4",
            "dist-worker",
            "--connect",
            &addr,
            "--id",
            "0",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("worker 0"));
}

#[test]
fn paper_preset_reaches_the_target() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(
        dir.path(),
        &["--preset", "fig1a-m800", "--seed", "1", "train"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    let last = csv.lines().last().unwrap();
    let rel_err: f64 = last.split(',').nth(1).unwrap().parse().unwrap();
    assert!(rel_err < 1e-3, "{last}");
}

#[test]
fn separate_worker_processes_match_local_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"seed": 21, "dataset": {"n": 400, "d": 20}, "run": {"scheme": "qsgd", "batch": 16, "workers": 2, "bits": 6, "max_iters": 40}}"#,
    );
    let local = dir.path().join("local");
    let out = cli(&local, &["--config", &cfg, "train"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let remote = dir.path().join("remote");
    let mut master = Command::new(BIN)
        .arg("--out")
        .arg(&remote)
        .args(["--config", &cfg, "dist-master", "--listen", "127.0.0.1:0"])
        .env_remove("RELU_QSGD_SEED")
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdout = BufReader::new(master.stdout.take().unwrap());
    let mut line = String::new();
    stdout.read_line(&mut line).unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .expect("address line")
        .to_string();
    let workers: Vec<_> = (0..2)
        .map(|id| {
            Command::new(BIN)
                .arg("--out")
                .arg(dir.path().join(format!("w{id}")))
                .args([
                    "--config",
                    &cfg,
                    "dist-worker",
                    "--connect",
                    &addr,
                    "--id",
                    &id.to_string(),
                ])
                .env_remove("RELU_QSGD_SEED")
                .stdout(Stdio::null())
                .spawn()
                .unwrap()
        })
        .collect();
    for mut w in workers {
        assert!(w.wait().unwrap().success());
    }
    let mut rest = String::new();
    stdout.read_to_string(&mut rest).unwrap();
    assert!(master.wait().unwrap().success());
    assert!(rest.contains("iterations"));
    assert_eq!(
        trace_rows(&local.join("trace.csv")),
        trace_rows(&remote.join("trace.csv"))
    );
}

#[test]
fn presets_are_listed() {
    let out = Command::new(BIN).arg("presets").output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    for name in [
        "fig1a-m800",
        "fig1b-b7",
        "fig2a",
        "fig2b",
        "table1-scenario1",
        "table1-scenario2",
    ] {
        assert!(text.lines().any(|l| l == name), "{name}");
    }
}
