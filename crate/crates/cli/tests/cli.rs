use std::path::Path;
use std::process::{Command, Output};

fn iosmc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iosmc"))
        .args(["--threads", "1", "--output-dir"])
        .arg(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Strict reader: header row, fixed column count, every non-label cell a
/// finite number.
fn read_csv(path: &Path, label_cols: &[&str]) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().expect("header").split(',').map(str::to_string).collect();
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    for r in &rows {
        assert_eq!(r.len(), header.len(), "ragged row in {}", path.display());
        for (h, v) in header.iter().zip(r) {
            if !label_cols.contains(&h.as_str()) {
                let x: f64 = v.parse().unwrap_or_else(|_| panic!("{h}={v} not numeric"));
                assert!(x.is_finite());
            }
        }
    }
    (header, rows)
}

const TINY_TRAIN: [&str; 12] = [
    "--epochs",
    "2",
    "--steps-per-epoch",
    "2",
    "--chains",
    "2",
    "--n",
    "12",
    "--m",
    "8",
    "--eval-n",
    "12",
];

#[test]
fn train_writes_artifacts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let mut args = vec!["--seed", "3", "train", "--env", "pendulum_nonlinear", "--eval-m", "8"];
        args.extend(TINY_TRAIN);
        ok(&iosmc(d, &args));
    }
    for f in [
        "config.toml",
        "policy.json",
        "train_state.json",
        "metrics.csv",
        "timing.csv",
    ] {
        assert!(a.join(f).exists(), "{f}");
    }
    let (header, rows) = read_csv(&a.join("metrics.csv"), &[]);
    assert_eq!(
        header,
        ["epoch", "eig_estimate", "eig_std_error", "mean_acceptance_rate"]
    );
    assert_eq!(rows.len(), 2);
    let ma = std::fs::read(a.join("metrics.csv")).unwrap();
    let mb = std::fs::read(b.join("metrics.csv")).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(
        std::fs::read(a.join("policy.json")).unwrap(),
        std::fs::read(b.join("policy.json")).unwrap()
    );
}

#[test]
fn resolved_config_reloads_identically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let mut args = vec!["--seed", "5", "train", "--env", "pendulum_linear", "--eta", "0.7"];
    args.extend(TINY_TRAIN);
    ok(&iosmc(&a, &args));
    let frozen = a.join("config.toml");
    let b = dir.path().join("b");
    // The frozen file names its own output directory; the flag wins.
    ok(&iosmc(&b, &["--config", frozen.to_str().unwrap(), "train"]));
    let ta = std::fs::read_to_string(&frozen).unwrap();
    let tb = std::fs::read_to_string(b.join("config.toml")).unwrap();
    let strip = |t: &str| {
        t.lines()
            .filter(|l| !l.starts_with("output_dir"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip(&ta), strip(&tb));
    assert_eq!(
        std::fs::read(a.join("metrics.csv")).unwrap(),
        std::fs::read(b.join("metrics.csv")).unwrap()
    );
}

#[test]
fn missing_environment_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = iosmc(dir.path(), &["train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("environment"));
}

#[test]
fn malformed_config_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "environment = \"cartpole\"\n\n[mh]\nnum_moves = -1\n").unwrap();
    let out = iosmc(dir.path(), &["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 4"));
}

#[test]
fn checkpoint_environment_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--env", "pendulum_linear"];
    args.extend(TINY_TRAIN);
    ok(&iosmc(dir.path(), &args));
    let ckpt = dir.path().join("policy.json");
    for env in ["pendulum_nonlinear", "cartpole"] {
        let out = iosmc(
            dir.path(),
            &[
                "eval",
                "--env",
                env,
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--metric",
                "eig",
            ],
        );
        assert_eq!(out.status.code(), Some(2), "{env}");
    }
}

#[test]
fn eval_reports() {
    let dir = tempfile::tempdir().unwrap();
    let labels = ["policy_id", "env", "metric", "rep"];
    ok(&iosmc(
        dir.path(),
        &[
            "eval",
            "--env",
            "pendulum_nonlinear",
            "--metric",
            "eig",
            "--reps",
            "25",
            "--eval-n",
            "8",
            "--eval-m",
            "8",
        ],
    ));
    let (header, rows) = read_csv(&dir.path().join("eval_eig.csv"), &labels);
    assert_eq!(
        header,
        [
            "policy_id",
            "env",
            "metric",
            "rep",
            "value",
            "std_error",
            "N",
            "M",
            "L",
            "seed"
        ]
    );
    assert_eq!(rows.len(), 26);
    assert_eq!(rows[25][3], "summary");

    ok(&iosmc(
        dir.path(),
        &[
            "eval",
            "--env",
            "pendulum_nonlinear",
            "--metric",
            "spce",
            "--L",
            "1023",
            "--reps",
            "3",
            "--n-outer",
            "8",
        ],
    ));
    let (_, rows) = read_csv(&dir.path().join("eval_spce.csv"), &labels);
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert!(r[4].parse::<f64>().unwrap() <= (1024f64).ln());
    }

    ok(&iosmc(
        dir.path(),
        &[
            "eval",
            "--env",
            "pendulum_linear",
            "--metric",
            "ig-trace",
            "--rollouts",
            "512",
        ],
    ));
    let (header, rows) = read_csv(&dir.path().join("ig_trace.csv"), &[]);
    assert_eq!(header, ["t", "mean", "std"]);
    assert_eq!(rows.len(), 50);

    let out = iosmc(dir.path(), &["eval", "--env", "cartpole", "--metric", "ig-trace"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_writes_plot_ready_traces() {
    let dir = tempfile::tempdir().unwrap();
    ok(&iosmc(
        dir.path(),
        &["simulate", "--env", "pendulum_nonlinear", "--count", "3"],
    ));
    for k in 0..3 {
        let (header, rows) = read_csv(&dir.path().join(format!("trajectory_{k:04}.csv")), &[]);
        assert_eq!(header, ["t", "q", "q_dot", "xi"]);
        assert_eq!(rows.len(), 51);
        for r in &rows {
            let xi: f64 = r[3].parse().unwrap();
            assert!((-2.5..=2.5).contains(&xi));
        }
    }
    let cp = dir.path().join("cp");
    ok(&iosmc(&cp, &["simulate", "--env", "cartpole", "--theta", "1.2,1.3"]));
    let (header, rows) = read_csv(&cp.join("trajectory_0000.csv"), &[]);
    assert_eq!(header.len(), 1 + 4 + 1);
    assert_eq!(rows.len(), 51);
}

#[test]
fn output_dir_from_environment_variable() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_iosmc"))
        .args(["simulate", "--env", "pendulum_linear"])
        .env("IOSMC_OUTPUT_DIR", dir.path())
        .output()
        .unwrap();
    ok(&out);
    assert!(dir.path().join("trajectory_0000.csv").exists());
}
