use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TWO_ATOMS: &str = r#"
[coupling]
kind = "finite"
atoms = [
  { x0 = [1.0, 0.5], x_end = [-1.0, 0.0], weight = 0.4 },
  { x0 = [-0.5, 1.0], x_end = [1.0, 0.5], weight = 0.6 },
]
"#;

const SMALL: &str = r#"
[teacher]
iterations = 80
batch = 32
hidden = [16, 16]

[distill]
rounds = 3
batch = 32
steps = 2

[eval]
samples = 128
teacher_steps = 10
probe_times = 3
probe_points = 4
checkpoint_rounds = []
trajectories = 2

[eval.bridge_fit]
iterations = 20
batch = 32

[identity]
samples = 20000
"#;

fn ibmd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ibmd"))
        .args(args)
        .output()
        .expect("run ibmd")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_else(|| panic!("empty stderr"));
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

fn run_cmd(cmd: &str, config: &str, out: &Path, seed: u64) -> Output {
    ibmd(&[
        cmd,
        "--config",
        config,
        "--out",
        out.to_str().unwrap(),
        "--seed",
        &seed.to_string(),
    ])
}

#[test]
fn unknown_keys_exit_with_code_two_and_list_every_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.toml",
        &format!("sede = 1\n{TWO_ATOMS}\n[teacher]\nbatchsize = 3\n"),
    );
    let out = run_cmd("train-teacher", &cfg, &dir.path().join("run"), 0);
    assert_eq!(out.status.code(), Some(2));
    let body = stderr_json(&out);
    assert_eq!(body["error"], "config");
    assert_eq!(body["exit_code"], 2);
    let msg = body["message"].as_str().unwrap();
    assert!(msg.contains("sede") && msg.contains("teacher.batchsize"), "{msg}");
}

#[test]
fn invalid_values_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.toml",
        &format!("{TWO_ATOMS}\n[teacher]\nbatch = 0\n[distill]\nsteps = 0\n"),
    );
    let out = run_cmd("distill", &cfg, &dir.path().join("run"), 0);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr_json(&out)["message"].as_str().unwrap().to_owned();
    assert!(msg.contains("teacher") && msg.contains("distill"), "{msg}");
}

#[test]
fn divergence_exits_with_code_three_and_a_loss_trace() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
[coupling]
kind = "finite"
atoms = [{ x0 = [100000.0], x_end = [0.0], weight = 1.0 }]

[teacher]
iterations = 50
batch = 16
hidden = [8]
"#;
    let cfg = write(dir.path(), "diverge.toml", text);
    let out = run_cmd("train-teacher", &cfg, &dir.path().join("run"), 0);
    assert_eq!(out.status.code(), Some(3));
    let body = stderr_json(&out);
    assert_eq!(body["error"], "divergence");
    assert!(body["step"].is_u64());
    assert!(body["trace"].as_array().is_some_and(|t| !t.is_empty()));
}

#[test]
fn missing_checkpoint_exits_with_code_four() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{TWO_ATOMS}\n{SMALL}\n[checkpoints]\nteacher = \"/nonexistent/teacher.bin\"\n");
    let cfg = write(dir.path(), "cfg.toml", &text);
    let out = run_cmd("eval", &cfg, &dir.path().join("run"), 0);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(stderr_json(&out)["exit_code"], 4);
}

#[test]
fn missing_config_file_exits_with_code_four() {
    let out = ibmd(&[
        "train-teacher",
        "--config",
        "/nonexistent/config.toml",
        "--out",
        "/tmp/unused",
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn verify_identity_writes_a_passing_report() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{TWO_ATOMS}\n{SMALL}\n");
    let cfg = write(
        dir.path(),
        "cfg.toml",
        &text.replace("[identity]", "[identity]\noffset = [0.3, -0.2]"),
    );
    let run = dir.path().join("run");
    let out = run_cmd("verify-identity", &cfg, &run, 3);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(run.join("identity.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["n_mc"], 20000);
    let (lhs, gap, se) = (
        report["lhs"].as_f64().unwrap(),
        report["gap"].as_f64().unwrap(),
        report["stderr"].as_f64().unwrap(),
    );
    assert!((lhs - 0.13).abs() < 1e-9, "lhs {lhs}");
    assert!(gap.abs() < 3.0 * se);
    assert!(std::fs::read_to_string(run.join("report.txt"))
        .unwrap()
        .contains("verify-identity"));
}

#[test]
fn zero_rounds_leave_the_generator_at_its_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{TWO_ATOMS}\n{}", SMALL.replace("rounds = 3", "rounds = 0"));
    let cfg = write(dir.path(), "cfg.toml", &text);
    let run = dir.path().join("run");
    let out = run_cmd("distill", &cfg, &run, 1);
    assert!(
        matches!(out.status.code(), Some(0 | 1)),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let init = std::fs::read(run.join("generator_init.bin")).unwrap();
    let fin = std::fs::read(run.join("generator.bin")).unwrap();
    assert_eq!(init, fin);
}

#[test]
fn same_seed_reproduces_artifacts_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.toml", &format!("{TWO_ATOMS}\n{SMALL}\n"));
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (out, seed) in [(&a, 9), (&b, 9), (&c, 10)] {
        let res = run_cmd("distill", &cfg, out, seed);
        assert!(
            matches!(res.status.code(), Some(0 | 1)),
            "{}",
            String::from_utf8_lossy(&res.stderr)
        );
    }
    for name in ["teacher.bin", "generator.bin", "losses.csv", "metrics.json"] {
        let (x, y) = (
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
        );
        assert!(x == y, "{name} differs between identical runs");
    }
    assert_ne!(
        std::fs::read(a.join("generator.bin")).unwrap(),
        std::fs::read(c.join("generator.bin")).unwrap()
    );
}

#[test]
fn eval_reads_back_a_distilled_generator() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let base = format!("{TWO_ATOMS}\n{SMALL}\n");
    let cfg = write(dir.path(), "cfg.toml", &base);
    let out = run_cmd("distill", &cfg, &run, 2);
    assert!(
        matches!(out.status.code(), Some(0 | 1)),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let text = base.replace("checkpoint_rounds = []", "checkpoint_rounds = []\nnfe = [1, 2]")
        + &format!(
            "\n[checkpoints]\nteacher = \"{}\"\ngenerator = \"{}\"\n",
            run.join("teacher.bin").display(),
            run.join("generator").display()
        );
    let cfg = write(dir.path(), "eval.toml", &text);
    let eval_dir = dir.path().join("eval");
    let out = run_cmd("eval", &cfg, &eval_dir, 2);
    assert!(
        matches!(out.status.code(), Some(0 | 1)),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let metrics: Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("metrics.json")).unwrap()).unwrap();
    let sweep = metrics["nfe_sweep"].as_array().unwrap();
    assert_eq!(sweep.len(), 2);
    assert!(sweep
        .iter()
        .all(|r| r["energy_distance"].as_f64().is_some_and(f64::is_finite)));
    assert!(
        !eval_dir.join("teacher.bin").exists(),
        "eval must not retrain the teacher"
    );
}

#[test]
fn scenario_command_prints_one_line_per_criterion() {
    let dir = tempfile::tempdir().unwrap();
    let out = ibmd(&["scenario", "c1", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("criterion  1 PASS")), "{stdout}");
    assert!(dir.path().join("scenario_c1.json").exists());
    let bad = ibmd(&["scenario", "c99"]);
    assert_eq!(bad.status.code(), Some(1));
}
