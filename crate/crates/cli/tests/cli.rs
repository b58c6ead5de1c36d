use std::path::Path;
use std::process::Command;

const CONFIG: &str = r#"
env = "cartpole"
algo = "a2c"
scheduler = "epgt"
total_env_steps = 2000
seeds = [0, 1]

[[hyperparams]]
name = "learning_rate"
kind = "lr_multiplicative"
bins = 3
"#;

fn epgt(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_epgt"))
        .args(args)
        .current_dir(cwd)
        .env_remove("EPGT_OUT_DIR")
        .env("EPGT_JOBS", "1")
        .output()
        .expect("binary runs")
}

#[test]
fn train_inspect_replay() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), CONFIG).unwrap();
    let out = epgt(&["train", "--config", "exp.toml", "--out", "runs"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.matches(" ok ").count(), 2, "{stdout}");

    let seed0 = dir.path().join("runs/cartpole-a2c-epgt/seed_0");
    for f in ["metrics.jsonl", "memory.bin", "encoder.bin", "policy.net", "value.net", "summary.json"] {
        assert!(seed0.join(f).exists(), "missing {f}");
    }

    let csv = dir.path().join("mem.csv");
    let out = epgt(
        &["inspect-memory", seed0.join("memory.bin").to_str().unwrap(), "--csv", csv.to_str().unwrap()],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = String::from_utf8_lossy(&out.stdout);
    let entries: usize = summary
        .split_whitespace()
        .nth(1)
        .and_then(|s| s.split('/').next())
        .and_then(|s| s.parse().ok())
        .unwrap();
    let rows = std::fs::read_to_string(&csv).unwrap().lines().count();
    assert_eq!(rows, entries + 1);

    let out = epgt(&["replay", "--config", "exp.toml", "--seed", "1", "--out", "runs"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("identical"));
}

#[test]
fn fixed_runs_have_no_memory_and_env_overrides_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "env = \"cartpole\"\nalgo = \"a2c\"\nscheduler = \"fixed\"\ntotal_env_steps = 500\nseeds = [4, 5]\n";
    std::fs::write(dir.path().join("fixed.toml"), cfg).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_epgt"))
        .args(["train", "--config", "fixed.toml"])
        .current_dir(dir.path())
        .env("EPGT_OUT_DIR", "elsewhere")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for s in [4, 5] {
        let d = dir.path().join(format!("elsewhere/cartpole-a2c-fixed/seed_{s}"));
        assert!(d.join("metrics.jsonl").exists());
        assert!(!d.join("memory.bin").exists());
    }
}

#[test]
fn bad_config_is_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), CONFIG.replace("seeds = [0, 1]", "seeds = []")).unwrap();
    let out = epgt(&["train", "--config", "bad.toml", "--out", "runs"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = epgt(&["verify"], dir.path());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}");
    assert!(!stdout.contains("FAIL"));
}
