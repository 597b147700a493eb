use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qmetro_core::{read_checkpoint, ExperimentConfig};

const SMALL_DC: &str = r#"
model = "nv_dc"
seed = 5
[agent]
hidden = [6, 6]
[budget]
amount = 4
[training]
batch_size = 6
steps = 4
eval_episodes = 16
[filter]
particles = 48
"#;

fn qmetro(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qmetro")).args(args).output().expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_a_complete_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "dc.toml", SMALL_DC);
    let run = dir.path().join("runs/dc1");
    ok(qmetro(&["train", "--config", s(&cfg), "--out", s(&run), "--seed", "7"]));
    for f in ["config.toml", "metrics.csv", "eval.csv", "diagnostics.log", "checkpoints/final.qmck", "checkpoints/final.toml"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("step,loss,grad_norm,lr,ess_min,aborted_episodes"));
    assert_eq!(lines.count(), 4);
    let snap = ExperimentConfig::load(&run.join("config.toml")).unwrap();
    assert_eq!(snap.seed, 7);
    let (_, meta) = read_checkpoint(&run.join("checkpoints/final.qmck")).unwrap();
    assert_eq!(meta.config_hash, snap.model_hash());
    assert_eq!(meta.step, 4);
}

#[test]
fn zero_steps_keeps_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "dc.toml", &SMALL_DC.replace("steps = 4", "steps = 0"));
    let run = dir.path().join("run");
    ok(qmetro(&["train", "--config", s(&cfg), "--out", s(&run)]));
    let (fin, _) = read_checkpoint(&run.join("checkpoints/final.qmck")).unwrap();
    let config = ExperimentConfig::load(&cfg).unwrap();
    let init = config.build_agent(&config.build_task().unwrap()).unwrap();
    assert_eq!(fin.params(), init.params());
    assert_eq!(fs::read_to_string(run.join("metrics.csv")).unwrap().lines().count(), 1);
}

#[test]
fn same_seed_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "dc.toml", SMALL_DC);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(qmetro(&["train", "--config", s(&cfg), "--out", s(&a), "--workers", "1"]));
    ok(qmetro(&["train", "--config", s(&cfg), "--out", s(&b), "--workers", "1"]));
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("checkpoints/final.qmck")).unwrap(), fs::read(b.join("checkpoints/final.qmck")).unwrap());
}

#[test]
fn invalid_config_reports_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "model = \"nv_dc\"\n\n[training]\nbatch_sise = 4\n");
    let out = qmetro(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("batch_sise") && err.contains("line 4"), "{err}");
    assert!(!dir.path().join("r").exists());
}

#[test]
fn baseline_eval_needs_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "dc.toml", SMALL_DC);
    let out = ok(qmetro(&["eval", "--config", s(&cfg), "--agent", "pgh", "--grid", "1:4"]));
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "resource,precision_mean,precision_stderr,strategy");
    assert_eq!(rows.len(), 5);
    assert!(rows[1..].iter().all(|r| r.ends_with(",pgh")));
}

#[test]
fn checkpoint_hash_mismatch_is_refused_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "dc.toml", SMALL_DC);
    let run = dir.path().join("run");
    ok(qmetro(&["train", "--config", s(&cfg), "--out", s(&run)]));
    let ckpt = run.join("checkpoints/final.qmck");
    // Only the seed and training settings differ: still the same model.
    let other_seed = write_config(dir.path(), "seed.toml", &SMALL_DC.replace("seed = 5", "seed = 6"));
    ok(qmetro(&["eval", "--config", s(&other_seed), "--checkpoint", s(&ckpt)]));
    let other = write_config(dir.path(), "other.toml", &SMALL_DC.replace("particles = 48", "particles = 40"));
    let refused = qmetro(&["eval", "--config", s(&other), "--checkpoint", s(&ckpt)]);
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--force"));
    ok(qmetro(&["eval", "--config", s(&other), "--checkpoint", s(&ckpt), "--force"]));
    // The run directory's own configuration is used when --config is omitted.
    ok(qmetro(&["eval", "--checkpoint", s(&ckpt), "--grid", "2,4"]));
    // Retraining into the directory with another model is refused too.
    let again = qmetro(&["train", "--config", s(&other), "--out", s(&run)]);
    assert_eq!(again.status.code(), Some(3));
}

#[test]
fn bounds_on_thirty_measurements() {
    let out = ok(qmetro(&["bounds", "--task", "dc", "--case", "t2_infinite", "--regime", "measurement", "--grid", "1:30"]));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 31);
    assert!(text.starts_with("resource,bound,task,case,regime\n"));
    let ramp = ok(qmetro(&["bounds", "--task", "ramp", "--grid", "16,32"]));
    assert_eq!(String::from_utf8(ramp.stdout).unwrap().lines().count(), 5);
    assert!(!qmetro(&["bounds", "--task", "dc", "--case", "nonsense", "--grid", "1:2"]).status.success());
}

#[test]
fn compare_merges_columns_by_resource() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    fs::write(&a, "resource,precision_mean,precision_stderr,strategy\n1,0.5,0.1,pgh\n2,0.25,0.05,pgh\n").unwrap();
    fs::write(&b, "resource,precision_mean,precision_stderr,strategy\n2,0.2,0.02,mlp\n3,0.1,0.01,mlp\n").unwrap();
    let out = ok(qmetro(&["compare", s(&a), s(&b)]));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "resource,pgh_mean,pgh_stderr,mlp_mean,mlp_stderr");
    assert_eq!(lines[1], "1,0.5,0.1,,");
    assert_eq!(lines[2], "2,0.25,0.05,0.2,0.02");
    assert_eq!(lines[3], "3,,,0.1,0.01");
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let task = cfg.build_task().unwrap();
        cfg.build_agent(&task).unwrap();
        seen += 1;
    }
    assert!(seen >= 3);
}
