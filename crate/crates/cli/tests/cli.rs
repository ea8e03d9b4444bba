use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5

[task]
num_images = 64
total_steps = 20
sampling_steps = 5
calib_per_step = 8
eval_samples = 8

[task.teacher]
epochs = 2
max_epochs = 2
threshold = 1e9

[quant]
num_clusters = 5
grid = 20

[train]
epochs_per_stage = 1
batch_size = 4
lr_weights = 1e-4
lr_scales = 1e-3
"#;

fn workdir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), TINY).unwrap();
    dir
}

fn quest(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quest"))
        .current_dir(dir)
        .args(["--config", "run.toml", "--out", "runs"])
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = quest(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn result(dir: &Path, name: &str) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("runs").join(name)).unwrap();
    serde_json::from_str::<serde_json::Value>(&text).unwrap()["result"].clone()
}

#[test]
fn pass_through_quantization_is_transparent() {
    let dir = workdir();
    let d = dir.path();
    let fp = ["--set", "quant.bits_w=32", "--set", "quant.bits_a=32"];
    ok(d, &["teacher-train"]);
    ok(d, &["calibrate"]);
    ok(d, &[&fp[..], &["quantize"]].concat());
    ok(
        d,
        &[&fp[..], &["sample", "--checkpoint", "runs/ptq.qckp"]].concat(),
    );
    let mse = result(d, "sample_ptq.json")["trajectory_mse"]
        .as_f64()
        .unwrap();
    assert!(mse < 1e-3, "{mse}");
}

fn full_chain(d: &Path) {
    for cmd in [
        &["teacher-train"][..],
        &["calibrate"],
        &["quantize"],
        &["finetune"],
        &["sample"],
    ] {
        ok(d, cmd);
    }
}

#[test]
fn full_chain_is_bit_identical_across_runs() {
    let (a, b) = (workdir(), workdir());
    full_chain(a.path());
    full_chain(b.path());
    for f in [
        "teacher.qckp",
        "calibration.qcal",
        "ptq.qckp",
        "quest.qckp",
        "finetune.json",
        "finetune_log.csv",
        "sample_quest.json",
        "samples_quest.csv",
    ] {
        let x = std::fs::read(a.path().join("runs").join(f)).unwrap();
        let y = std::fs::read(b.path().join("runs").join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn finetune_without_calibration_names_the_producer() {
    let dir = workdir();
    ok(dir.path(), &["teacher-train"]);
    let out = quest(dir.path(), &["finetune"]);
    assert_eq!(out.status.code(), Some(3));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(
        msg.contains("cmd_calibrate") && msg.contains("missing_artifact"),
        "{msg}"
    );
}

#[test]
fn config_mismatch_and_overwrite_are_refused() {
    let dir = workdir();
    let d = dir.path();
    ok(d, &["teacher-train"]);
    let out = quest(d, &["teacher-train"]);
    assert_eq!(out.status.code(), Some(4));

    let out = quest(d, &["--seed", "6", "calibrate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config_mismatch"));
    ok(d, &["--seed", "6", "--allow-config-mismatch", "calibrate"]);
}

#[test]
fn bad_config_exits_with_config_error() {
    let dir = workdir();
    let out = quest(dir.path(), &["--set", "quant.bits_w=9", "config"]);
    assert_eq!(out.status.code(), Some(2));
    let out = quest(dir.path(), &["--set", "quant.bits_w=8", "config"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("bits_w = 8"));
}

#[test]
fn probe_analyses_need_no_artifacts() {
    let dir = workdir();
    ok(dir.path(), &["analyze", "taylor"]);
    ok(dir.path(), &["analyze", "decomposition"]);
    let t = result(dir.path(), "analyze_taylor.json");
    let e = t["fitted_exponent"].as_f64().unwrap();
    assert!((2.5..=3.5).contains(&e), "{e}");
    let rows = std::fs::read_to_string(dir.path().join("runs/analyze_decomposition.csv")).unwrap();
    assert_eq!(rows.lines().next().unwrap(), "probe_seed,k,lhs,rhs,gap");
    assert_eq!(rows.lines().count(), 1 + 5 * 4);
}

#[test]
fn analyses_on_a_finetuned_run() {
    let dir = workdir();
    let d = dir.path();
    full_chain(d);
    for which in ["sweep", "te-ablation", "dist"] {
        ok(d, &["analyze", which]);
    }
    let sweep = result(d, "analyze_sweep.json");
    assert_eq!(sweep["report"]["groups"].as_object().unwrap().len(), 3);
    let dist = result(d, "analyze_dist.json");
    assert!(dist.as_object().unwrap().contains_key("time.fc1"));
}
