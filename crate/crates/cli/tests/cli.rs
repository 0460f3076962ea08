use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use egoprompt_cli::config::{parse_over, ConfigArgs, RunConfig};
use egoprompt_cli::exit_code;
use egoprompt_cli::manifest::{RunManifest, METRICS};
use egoprompt_core::trainer::Variant;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_egoprompt"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const FAST: [&str; 8] = [
    "--desk-scale",
    "--epochs-stage1",
    "3",
    "--epochs-stage2",
    "3",
    "--samples-per-split",
    "48",
    "--pool-size",
];

#[test]
fn empty_config_gives_documented_defaults() {
    let cfg = parse_over(&RunConfig::default(), "{}").unwrap();
    let t = &cfg.train;
    assert_eq!((t.lr, t.beta1, t.beta2, t.weight_decay), (1e-4, 0.9, 0.98, 0.01));
    assert_eq!((t.pool_size, t.loss.lambda_freq, t.loss.lambda_orth), (16, 1.0, 1.0));
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn flags_override_file_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    fs::write(&path, r#"{"train": {"pool_size": 16, "lr": 0.5}}"#).unwrap();
    let args = ConfigArgs {
        config: Some(path),
        pool_size: Some(8),
        ..ConfigArgs::default()
    };
    let cfg = args.resolve().unwrap();
    assert_eq!(cfg.train.pool_size, 8);
    assert_eq!(cfg.train.lr, 0.5);
    assert_eq!(cfg.train.beta2, 0.98);
}

#[test]
fn constraint_violations_name_the_key_and_are_usage_errors() {
    let args = ConfigArgs {
        k: Some(20),
        ..ConfigArgs::default()
    };
    let err = args.resolve().unwrap_err();
    assert!(format!("{err:#}").contains("train.k"), "{err:#}");
    assert_eq!(exit_code(&err), 2);
    let err = parse_over(&RunConfig::default(), r#"{"train": {"loss": {"lambda_frq": 1}}}"#).unwrap_err();
    assert!(err.to_string().contains("train.loss.lambda_frq"), "{err}");
    let err = parse_over(&RunConfig::default(), r#"{"train": {"k": "four"}}"#).unwrap_err();
    assert!(err.to_string().contains("train.k"), "{err}");
}

#[test]
fn unknown_command_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["frobnicate"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(o.stdout.is_empty());
}

#[test]
fn report_on_an_empty_directory_fails_with_no_runs_found() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("empty")).unwrap();
    let o = run(&["report", "--runs", "empty", "--format", "csv"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no runs found"));
}

#[test]
fn train_writes_a_self_describing_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--variant", "two-stage", "--seed", "3", "--out", "runs"];
    args.extend(FAST);
    args.push("6");
    let o = run(&args, dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run_dir = dir.path().join(String::from_utf8(o.stdout).unwrap().trim());
    let name = run_dir.file_name().unwrap().to_string_lossy().into_owned();
    assert!(name.ends_with("-3"), "{name}");
    for f in ["manifest.json", "stage1.ckpt", "stage2.ckpt", "train.log.jsonl", "metrics.csv", "freeze.json"] {
        assert!(run_dir.join(f).is_file(), "{f} missing");
    }
    let m = RunManifest::read(&run_dir).unwrap();
    m.verify_outputs(&run_dir).unwrap();
    assert_eq!(m.outputs.len(), 5);
    assert_eq!(m.config.train.variant, Variant::TwoStage);
    assert_eq!(m.config.train.pool_size, 6);

    // eval from only the manifest and checkpoints reproduces the metrics
    let o = run(&["eval", "--run", run_dir.to_str().unwrap(), "--check"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(o.stdout, fs::read(run_dir.join(METRICS)).unwrap());

    let o = run(&["report", "--runs", "runs", "--format", "json"], dir.path());
    assert_eq!(code(&o), 0);
    let rows: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(rows.as_array().unwrap().len() > 10);

    // a run directory is never overwritten
    let mut again = args.clone();
    again.extend(["--run-dir", run_dir.to_str().unwrap()]);
    assert_eq!(code(&run(&again, dir.path())), 2);
}

#[test]
fn eval_detects_a_corrupted_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--variant", "stage1-only", "--run-dir", "r"];
    args.extend(FAST);
    args.push("4");
    assert_eq!(code(&run(&args, dir.path())), 0);
    let ck = dir.path().join("r/stage1.ckpt");
    let mut bytes = fs::read(&ck).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&ck, bytes).unwrap();
    let o = run(&["eval", "--run", "r"], dir.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn gen_data_then_train_and_eval_from_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gen-data", "--seed", "5", "--samples-per-split", "48", "--out", "d.bin"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut args = vec!["train", "--data", "d.bin", "--run-dir", "r", "--variant", "joint"];
    args.extend(FAST);
    args.push("4");
    assert_eq!(code(&run(&args, dir.path())), 0);
    let o = run(
        &["eval", "--checkpoint", "r/stage2.ckpt", "--data", "d.bin", "--mode", "stage2"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(o.stdout, fs::read(dir.path().join("r/metrics.csv")).unwrap());
    let o = run(
        &["eval", "--checkpoint", "r/stage2.ckpt", "--data", "missing.bin"],
        dir.path(),
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn gradcheck_prints_a_passing_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck", "--instances", "5"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("layer_norm") && table.contains("stage2_objective"));
    assert!(table.trim_end().ends_with(")") && table.contains("overall: PASS"));
    assert_eq!(code(&run(&["gradcheck", "--instances", "0"], dir.path())), 2);
}

#[test]
fn sweep_and_ablate_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["sweep", "--axis", "k", "--values", "1,2", "--seeds", "0", "--out", "sw"];
    args.extend(FAST);
    args.push("4");
    let o = run(&args, dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("sw/k_verb_within-cross.dat").is_file());
    assert!(dir.path().join("sw/sweep.json").is_file());

    let mut bad = vec!["sweep", "--axis", "k", "--values", "9", "--seeds", "0", "--out", "sw2"];
    bad.extend(FAST);
    bad.push("4");
    let o = run(&bad, dir.path());
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));

    let mut args = vec![
        "ablate",
        "--seeds",
        "0",
        "--variants",
        "stage1-only,two-stage",
        "--no-deep-axis",
        "--out",
        "ab",
    ];
    args.extend(FAST);
    args.push("4");
    let o = run(&args, dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(dir.path().join("ab/summary.csv")).unwrap();
    assert!(summary.contains(",loss,") || summary.contains(",win,") || summary.contains(",tie,"));
    let records = fs::read_to_string(dir.path().join("ab/records.csv")).unwrap();
    assert!(records.starts_with("variant,lambda_freq,lambda_orth,deep_prompting,pool_size,k,seed,"));
    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("ab/report.json")).unwrap()).unwrap();
    assert_eq!(json["records"].as_array().unwrap().len(), 2 * 4);
}
