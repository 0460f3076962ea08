use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use egoprompt_core::container::write_atomic;
use egoprompt_core::data::{export_dataset, import_dataset, make_benchmark, Split, SyntheticBenchmark};
use egoprompt_core::eval::{
    evaluate_checkpoint, flatten_metrics, measurements_csv, mode_for, pool_diagnostics, run_ablation, run_sweep,
    train_and_evaluate, write_grid_report, write_sweep_report, AblationConfig, EvalMode, SweepAxis,
};
use egoprompt_core::numerics::GradCheckOptions;
use egoprompt_core::trainer::{load_checkpoint, Checkpoint, Variant};
use egoprompt_core::verify::run_verification;
use serde::Serialize;

use crate::config::{parse_over, ConfigArgs, RunConfig};
use crate::manifest::{
    build_id, hex, write_output, DatasetRecord, RunManifest, FREEZE, LOG, MANIFEST, METRICS, RUN_KIND,
};
use crate::UsageError;

#[derive(Parser, Debug)]
#[command(name = "egoprompt", version, about = "Component prompts and a unified prompt pool on a synthetic egocentric benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic benchmark and write it to a dataset file.
    GenData(GenDataArgs),
    /// Train one variant into a fresh run directory.
    Train(TrainArgs),
    /// Evaluate a run directory or a checkpoint.
    Eval(EvalArgs),
    /// Check reverse-mode gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Run the variant x regularizer x deep-prompting grid.
    Ablate(AblateArgs),
    /// Vary one hyperparameter of the two-stage method.
    Sweep(SweepArgs),
    /// Aggregate the metrics of every run under a directory.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON config; only its `benchmark` section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub samples_per_split: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Train on this dataset file instead of generating the benchmark.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Parent of the `<timestamp>-<seed>` run directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Exact run directory; overrides `--out`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long, conflicts_with = "checkpoint")]
    pub run: Option<PathBuf>,
    #[arg(long, requires = "data")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Defaults to the mode the checkpoint's variant trains for.
    #[arg(long)]
    pub mode: Option<EvalMode>,
    /// Write the metrics CSV here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// With `--run`, fail unless the metrics equal the stored metrics.csv.
    #[arg(long, requires = "run")]
    pub check: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Random instances per operation.
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> anyhow::Result<Vec<T>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| UsageError(format!("invalid {what} {s:?} in {raw:?}")).into())
        })
        .collect()
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Comma-separated seeds; each seeds both its benchmark and training.
    #[arg(long, default_value = "0,1,2,3,4")]
    pub seeds: String,
    /// Comma-separated variants; all four by default.
    #[arg(long)]
    pub variants: Option<String>,
    #[arg(long)]
    pub no_regularizer_axis: bool,
    #[arg(long)]
    pub no_deep_axis: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// pool_size, lambda_freq, lambda_orth or k.
    #[arg(long)]
    pub axis: SweepAxis,
    /// Comma-separated values.
    #[arg(long)]
    pub values: String,
    #[arg(long, default_value = "0,1,2")]
    pub seeds: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ReportFormat {
    Csv,
    Json,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: ReportFormat,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => ablate(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
    }
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| UsageError(format!("cannot read {}: {e}", p.display())))?;
            parse_over(&RunConfig::default(), &text)?
        }
        None => RunConfig::default(),
    };
    if let Some(n) = a.samples_per_split {
        cfg.benchmark.samples_per_split = n;
    }
    let bench = make_benchmark(a.seed, &cfg.benchmark)?;
    export_dataset(&bench, &a.out)?;
    eprintln!(
        "wrote {} ({} splits x {} clips, fingerprint {})",
        a.out.display(),
        Split::ALL.len(),
        cfg.benchmark.samples_per_split,
        hex(bench.fingerprint()?)
    );
    Ok(())
}

fn timestamp() -> String {
    chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string()
}

fn load_benchmark(cfg: &RunConfig, data: Option<&Path>) -> anyhow::Result<(SyntheticBenchmark, DatasetRecord)> {
    match data {
        Some(path) => {
            let bench = import_dataset(path)?;
            let record = DatasetRecord::File {
                path: path.display().to_string(),
                fingerprint: hex(bench.fingerprint()?),
            };
            Ok((bench, record))
        }
        None => {
            let seed = cfg.benchmark_seed();
            let bench = make_benchmark(seed, &cfg.benchmark)?;
            let record = DatasetRecord::Generated {
                seed,
                fingerprint: hex(bench.fingerprint()?),
            };
            Ok((bench, record))
        }
    }
}

fn stage_file(stage: u8) -> String {
    format!("stage{stage}.ckpt")
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = a.cfg.resolve()?;
    let t0 = Instant::now();
    let (bench, dataset) = load_benchmark(&cfg, a.data.as_deref())?;
    let t_data = t0.elapsed().as_secs_f64();
    let dir = a
        .run_dir
        .clone()
        .unwrap_or_else(|| a.out.join(format!("{}-{}", timestamp(), cfg.train.seed)));
    if dir.join(MANIFEST).exists() {
        return Err(UsageError(format!("{} already holds a run", dir.display())).into());
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let t1 = Instant::now();
    let result = train_and_evaluate::<f32>(&cfg.train, &bench);
    let t_train = t1.elapsed().as_secs_f64();
    let res = match result {
        Ok(r) => r,
        Err(e) => return Err(anyhow!(e).context(format!("training {}", cfg.train.variant))),
    };
    let mut outputs = Vec::new();
    for ck in &res.checkpoints {
        outputs.push(write_output(&dir, &stage_file(ck.header.stage), &ck.to_bytes()?)?);
    }
    outputs.push(write_output(&dir, LOG, res.trainer.log_lines()?.as_bytes())?);
    let metrics = measurements_csv(&flatten_metrics(&res.metrics, res.pool.as_ref()))?;
    outputs.push(write_output(&dir, METRICS, metrics.as_bytes())?);
    let freeze = serde_json::to_vec_pretty(&res.trainer.freeze)?;
    outputs.push(write_output(&dir, FREEZE, &freeze)?);

    let manifest = RunManifest {
        kind: RUN_KIND.into(),
        build: build_id(),
        created: timestamp(),
        seed: cfg.train.seed,
        config: cfg,
        dataset,
        outputs,
        timings: BTreeMap::from([("data".into(), t_data), ("train_eval".into(), t_train)]),
    };
    manifest.write(&dir)?;
    if !res.trainer.freeze_holds() {
        bail!("freeze contract violated; see {}", dir.join(FREEZE).display());
    }
    println!("{}", dir.display());
    Ok(())
}

/// Metrics CSV of `ckpt` on `bench`, with pool diagnostics for pool
/// modes, as written by `train`.
fn metrics_csv(ckpt: &Checkpoint<f32>, bench: &SyntheticBenchmark, mode: EvalMode) -> anyhow::Result<String> {
    let metrics = evaluate_checkpoint(ckpt, bench, mode)?;
    let pool = if mode == EvalMode::Stage2 {
        Some(pool_diagnostics(&ckpt.model, &ckpt.header.config, bench, Split::Train)?)
    } else {
        None
    };
    Ok(measurements_csv(&flatten_metrics(&metrics, pool.as_ref()))?)
}

fn run_benchmark(m: &RunManifest) -> anyhow::Result<SyntheticBenchmark> {
    let (bench, expected) = match &m.dataset {
        DatasetRecord::Generated { seed, fingerprint } => (make_benchmark(*seed, &m.config.benchmark)?, fingerprint),
        DatasetRecord::File { path, fingerprint } => (import_dataset(Path::new(path))?, fingerprint),
    };
    let got = hex(bench.fingerprint()?);
    if &got != expected {
        bail!("dataset fingerprint {got} differs from the recorded {expected}");
    }
    Ok(bench)
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let (ckpt, bench, stored) = if let Some(dir) = &a.run {
        let m = RunManifest::read(dir)?;
        m.verify_outputs(dir)?;
        let name = [stage_file(2), stage_file(1)]
            .into_iter()
            .find(|n| m.output(n).is_some())
            .ok_or_else(|| anyhow!("{} lists no checkpoint", dir.join(MANIFEST).display()))?;
        let ckpt = load_checkpoint::<f32>(&dir.join(name))?;
        let stored = fs::read_to_string(dir.join(METRICS)).ok();
        (ckpt, run_benchmark(&m)?, stored)
    } else {
        let (Some(c), Some(d)) = (&a.checkpoint, &a.data) else {
            return Err(UsageError("eval needs --run DIR or --checkpoint FILE --data FILE".into()).into());
        };
        (load_checkpoint::<f32>(c)?, import_dataset(d)?, None)
    };
    let mode = a.mode.unwrap_or(mode_for(ckpt.header.variant));
    let csv = metrics_csv(&ckpt, &bench, mode)?;
    if a.check {
        match stored {
            Some(s) if s == csv => eprintln!("metrics match the stored {METRICS}"),
            Some(_) => bail!("metrics differ from the stored {METRICS}"),
            None => bail!("no stored {METRICS} to compare against"),
        }
    }
    match &a.out {
        Some(path) => write_atomic(path, csv.as_bytes())?,
        None => std::io::stdout().write_all(csv.as_bytes())?,
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    if a.instances == 0 {
        return Err(UsageError("--instances must be at least 1".into()).into());
    }
    let opts = GradCheckOptions {
        step: a.step,
        tol: a.tol,
        richardson: false,
    };
    let report = run_verification(a.instances, a.seed, opts)?;
    print!("{}", report.table());
    if !report.passed() {
        bail!("gradient check failed");
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> anyhow::Result<()> {
    let cfg = a.cfg.resolve()?;
    let variants = match &a.variants {
        Some(v) => parse_list::<Variant>(v, "variant")?,
        None => Variant::ALL.to_vec(),
    };
    let ab = AblationConfig {
        seeds: parse_list(&a.seeds, "seed")?,
        variants,
        regularizer_axis: !a.no_regularizer_axis,
        deep_axis: !a.no_deep_axis,
    };
    let start = Instant::now();
    let report = run_ablation::<f32>(&cfg.benchmark, &cfg.train, &ab)?;
    write_grid_report(&a.out, &report)?;
    eprintln!(
        "{} runs in {:.1}s; reports in {}",
        report.records.len(),
        start.elapsed().as_secs_f64(),
        a.out.display()
    );
    Ok(())
}

fn sweep(a: SweepArgs) -> anyhow::Result<()> {
    let cfg = a.cfg.resolve()?;
    let values: Vec<f64> = parse_list(&a.values, "value")?;
    let seeds: Vec<u64> = parse_list(&a.seeds, "seed")?;
    let start = Instant::now();
    let report = run_sweep::<f32>(&cfg.benchmark, &cfg.train, a.axis, &values, &seeds)?;
    write_sweep_report(&a.out, &report)?;
    eprintln!(
        "{} runs in {:.1}s; reports in {}",
        report.points.len(),
        start.elapsed().as_secs_f64(),
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ReportRow {
    run: String,
    variant: String,
    seed: u64,
    component: String,
    split: String,
    metric: String,
    value: f64,
}

fn report(a: ReportArgs) -> anyhow::Result<()> {
    let entries = fs::read_dir(&a.runs).map_err(|e| UsageError(format!("cannot read {}: {e}", a.runs.display())))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no runs found in {}", a.runs.display());
    }
    let mut rows = Vec::new();
    for dir in &dirs {
        let m = RunManifest::read(dir)?;
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let mut reader = csv::Reader::from_path(dir.join(METRICS))
            .with_context(|| format!("reading {}", dir.join(METRICS).display()))?;
        for rec in reader.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or_default().to_string();
            rows.push(ReportRow {
                run: name.clone(),
                variant: m.config.train.variant.name().into(),
                seed: m.seed,
                component: field(0),
                split: field(1),
                metric: field(2),
                value: field(3).parse().with_context(|| format!("bad value in {}", dir.display()))?,
            });
        }
    }
    let mut out = std::io::stdout().lock();
    match a.format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(&mut out);
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut out, &rows)?;
            writeln!(out)?;
        }
    }
    Ok(())
}
