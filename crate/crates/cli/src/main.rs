use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use umpe::data::PresenceMask;
use umpe::dataset::{prepare_output_dir, read_dataset, write_frames};
use umpe::fusion::FusionOrder;
use umpe::geometry::BevGridSpec;
use umpe::ingest::{ingest_frame, write_bundle, FixtureFrame, FixtureTileClient, IngestOptions, TileClient};
use umpe::synth::SynthSpec;
use umpe::train::{evaluate, eval_powerset, load_checkpoint, train_two_stage, EvalReport, LogRecord, PowersetTable, TrainConfig};
use umpe::{gradcheck, plot, Error};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(name = "umpe", version, about = "Map-prior fusion: data synthesis, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset of prior bundles and observations.
    SynthData(SynthArgs),
    /// Build prior bundles from fixture frames and map tiles.
    Ingest(IngestArgs),
    /// Two-stage training.
    Train(TrainArgs),
    /// Evaluate one checkpoint under one prior subset.
    Eval(EvalArgs),
    /// Evaluate one checkpoint under all 16 prior subsets.
    Powerset(PowersetArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Figures from metric logs.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Replace an existing output instead of refusing.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    frames: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    /// TOML file with generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Grid as `ROWSxCOLS` over the 60 m x 30 m window.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    print_config: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// JSON lines, one fixture frame per line.
    #[arg(long)]
    fixtures: PathBuf,
    /// Tile cache laid out as `z/x/y.png`.
    #[arg(long)]
    tiles: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    grid: Option<String>,
    #[arg(long, default_value_t = 19)]
    max_zoom: u32,
    #[arg(long, default_value_t = 4)]
    parallel: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    eval_dataset: Option<PathBuf>,
    #[arg(long)]
    fusion_order: Option<FusionOrder>,
    #[arg(long)]
    print_config: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Prior subset such as `hd+sat`, `all` or `none`.
    #[arg(long, default_value = "all")]
    subset: String,
    /// Override the α recorded in the checkpoint.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct PowersetArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
    tolerance: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Training metric logs (`metrics.jsonl`).
    #[arg(long)]
    metrics: Vec<PathBuf>,
    /// Powerset tables written by `powerset`.
    #[arg(long)]
    powerset: Vec<PathBuf>,
    /// Evaluation records written by `eval`; one bar each, labelled by fusion order.
    #[arg(long)]
    fusion: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config_hash: Option<String>,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    pub started_unix: u64,
    pub version: String,
}

/// Evaluation output of `eval`.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvalRecord {
    pub checkpoint: PathBuf,
    pub fusion_order: FusionOrder,
    pub alpha: f64,
    pub weights_hash: String,
    pub report: EvalReport,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn sha256_file(p: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_manifest(dir: &Path, command: &str, config: Option<&Path>, config_hash: Option<String>, seeds: Vec<u64>) -> anyhow::Result<()> {
    let m = RunManifest {
        command: command.into(),
        config_path: config.map(Path::to_path_buf),
        config_hash,
        seeds,
        output: dir.to_path_buf(),
        started_unix: now_unix(),
        version: env!("CARGO_PKG_VERSION").into(),
    };
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

/// For single-file outputs the manifest sits next to the file as `<name>.manifest.json`.
fn write_file_manifest(file: &Path, command: &str, seeds: Vec<u64>) -> anyhow::Result<()> {
    let m = RunManifest {
        command: command.into(),
        config_path: None,
        config_hash: None,
        seeds,
        output: file.to_path_buf(),
        started_unix: now_unix(),
        version: env!("CARGO_PKG_VERSION").into(),
    };
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    if let Some(parent) = file.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(file.with_file_name(name), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

fn guard_file(p: &Path, overwrite: bool) -> umpe::Result<()> {
    if p.exists() && !overwrite {
        return Err(Error::WouldClobber(p.to_path_buf()));
    }
    Ok(())
}

fn parse_grid(s: &str) -> umpe::Result<BevGridSpec> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::validation(format!("grid must look like 40x20, got {s}")))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| Error::validation(format!("bad grid size {v}")));
    let g = BevGridSpec::window(parse(h)?, parse(w)?);
    g.validate()?;
    Ok(g)
}

fn read_toml<T: for<'de> Deserialize<'de>>(p: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    Ok(toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?)
}

fn synth_data(a: SynthArgs) -> anyhow::Result<()> {
    let mut spec: SynthSpec = match &a.config {
        Some(p) => read_toml(p)?,
        None => SynthSpec::default(),
    };
    if let Some(g) = &a.grid {
        spec.grid = parse_grid(g)?;
    }
    spec.grid.validate()?;
    spec.noise.validate()?;
    if a.print_config {
        print!("{}", toml::to_string(&spec).map_err(|e| Error::Config(e.to_string()))?);
        return Ok(());
    }
    let out = a.out.ok_or_else(|| Error::validation("--out is required"))?;
    prepare_output_dir(&out, a.common.overwrite)?;
    let hash = hex::encode(Sha256::digest(serde_json::to_string(&spec)?.as_bytes()));
    write_manifest(&out, "synth-data", a.config.as_deref(), Some(hash), vec![a.seed])?;
    write_frames(&out, a.seed, a.frames, &spec)?;
    log::info!("wrote {} frames to {}", a.frames, out.display());
    Ok(())
}

fn ingest(a: IngestArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&a.fixtures).map_err(|e| Error::io(&a.fixtures, e))?;
    let frames = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str::<FixtureFrame>)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Error::validation(format!("fixture parse error: {e}")))?;
    let opts = IngestOptions {
        grid: match &a.grid {
            Some(g) => parse_grid(g)?,
            None => IngestOptions::default().grid,
        },
        max_zoom: a.max_zoom,
        parallel: a.parallel.max(1),
        ..Default::default()
    };
    prepare_output_dir(&a.out, a.common.overwrite)?;
    write_manifest(&a.out, "ingest", Some(&a.fixtures), Some(sha256_file(&a.fixtures)?), Vec::new())?;
    let client = a.tiles.as_ref().map(FixtureTileClient::new);
    for f in &frames {
        let bundle = ingest_frame(f, client.as_ref().map(|c| c as &dyn TileClient), &opts)?;
        for flag in &bundle.flags {
            log::warn!("frame {}: {flag}", f.frame_id);
        }
        write_bundle(&umpe::dataset::frame_dir(&a.out, f.frame_id), &bundle, None)?;
    }
    log::info!("ingested {} frames into {}", frames.len(), a.out.display());
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            TrainConfig::from_toml(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(d) = &a.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(d) = &a.eval_dataset {
        cfg.eval_dataset = Some(d.clone());
    }
    if let Some(o) = a.fusion_order {
        cfg.fusion_order = o;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = resolve_train_config(&a)?;
    if a.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let out = a.out.clone().ok_or_else(|| Error::validation("--out is required"))?;
    let data_dir = cfg
        .dataset
        .clone()
        .ok_or_else(|| Error::Config("no dataset: set `dataset` in the config or pass --dataset".into()))?;
    prepare_output_dir(&out, a.common.overwrite)?;
    write_manifest(&out, "train", a.config.as_deref(), Some(cfg.hash()), vec![cfg.seed])?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let train_set = read_dataset(&data_dir)?;
    let eval_set = cfg.eval_dataset.as_ref().map(|p| read_dataset(p)).transpose()?;
    let res = train_two_stage(&cfg, &train_set.samples, eval_set.as_ref().map(|d| d.samples.as_slice()), Some(&out))?;
    if let Some(e) = res.eval {
        println!("final mean IoU {:.4} (per class {:?})", e.mean_iou, e.iou);
    }
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    guard_file(&a.out, a.common.overwrite)?;
    let subset = PresenceMask::parse(&a.subset)?;
    let (model, meta) = load_checkpoint(&a.checkpoint)?;
    write_file_manifest(&a.out, "eval", vec![meta.config.seed])?;
    let data = read_dataset(&a.dataset)?;
    let alpha = a.alpha.unwrap_or(meta.final_alpha);
    let report = evaluate(&model, &data.samples, subset, alpha, a.batch_size)?;
    println!("{}: mean IoU {:.4}", report.subset, report.mean_iou);
    let rec = EvalRecord {
        checkpoint: a.checkpoint,
        fusion_order: meta.config.fusion_order,
        alpha,
        weights_hash: meta.weights_hash,
        report,
    };
    fs::write(&a.out, serde_json::to_string_pretty(&rec)? + "\n")?;
    Ok(())
}

fn powerset(a: PowersetArgs) -> anyhow::Result<()> {
    guard_file(&a.out, a.common.overwrite)?;
    let (model, meta) = load_checkpoint(&a.checkpoint)?;
    write_file_manifest(&a.out, "powerset", vec![meta.config.seed])?;
    let data = read_dataset(&a.dataset)?;
    let table = eval_powerset(&model, &data.samples, a.alpha.unwrap_or(meta.final_alpha), a.batch_size)?;
    println!("{:<16} {:>8} {:>8} {:>8} {:>8}", "subset", "ped", "divider", "boundary", "mean");
    for r in &table.rows {
        println!("{:<16} {:>8.4} {:>8.4} {:>8.4} {:>8.4}", r.subset, r.iou[0], r.iou[1], r.iou[2], r.mean_iou);
    }
    fs::write(&a.out, serde_json::to_string_pretty(&table)? + "\n")?;
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> anyhow::Result<bool> {
    if let Some(out) = &a.out {
        guard_file(out, a.common.overwrite)?;
        write_file_manifest(out, "gradcheck", vec![a.seed])?;
    }
    let results = gradcheck::run_all(a.seed, a.tolerance)?;
    for r in &results {
        println!(
            "{} {:<8} {:<32} n={:<3} rel={:.3e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.suite,
            r.target,
            r.elements,
            r.rel_err
        );
    }
    if let Some(out) = &a.out {
        fs::write(out, serde_json::to_string_pretty(&results)? + "\n")?;
    }
    Ok(results.iter().all(|r| r.passed))
}

fn read_log(p: &Path) -> anyhow::Result<Vec<LogRecord>> {
    let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::validation(format!("{}: {e}", p.display())).into()))
        .collect()
}

fn run_plot(a: PlotArgs) -> anyhow::Result<()> {
    if a.metrics.is_empty() && a.powerset.is_empty() && a.fusion.is_empty() {
        return Err(Error::validation("nothing to plot: pass --metrics, --powerset or --fusion").into());
    }
    prepare_output_dir(&a.out, a.common.overwrite)?;
    write_manifest(&a.out, "plot", None, None, Vec::new())?;
    for (i, p) in a.metrics.iter().enumerate() {
        plot::training_curves(&a.out.join(format!("training_{i}.svg")), &read_log(p)?)?;
    }
    for (i, p) in a.powerset.iter().enumerate() {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let table: PowersetTable = serde_json::from_str(&text).map_err(|e| Error::validation(format!("{}: {e}", p.display())))?;
        plot::powerset_bars(&a.out.join(format!("powerset_{i}.svg")), &table)?;
    }
    if !a.fusion.is_empty() {
        let mut bars = Vec::new();
        for p in &a.fusion {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let rec: EvalRecord = serde_json::from_str(&text).map_err(|e| Error::validation(format!("{}: {e}", p.display())))?;
            let label = serde_json::to_value(rec.fusion_order)?.as_str().unwrap_or("?").to_string();
            bars.push((label, rec.report.mean_iou));
        }
        plot::fusion_order_bars(&a.out.join("fusion_order.svg"), &bars)?;
    }
    Ok(())
}

fn exit_for(e: &anyhow::Error) -> ExitCode {
    match e.downcast_ref::<Error>() {
        Some(err) if err.is_validation() => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Ingest(a) => ingest(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Powerset(a) => powerset(a),
        Command::Gradcheck(a) => match run_gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("gradient check failed");
                return ExitCode::from(1);
            }
            Err(e) => Err(e),
        },
        Command::Plot(a) => run_plot(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_for(&e)
        }
    }
}
