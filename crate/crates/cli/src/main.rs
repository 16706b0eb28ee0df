//! Command-line front end: corruption preview, synthetic data, training,
//! evaluation, calibration, gap report and the ablation experiment.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dgdet::corruptions::{apply_corruption, CorruptionPool, CorruptionSpec};
use dgdet::datasets::synth::{synth_generate, SynthConfig, SynthDomain};
use dgdet::datasets::{load_all, DatasetMeta, DatasetRole, DatasetSample};
use dgdet::detector::{read_detections_jsonl, write_detections_jsonl};
use dgdet::eval_calib::{
    apply_temperature, compute_dece, evaluate_matched, fit_temperature, ground_truth, match_detections, reliability_table,
    DECE_SCORE_FLOOR, DEFAULT_BINS, DEFAULT_IOU,
};
use dgdet::experiment::{corrupt_preview, run_experiment, ExperimentPlan, Variant};
use dgdet::trainer::{detect_all, domain_gap_report, load_detector, train, TrainConfig, CONFIG_FILE};
use dgdet::{Error, ImageTensor, Result};

#[derive(Parser)]
#[command(name = "dgdet", version, about = "Single-source domain-generalized object detection toolkit")]
struct Cli {
    /// Overrides the seed of the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; every command writes only below it.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Flat `key = value` training config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corrupt one image, or write the full preview sheet.
    Corrupt(CorruptArgs),
    /// Render a synthetic shapes dataset.
    Synth(SynthArgs),
    /// Train a detector on a source dataset.
    Train(TrainArgs),
    /// Detect on a dataset and report mAP and D-ECE.
    Evaluate(EvalArgs),
    /// Fit a temperature on detections and report D-ECE before and after.
    Calibrate(CalibrateArgs),
    /// mAP on clean and per-corruption validation copies.
    GapReport(GapArgs),
    /// Run the baseline / div / div_align ablation on the synthetic benchmark.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct CorruptArgs {
    #[arg(long)]
    image: PathBuf,
    /// Write every catalog corruption at every severity plus a grid.
    #[arg(long)]
    preview: bool,
    /// Also preview corruptions excluded from the default pool.
    #[arg(long)]
    include_excluded: bool,
    #[arg(long, required_unless_present = "preview")]
    name: Option<String>,
    #[arg(long, default_value_t = 3)]
    severity: u8,
}

#[derive(Args)]
struct SynthArgs {
    /// Domain name, or `all`.
    #[arg(long, default_value = "all")]
    domain: String,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Source dataset directory.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Source dataset whose label space the data must match.
    #[arg(long)]
    source: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Detections JSONL on the data the temperature is fit on.
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Further detection files to rescale with the fitted temperature.
    #[arg(long)]
    apply: Vec<PathBuf>,
}

#[derive(Args)]
struct GapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `default`, `catalog` or a comma-separated list of corruption names.
    #[arg(long, default_value = "default")]
    pool: String,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long, value_delimiter = ',', default_value = "baseline,div,div_align")]
    variants: Vec<String>,
    /// Defaults to three consecutive seeds starting at `--seed`.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 2000)]
    train_size: usize,
    #[arg(long, default_value_t = 200)]
    val_size: usize,
    /// Skip the per-cell corruption gap report.
    #[arg(long)]
    no_gap: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: kind=UsageError msg={first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: kind={} msg={}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    create_dir(&cli.out)?;
    match &cli.command {
        Command::Corrupt(a) => corrupt(&cli, a),
        Command::Synth(a) => synth(&cli, a),
        Command::Train(a) => train_cmd(&cli, a),
        Command::Evaluate(a) => evaluate_cmd(&cli, a),
        Command::Calibrate(a) => calibrate(&cli, a),
        Command::GapReport(a) => gap_report(&cli, a),
        Command::Experiment(a) => experiment(&cli, a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn train_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::desk(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Config for a checkpoint: `--config` if given, else the `config.txt`
/// written next to it by `train`.
fn checkpoint_config(cli: &Cli, checkpoint: &Path) -> Result<TrainConfig> {
    if cli.config.is_some() {
        return train_config(cli);
    }
    let sibling = checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE);
    TrainConfig::load(&sibling)
}

fn load_source(path: &Path) -> Result<(DatasetMeta, Vec<DatasetSample>)> {
    load_all(path, DatasetRole::Source)
}

fn load_eval(path: &Path, source: Option<&Path>) -> Result<(DatasetMeta, Vec<DatasetSample>)> {
    match source {
        Some(src) => {
            let (meta, _) = dgdet::datasets::load_dataset(src, DatasetRole::Source)?;
            load_all(path, DatasetRole::Target { source_classes: meta.class_names })
        }
        None => load_source(path),
    }
}

fn check_classes(meta: &DatasetMeta, cfg: &TrainConfig) -> Result<()> {
    if meta.num_classes != cfg.detector.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, detector expects {}",
            meta.num_classes, cfg.detector.num_classes
        )));
    }
    Ok(())
}

fn corrupt(cli: &Cli, a: &CorruptArgs) -> Result<()> {
    let img = ImageTensor::load(&a.image)?;
    let seed = cli.seed.unwrap_or(0);
    if a.preview {
        let out = corrupt_preview(&img, &cli.out, a.include_excluded, seed)?;
        println!("wrote {} images and {}", out.files.len(), out.grid.display());
        return Ok(());
    }
    let name = a.name.as_deref().unwrap_or_default();
    let corrupted = apply_corruption(&img, &CorruptionSpec::new(name, a.severity), seed)?;
    let stem = a.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
    let path = cli.out.join(format!("{stem}_{name}_s{}.png", a.severity));
    corrupted.save_png(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let domains: Vec<SynthDomain> =
        if a.domain == "all" { SynthDomain::ALL.to_vec() } else { vec![a.domain.parse()?] };
    let cfg = SynthConfig { size: a.size, ..SynthConfig::default() };
    for d in domains {
        let dir = cli.out.join(d.name());
        let meta = synth_generate(d, a.n, cli.seed.unwrap_or(0), &dir, &cfg)?;
        println!("{}: {} images in {}", meta.name, meta.num_samples, dir.display());
    }
    Ok(())
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let cfg = train_config(cli)?;
    let (meta, samples) = load_source(&a.data)?;
    check_classes(&meta, &cfg)?;
    let out = train(&cfg, &samples, Some(&cli.out))?;
    if let Some(last) = out.log.last() {
        println!("trained {} iterations, final l_tot {:.4}", cfg.iterations, last.l_tot);
    }
    Ok(())
}

fn evaluate_cmd(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let cfg = checkpoint_config(cli, &a.checkpoint)?;
    let (meta, samples) = load_eval(&a.data, a.source.as_deref())?;
    check_classes(&meta, &cfg)?;
    let det = load_detector(&cfg, &a.checkpoint)?;
    let dets = detect_all(det.as_ref(), &samples);
    write_detections_jsonl(&cli.out.join("detections.jsonl"), &dets)?;
    let gts = ground_truth(&samples);
    let matches = match_detections(&dets, &gts, DEFAULT_IOU);
    let report = evaluate_matched(&dets, &matches, &gts, cfg.detector.num_classes, &meta.name);
    write(&cli.out.join("eval.json"), &serde_json::to_string_pretty(&report)?)?;
    let dece = match compute_dece(&dets, &matches, DEFAULT_BINS, DECE_SCORE_FLOOR) {
        Ok(cal) => {
            reliability_table(&cal, &cli.out, "reliability")?;
            format!("{:.4}", cal.dece)
        }
        Err(Error::EmptyDetections) => "n/a".into(),
        Err(e) => return Err(e),
    };
    println!("{}: mAP {:.2} D-ECE {dece} ({} detections)", meta.name, 100.0 * report.map, dets.len());
    Ok(())
}

fn calibrate(cli: &Cli, a: &CalibrateArgs) -> Result<()> {
    let (_, samples) = load_source(&a.data)?;
    let gts = ground_truth(&samples);
    let dets = read_detections_jsonl(&a.detections)?;
    let matches = match_detections(&dets, &gts, DEFAULT_IOU);
    let before = compute_dece(&dets, &matches, DEFAULT_BINS, DECE_SCORE_FLOOR)?;
    let t = fit_temperature(&dets, &matches, DEFAULT_BINS, DECE_SCORE_FLOOR)?;
    let scaled = apply_temperature(&dets, t);
    let rematched = match_detections(&scaled, &gts, DEFAULT_IOU);
    let after = compute_dece(&scaled, &rematched, DEFAULT_BINS, DECE_SCORE_FLOOR)?;
    reliability_table(&before, &cli.out, "reliability_before")?;
    reliability_table(&after, &cli.out, "reliability_after")?;
    write(&cli.out.join("temperature.txt"), &format!("{t}\n"))?;
    write_detections_jsonl(&cli.out.join("calibrated.jsonl"), &scaled)?;
    for path in &a.apply {
        let other = apply_temperature(&read_detections_jsonl(path)?, t);
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "detections".into());
        write_detections_jsonl(&cli.out.join(format!("{stem}_calibrated.jsonl")), &other)?;
    }
    println!("T = {t:.4}, D-ECE {:.4} -> {:.4}", before.dece, after.dece);
    Ok(())
}

fn gap_report(cli: &Cli, a: &GapArgs) -> Result<()> {
    let cfg = checkpoint_config(cli, &a.checkpoint)?;
    let (meta, samples) = load_source(&a.data)?;
    check_classes(&meta, &cfg)?;
    let det = load_detector(&cfg, &a.checkpoint)?;
    let pool = match a.pool.as_str() {
        "default" => CorruptionPool::default_pool(),
        "catalog" => CorruptionPool::full_catalog_pool(),
        list => CorruptionPool::new(&list.split(',').map(str::trim).collect::<Vec<_>>())?,
    };
    let report = domain_gap_report(det.as_ref(), &samples, pool.names(), cli.seed.unwrap_or(0))?;
    write(&cli.out.join("gap_report.csv"), &report.to_csv())?;
    println!("clean mAP {:.2}, mean gap {:.2}", 100.0 * report.clean_map, 100.0 * report.mean_gap());
    Ok(())
}

fn experiment(cli: &Cli, a: &ExperimentArgs) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let seeds = if a.seeds.is_empty() { vec![seed, seed + 1, seed + 2] } else { a.seeds.clone() };
    let mut plan = ExperimentPlan::canonical(seeds);
    if let Some(p) = &cli.config {
        plan.base = TrainConfig::load(p)?;
    }
    plan.variants = a.variants.iter().map(|v| Variant::by_name(v)).collect::<Result<_>>()?;
    plan.train_size = a.train_size;
    plan.val_size = a.val_size;
    if a.no_gap {
        plan.gap_pool.clear();
    }
    let res = run_experiment(&plan, Some(&cli.out))?;
    print!("{}", res.summary_markdown(&plan));
    Ok(())
}
