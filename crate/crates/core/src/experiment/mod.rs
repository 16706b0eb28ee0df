//! Experiment driver for the baseline / div / div_align ablation and the
//! corruption preview sheet.


use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::corruptions::{apply_corruption, list_catalog, CorruptionSpec, SEVERITY_LEVELS};
use crate::datasets::synth::{synth_samples, SynthConfig, SynthDomain};
use crate::datasets::DatasetSample;
use crate::detector::DetLossOn;
use crate::error::{Error, Result};
use crate::eval_calib::{compute_dece, evaluate_matched, ground_truth, match_detections, DECE_SCORE_FLOOR, DEFAULT_BINS, DEFAULT_IOU};
use crate::image::ImageTensor;
use crate::rng::derive_seed;
use crate::trainer::{detect_all, domain_gap_report, train, GapReport, TrainConfig};

pub const RESULTS_FILE: &str = "results.csv";
pub const GAPS_FILE: &str = "gaps.csv";
pub const SUMMARY_FILE: &str = "summary.md";
pub const RESULTS_HEADER: &str = "variant,seed,domain,map,dece";

/// One ablation row: the training-config overrides that define it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub pool: String,
    pub alpha: f64,
    pub beta: f64,
    pub det_loss_on: DetLossOn,
}

impl Variant {
    fn new(name: &str, pool: &str, alpha: f64, beta: f64, det_loss_on: DetLossOn) -> Self {
        Self { name: name.into(), pool: pool.into(), alpha, beta, det_loss_on }
    }

    pub fn baseline() -> Self {
        Self::new("baseline", "identity", 0.0, 0.0, DetLossOn::Clean)
    }

    pub fn div() -> Self {
        Self::new("div", "default", 0.0, 0.0, DetLossOn::Both)
    }

    pub fn div_align() -> Self {
        Self::new("div_align", "default", 1.0, 1.0, DetLossOn::Both)
    }

    pub fn div_cal() -> Self {
        Self::new("div_cal", "default", 1.0, 0.0, DetLossOn::Both)
    }

    pub fn div_ral() -> Self {
        Self::new("div_ral", "default", 0.0, 1.0, DetLossOn::Both)
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "baseline" => Ok(Self::baseline()),
            "div" => Ok(Self::div()),
            "div_align" => Ok(Self::div_align()),
            "div_cal" => Ok(Self::div_cal()),
            "div_ral" => Ok(Self::div_ral()),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }

    pub fn apply(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.pool = self.pool.clone();
        cfg.alpha = self.alpha;
        cfg.beta = self.beta;
        cfg.det_loss_on = self.det_loss_on;
        cfg.seed = seed;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Training settings shared by every variant.
    pub base: TrainConfig,
    /// Evaluation domains; the source domain is the in-domain set.
    pub domains: Vec<SynthDomain>,
    pub train_size: usize,
    pub val_size: usize,
    pub data_seed: u64,
    pub synth: SynthConfig,
    /// Corruptions for the per-cell gap report; empty skips it.
    pub gap_pool: Vec<String>,
}

impl ExperimentPlan {
    /// The three-row ablation on the synthetic benchmark with the desk preset.
    pub fn canonical(seeds: Vec<u64>) -> Self {
        Self {
            variants: vec![Variant::baseline(), Variant::div(), Variant::div_align()],
            seeds,
            base: TrainConfig::desk(),
            domains: SynthDomain::ALL.to_vec(),
            train_size: 2_000,
            val_size: 200,
            data_seed: 0,
            synth: SynthConfig::default(),
            gap_pool: crate::corruptions::CorruptionPool::default_pool().names().to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("experiment needs at least one variant".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("experiment needs at least one seed".into()));
        }
        if self.domains.is_empty() {
            return Err(Error::Config("experiment needs at least one domain".into()));
        }
        if self.train_size == 0 || self.val_size == 0 {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        for (i, v) in self.variants.iter().enumerate() {
            if self.variants[..i].iter().any(|u| u.name == v.name) {
                return Err(Error::Config(format!("duplicate variant `{}`", v.name)));
            }
            v.apply(&self.base, 0).validate()?;
        }
        Ok(())
    }

    pub fn train_set(&self) -> Result<Vec<DatasetSample>> {
        synth_samples(SynthDomain::SourcePlain, self.train_size, self.data_seed, &self.synth)
    }

    /// Held-out set of a domain; scenes are shared across domains and
    /// disjoint from the training scenes.
    pub fn val_set(&self, domain: SynthDomain) -> Result<Vec<DatasetSample>> {
        synth_samples(domain, self.val_size, derive_seed(&[self.data_seed, 1]), &self.synth)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: String,
    pub seed: u64,
    pub domain: String,
    pub map: f64,
    /// NaN when no detection clears the score floor.
    pub dece: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellGap {
    pub variant: String,
    pub seed: u64,
    pub report: GapReport,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentResults {
    pub rows: Vec<ResultRow>,
    pub gaps: Vec<CellGap>,
    /// Training wall time per cell, in seconds, in run order.
    pub train_seconds: Vec<(String, u64, f64)>,
}

fn fmt_metric(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else {
        "nan".into()
    }
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut s = format!("{RESULTS_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.variant, r.seed, r.domain, fmt_metric(r.map), fmt_metric(r.dece));
    }
    s
}

pub fn gaps_csv(gaps: &[CellGap]) -> String {
    let mut s = String::from("variant,seed,corruption,severity,map,gap\n");
    for g in gaps {
        let _ = writeln!(s, "{},{},clean,0,{},0.000000", g.variant, g.seed, fmt_metric(g.report.clean_map));
        for r in &g.report.rows {
            let _ = writeln!(s, "{},{},{},{},{},{}", g.variant, g.seed, r.corruption, r.severity, fmt_metric(r.map), fmt_metric(r.gap));
        }
    }
    s
}

/// Median of the finite values; NaN when there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl ExperimentResults {
    pub fn cell_values(&self, variant: &str, domain: &str, metric: impl Fn(&ResultRow) -> f64) -> Vec<f64> {
        self.rows.iter().filter(|r| r.variant == variant && r.domain == domain).map(metric).collect()
    }

    pub fn median_map(&self, variant: &str, domain: &str) -> f64 {
        median(&self.cell_values(variant, domain, |r| r.map))
    }

    pub fn median_dece(&self, variant: &str, domain: &str) -> f64 {
        median(&self.cell_values(variant, domain, |r| r.dece))
    }

    /// Median over seeds of the per-seed mean of `metric` over the target
    /// (non-source) domains present in the results.
    pub fn median_out_domain(&self, variant: &str, metric: impl Fn(&ResultRow) -> f64) -> f64 {
        let source = SynthDomain::SourcePlain.name();
        let mut seeds: Vec<u64> = self.rows.iter().filter(|r| r.variant == variant).map(|r| r.seed).collect();
        seeds.dedup();
        let per_seed: Vec<f64> = seeds
            .iter()
            .map(|&s| {
                let v: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.variant == variant && r.seed == s && r.domain != source)
                    .map(&metric)
                    .collect();
                v.iter().sum::<f64>() / v.len() as f64
            })
            .collect();
        median(&per_seed)
    }

    /// Median over seeds of the mean per-corruption gap.
    pub fn median_gap(&self, variant: &str) -> f64 {
        let v: Vec<f64> = self.gaps.iter().filter(|g| g.variant == variant).map(|g| g.report.mean_gap()).collect();
        median(&v)
    }

    pub fn summary_markdown(&self, plan: &ExperimentPlan) -> String {
        let mut s = format!("# Experiment summary\n\nMedians over seeds {:?}.\n\n", plan.seeds);
        s.push_str("| variant | domain | mAP | D-ECE |\n|---|---|---|---|\n");
        for v in &plan.variants {
            for d in &plan.domains {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} |",
                    v.name,
                    d.name(),
                    fmt_metric(100.0 * self.median_map(&v.name, d.name())),
                    fmt_metric(self.median_dece(&v.name, d.name()))
                );
            }
        }
        s.push_str("\n| variant | out-domain mAP | out-domain D-ECE |\n|---|---|---|\n");
        for v in &plan.variants {
            let _ = writeln!(
                s,
                "| {} | {} | {} |",
                v.name,
                fmt_metric(100.0 * self.median_out_domain(&v.name, |r| r.map)),
                fmt_metric(self.median_out_domain(&v.name, |r| r.dece))
            );
        }
        if !self.gaps.is_empty() {
            s.push_str("\n| variant | mean corruption gap (mAP) |\n|---|---|\n");
            for v in &plan.variants {
                let _ = writeln!(s, "| {} | {} |", v.name, fmt_metric(100.0 * self.median_gap(&v.name)));
            }
        }
        s
    }
}

/// Writes through a temporary file and a rename so a reader never sees a
/// half-written table.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn cell_dir(out: &Path, variant: &str, seed: u64) -> PathBuf {
    out.join("cells").join(format!("{variant}_seed{seed}"))
}

fn eval_rows(det: &dyn crate::detector::Detector, variant: &str, seed: u64, sets: &[(SynthDomain, Vec<DatasetSample>)]) -> Result<Vec<ResultRow>> {
    let k = det.config().num_classes;
    sets.iter()
        .map(|(domain, samples)| {
            let dets = detect_all(det, samples);
            let gts = ground_truth(samples);
            let matches = match_detections(&dets, &gts, DEFAULT_IOU);
            let map = evaluate_matched(&dets, &matches, &gts, k, domain.name()).map;
            let dece = match compute_dece(&dets, &matches, DEFAULT_BINS, DECE_SCORE_FLOOR) {
                Ok(r) => r.dece,
                Err(Error::EmptyDetections) => f64::NAN,
                Err(e) => return Err(e),
            };
            Ok(ResultRow { variant: variant.into(), seed, domain: domain.name().into(), map, dece })
        })
        .collect()
}

/// Trains every variant for every seed, evaluates on each domain and, when
/// `out` is given, rewrites the results, gap and summary files after each
/// completed cell.
pub fn run_experiment(plan: &ExperimentPlan, out: Option<&Path>) -> Result<ExperimentResults> {
    plan.validate()?;
    let train_set = plan.train_set()?;
    let sets = plan
        .domains
        .iter()
        .map(|&d| plan.val_set(d).map(|s| (d, s)))
        .collect::<Result<Vec<_>>>()?;
    let source_val = plan.val_set(SynthDomain::SourcePlain)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut results = ExperimentResults::default();
    for variant in &plan.variants {
        for &seed in &plan.seeds {
            let cfg = variant.apply(&plan.base, seed);
            let dir = out.map(|o| cell_dir(o, &variant.name, seed));
            if let Some(d) = &dir {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            let t = Instant::now();
            let trained = train(&cfg, &train_set, dir.as_deref())?;
            results.train_seconds.push((variant.name.clone(), seed, t.elapsed().as_secs_f64()));
            let det = trained.state.detector.as_ref();
            results.rows.extend(eval_rows(det, &variant.name, seed, &sets)?);
            if !plan.gap_pool.is_empty() {
                let report = domain_gap_report(det, &source_val, &plan.gap_pool, derive_seed(&[plan.data_seed, 2]))?;
                results.gaps.push(CellGap { variant: variant.name.clone(), seed, report });
            }
            log::info!("finished {} seed {seed} in {:.1}s", variant.name, t.elapsed().as_secs_f64());
            if let Some(dir) = out {
                write_atomic(&dir.join(RESULTS_FILE), &results_csv(&results.rows))?;
                if !results.gaps.is_empty() {
                    write_atomic(&dir.join(GAPS_FILE), &gaps_csv(&results.gaps))?;
                }
                write_atomic(&dir.join(SUMMARY_FILE), &results.summary_markdown(plan))?;
            }
        }
    }
    Ok(results)
}

/// Files written by [`corrupt_preview`].
#[derive(Debug, Clone, PartialEq)]
pub struct PreviewOutput {
    pub files: Vec<PathBuf>,
    pub grid: PathBuf,
}

/// Writes one image per (corruption, severity) and a contact sheet with the
/// original in the first column and severities 1..5 after it.
pub fn corrupt_preview(img: &ImageTensor, out: &Path, include_excluded: bool, seed: u64) -> Result<PreviewOutput> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let names: Vec<String> = list_catalog()
        .into_iter()
        .filter(|e| include_excluded || !e.excluded_by_default)
        .map(|e| e.name)
        .collect();
    let (h, w) = (img.height() as u32, img.width() as u32);
    let gap = 2u32;
    let cols = SEVERITY_LEVELS as u32 + 1;
    let mut sheet = RgbImage::from_pixel(cols * (w + gap) + gap, names.len() as u32 * (h + gap) + gap, Rgb([255, 255, 255]));
    let original = img.to_rgb8();
    let mut files = Vec::with_capacity(names.len() * SEVERITY_LEVELS);
    for (row, name) in names.iter().enumerate() {
        let y0 = gap + row as u32 * (h + gap);
        image::imageops::replace(&mut sheet, &original, gap as i64, y0 as i64);
        for sev in 1..=SEVERITY_LEVELS as u8 {
            let spec = CorruptionSpec::new(name.clone(), sev);
            let corrupted = apply_corruption(img, &spec, derive_seed(&[seed, sev as u64]))?;
            let path = out.join(format!("{name}_s{sev}.png"));
            corrupted.save_png(&path)?;
            files.push(path);
            let x0 = gap + sev as u32 * (w + gap);
            image::imageops::replace(&mut sheet, &corrupted.to_rgb8(), x0 as i64, y0 as i64);
        }
    }
    let grid = out.join("grid.png");
    sheet.save(&grid)?;
    Ok(PreviewOutput { files, grid })
}
