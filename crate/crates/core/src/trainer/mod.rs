//! Two-view training loop: each step pairs a clean image with a corrupted
//! copy, combines the detection loss with the weighted alignment losses and
//! takes one SGD-with-momentum step. Also hosts the per-corruption domain
//! gap report.

mod config;
#[cfg(test)]
mod tests;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::align_losses::LossBreakdown;
use crate::corruptions::{apply_corruption, CorruptionPool, CorruptionSpec};
use crate::datasets::{make_view_pair, DatasetSample, ViewPair};
use crate::detector::{build_detector, Checkpoint, Detection, Detector, PairInput, ParamSet, StepOutput};
use crate::error::{Error, Result};
use crate::eval_calib::{evaluate, ground_truth, DEFAULT_IOU};
use crate::rng::{derive_seed, stream_rng, Stream};

pub use config::TrainConfig;

/// Score threshold and NMS IoU used whenever a trained detector is scored.
pub const EVAL_SCORE_THRESH: f64 = 0.05;
pub const EVAL_NMS_IOU: f64 = 0.5;
/// Severity used by the domain gap report.
pub const GAP_SEVERITY: u8 = 3;

pub struct TrainState {
    pub detector: Box<dyn Detector>,
    pub momentum: ParamSet,
    /// Number of completed steps.
    pub iteration: usize,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let detector = build_detector(&cfg.detector, cfg.seed)?;
        let momentum = detector.params().zeros_like();
        Ok(Self { detector, momentum, iteration: 0 })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.detector.config().hash(),
            iteration: self.iteration as u64,
            params: self.detector.params().clone(),
            momentum: Some(self.momentum.clone()),
        }
    }

    pub fn from_checkpoint(cfg: &TrainConfig, ck: Checkpoint) -> Result<Self> {
        if ck.config_hash != cfg.detector.hash() {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        let mut state = Self::new(cfg)?;
        state.detector.load_params(ck.params)?;
        if let Some(m) = ck.momentum {
            if !m.same_layout(&state.momentum) {
                return Err(Error::Checkpoint("momentum layout mismatch".into()));
            }
            state.momentum = m;
        }
        state.iteration = ck.iteration as usize;
        Ok(state)
    }
}

/// Loads a detector for inference from a checkpoint written for `cfg`.
pub fn load_detector(cfg: &TrainConfig, path: &Path) -> Result<Box<dyn Detector>> {
    let ck = Checkpoint::load(path, &cfg.detector.hash())?;
    Ok(TrainState::from_checkpoint(cfg, ck)?.detector)
}

/// Learning rate for step `iteration` (0-based): `base_lr · 0.1^k` after
/// `k` drops, with an optional linear warm-up.
pub fn lr_at(cfg: &TrainConfig, iteration: usize) -> f64 {
    let drops = cfg.lr_drops.iter().filter(|&&d| iteration >= d).count() as i32;
    let mut lr = cfg.base_lr * 0.1f64.powi(drops);
    if iteration < cfg.warmup_iters {
        lr *= (iteration + 1) as f64 / cfg.warmup_iters as f64;
    }
    lr
}

/// Dataset indices for step `iteration`: consecutive slices of a per-epoch
/// permutation drawn from the data stream.
pub fn batch_indices(cfg: &TrainConfig, n: usize, iteration: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(cfg.batch_size);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for slot in 0..cfg.batch_size {
        let g = iteration * cfg.batch_size + slot;
        let (epoch, pos) = (g / n, g % n);
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut stream_rng(cfg.seed, Stream::Data, &[epoch as u64]));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("filled above").1[pos]);
    }
    out
}

/// Clean/corrupted pairs for step `iteration`; every slot has its own
/// corruption stream, so the batch does not depend on scheduling.
pub fn make_batch(
    cfg: &TrainConfig,
    samples: &[DatasetSample],
    pool: &CorruptionPool,
    iteration: usize,
) -> Result<Vec<ViewPair>> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let idx = batch_indices(cfg, samples.len(), iteration);
    crate::par::map_indexed(&idx, |slot, &i| {
        let mut rng = stream_rng(cfg.seed, Stream::Corruption, &[iteration as u64, slot as u64]);
        make_view_pair(&samples[i], pool, &mut rng)
    })
    .into_iter()
    .collect()
}

fn sampling_rng(cfg: &TrainConfig, iteration: usize, slot: usize) -> rand_chacha::ChaCha8Rng {
    stream_rng(cfg.seed, Stream::Sampling, &[iteration as u64, slot as u64])
}

fn tag_nan(err: Error, iteration: usize, ids: &[String]) -> Error {
    match err {
        Error::NaNLoss { .. } => Error::NaNLoss { iteration, image_ids: ids.to_vec() },
        Error::NotADistribution { sum, .. } if !sum.is_finite() => Error::NaNLoss { iteration, image_ids: ids.to_vec() },
        other => other,
    }
}

/// Averages per-image losses and gradients in slot order, then updates the
/// parameters.
fn apply_outputs(state: &mut TrainState, cfg: &TrainConfig, outs: Vec<StepOutput>, ids: &[String]) -> Result<LossBreakdown> {
    let n = outs.len() as f64;
    let mut grads = state.detector.params().zeros_like();
    let (mut l_det, mut l_cal, mut l_ral) = (0.0, 0.0, 0.0);
    for o in &outs {
        grads.add_assign(&o.grads);
        l_det += o.breakdown.l_det;
        l_cal += o.breakdown.l_cal;
        l_ral += o.breakdown.l_ral;
    }
    grads.scale((1.0 / n) as f32);
    let (alpha, beta) = (outs[0].breakdown.alpha, outs[0].breakdown.beta);
    let loss = crate::align_losses::total_loss(l_det / n, l_cal / n, l_ral / n, alpha, beta)?;
    if !loss.l_tot.is_finite() || !grads.all_finite() {
        return Err(Error::NaNLoss { iteration: state.iteration, image_ids: ids.to_vec() });
    }
    sgd_update(state, cfg, &grads, lr_at(cfg, state.iteration));
    state.iteration += 1;
    Ok(loss)
}

fn sgd_update(state: &mut TrainState, cfg: &TrainConfig, grads: &ParamSet, lr: f64) {
    let clip = if cfg.grad_clip > 0.0 {
        let norm = grads.sq_norm().sqrt();
        if norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 }
    } else {
        1.0
    };
    let (mu, wd, lr, clip) = (cfg.momentum as f32, cfg.weight_decay as f32, lr as f32, clip as f32);
    let params = state.detector.params_mut();
    for ((p, v), g) in params.tensors_mut().zip(state.momentum.tensors_mut()).zip(grads.tensors()) {
        for ((pp, vv), gg) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *vv = mu * *vv + clip * *gg + wd * *pp;
            *pp -= lr * *vv;
        }
    }
}

/// One two-view step over `batch`.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, batch: &[ViewPair]) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let it = state.iteration;
    let opts = cfg.step_options();
    let ids: Vec<String> = batch.iter().map(|p| p.image_id.clone()).collect();
    let det = state.detector.as_ref();
    let outs = crate::par::map_indexed(batch, |slot, pair| {
        let input = PairInput { original: &pair.original, augmented: &pair.augmented, labels: &pair.labels };
        det.pair_step(input, &opts, &mut sampling_rng(cfg, it, slot))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()
    .map_err(|e| tag_nan(e, it, &ids))?;
    apply_outputs(state, cfg, outs, &ids)
}

/// Plain supervised step on clean images only.
pub fn single_view_step(state: &mut TrainState, cfg: &TrainConfig, batch: &[&DatasetSample]) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let it = state.iteration;
    let ids: Vec<String> = batch.iter().map(|s| s.image_id.clone()).collect();
    let det = state.detector.as_ref();
    let outs = crate::par::map_indexed(batch, |slot, s| {
        det.single_view_step(&s.image, &s.labels, cfg.label_smoothing, &mut sampling_rng(cfg, it, slot))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()
    .map_err(|e| tag_nan(e, it, &ids))?;
    apply_outputs(state, cfg, outs, &ids)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub lr: f64,
    pub l_det: f64,
    pub l_cal: f64,
    pub l_ral: f64,
    pub l_tot: f64,
}

pub const LOG_HEADER: &str = "iteration,lr,l_det,l_cal,l_ral,l_tot";

impl LogRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:e},{:.8},{:.8},{:.8},{:.8}",
            self.iteration, self.lr, self.l_det, self.l_cal, self.l_ral, self.l_tot
        )
    }
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogRow>,
}

fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("checkpoint_{iteration:06}.bin"))
}

pub const FINAL_CHECKPOINT: &str = "checkpoint_final.bin";
pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "log.csv";

/// Runs the schedule from scratch. With `out`, writes `config.txt`,
/// `log.csv`, periodic checkpoints and `checkpoint_final.bin`.
pub fn train(cfg: &TrainConfig, samples: &[DatasetSample], out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let state = TrainState::new(cfg)?;
    resume(cfg, samples, state, out)
}

/// Continues training `state` up to `cfg.iterations`.
pub fn resume(cfg: &TrainConfig, samples: &[DatasetSample], mut state: TrainState, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let pool = cfg.corruption_pool()?;
    let mut log_file = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let cfg_path = dir.join(CONFIG_FILE);
            std::fs::write(&cfg_path, cfg.to_kv()).map_err(|e| Error::io(&cfg_path, e))?;
            let path = dir.join(LOG_FILE);
            let fresh = state.iteration == 0 || !path.exists();
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if fresh {
                writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };
    let mut log = Vec::new();
    while state.iteration < cfg.iterations {
        let it = state.iteration;
        let batch = make_batch(cfg, samples, &pool, it)?;
        let loss = train_step(&mut state, cfg, &batch)?;
        let row = LogRow { iteration: it, lr: lr_at(cfg, it), l_det: loss.l_det, l_cal: loss.l_cal, l_ral: loss.l_ral, l_tot: loss.l_tot };
        if let Some((f, path)) = log_file.as_mut() {
            writeln!(f, "{}", row.csv_line()).map_err(|e| Error::io(&*path, e))?;
        }
        log.push(row);
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && state.iteration.is_multiple_of(cfg.checkpoint_every) && state.iteration < cfg.iterations {
                state.checkpoint().save(&checkpoint_path(dir, state.iteration))?;
            }
        }
        if it.is_multiple_of(100) {
            log::debug!("iter {it} lr {:.4e} l_tot {:.4}", row.lr, row.l_tot);
        }
    }
    if let Some(dir) = out {
        state.checkpoint().save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome { state, log })
}

/// Runs the detector over every sample.
pub fn detect_all(det: &dyn Detector, samples: &[DatasetSample]) -> Vec<Detection> {
    crate::par::map(samples, |s| det.detect(&s.image_id, &s.image, EVAL_SCORE_THRESH, EVAL_NMS_IOU))
        .into_iter()
        .flatten()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub corruption: String,
    pub severity: u8,
    pub map: f64,
    /// Clean mAP minus corrupted mAP.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub clean_map: f64,
    pub rows: Vec<GapRow>,
}

impl GapReport {
    /// Mean gap over the corruption rows (the identity row included if it
    /// was in the pool).
    pub fn mean_gap(&self) -> f64 {
        if self.rows.is_empty() {
            0.0
        } else {
            self.rows.iter().map(|r| r.gap).sum::<f64>() / self.rows.len() as f64
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("corruption,severity,map,gap\n");
        let _ = writeln!(s, "clean,0,{:.6},0.000000", self.clean_map);
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.6},{:.6}", r.corruption, r.severity, r.map, r.gap);
        }
        s
    }
}

/// mAP on the clean set and on the set corrupted by each pool member in
/// turn at severity 3.
pub fn domain_gap_report(det: &dyn Detector, val: &[DatasetSample], pool_names: &[String], seed: u64) -> Result<GapReport> {
    let k = det.config().num_classes;
    let gts = ground_truth(val);
    let clean_map = evaluate(&detect_all(det, val), &gts, k, DEFAULT_IOU, "clean").map;
    let mut rows = Vec::with_capacity(pool_names.len());
    for name in pool_names {
        let spec = if name == crate::corruptions::IDENTITY {
            CorruptionSpec::identity()
        } else {
            CorruptionSpec::new(name.clone(), GAP_SEVERITY)
        };
        let corrupted = crate::par::map_indexed(val, |i, s| {
            let seed = derive_seed(&[seed, i as u64]);
            apply_corruption(&s.image, &spec, seed).map(|image| DatasetSample { image, ..s.clone() })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let map = evaluate(&detect_all(det, &corrupted), &gts, k, DEFAULT_IOU, name).map;
        rows.push(GapRow { corruption: name.clone(), severity: spec.severity, map, gap: clean_map - map });
    }
    Ok(GapReport { clean_map, rows })
}
