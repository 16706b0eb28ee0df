//! Training configuration and its flat `key = value` file format.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are
//! comma-separated; `none` clears optional values.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corruptions::CorruptionPool;
use crate::detector::{DetLossOn, DetectorConfig, DetectorKind, StepOptions};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    /// `default` (active catalog), `identity`, `catalog` (including
    /// excluded entries) or a comma-separated list of names.
    pub pool: String,
    pub fixed_severity: Option<u8>,
    pub iterations: usize,
    pub base_lr: f64,
    pub lr_drops: Vec<usize>,
    pub warmup_iters: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub det_loss_on: DetLossOn,
    pub stop_grad_clean: bool,
    pub label_smoothing: f64,
    pub align_foreground_only: bool,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub detector: DetectorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Reference schedule: 18k iterations, lr 0.2 dropped at 12k and 16k,
    /// 16 images per batch.
    pub fn full() -> Self {
        Self {
            iterations: 18_000,
            base_lr: 0.2,
            lr_drops: vec![12_000, 16_000],
            batch_size: 16,
            ..Self::desk()
        }
    }

    /// Desk-scale schedule with the same drop proportions.
    pub fn desk() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            pool: "default".into(),
            fixed_severity: None,
            iterations: 4_000,
            base_lr: 0.01,
            lr_drops: vec![2_667, 3_556],
            warmup_iters: 0,
            batch_size: 8,
            seed: 0,
            det_loss_on: DetLossOn::Clean,
            stop_grad_clean: false,
            label_smoothing: 0.0,
            align_foreground_only: false,
            momentum: 0.9,
            weight_decay: 5e-4,
            grad_clip: 0.0,
            checkpoint_every: 0,
            detector: DetectorConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !self.lr_drops.windows(2).all(|w| w[0] < w[1]) || self.lr_drops.iter().any(|&d| d >= self.iterations) {
            return bad(format!("lr_drops {:?} must be strictly increasing and below iterations", self.lr_drops));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::NegativeWeight(self.alpha));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::NegativeWeight(self.beta));
        }
        if !(self.base_lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("base_lr > 0, momentum in [0, 1) and weight_decay >= 0 required".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must be in [0, 1)".into());
        }
        self.detector.validate()?;
        self.corruption_pool().map(|_| ())
    }

    pub fn corruption_pool(&self) -> Result<CorruptionPool> {
        let pool = match self.pool.as_str() {
            "default" => CorruptionPool::default_pool(),
            "identity" => CorruptionPool::identity(),
            "catalog" => CorruptionPool::full_catalog_pool(),
            list => {
                let names: Vec<&str> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
                CorruptionPool::new(&names)?
            }
        };
        match self.fixed_severity {
            Some(s) => pool.with_fixed_severity(s),
            None => Ok(pool),
        }
    }

    pub fn step_options(&self) -> StepOptions {
        StepOptions {
            alpha: self.alpha,
            beta: self.beta,
            det_loss_on: self.det_loss_on,
            stop_grad_clean: self.stop_grad_clean,
            label_smoothing: self.label_smoothing,
            align_foreground_only: self.align_foreground_only,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("invalid boolean `{v}` for `{key}`"))),
            }
        }
        fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
            if v.is_empty() || v == "none" {
                return Ok(Vec::new());
            }
            v.split(',').map(|p| num(key, p.trim())).collect()
        }
        let d = &mut self.detector;
        match key {
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "pool" => self.pool = value.to_string(),
            "fixed_severity" => {
                self.fixed_severity = if value == "none" { None } else { Some(num(key, value)?) }
            }
            "iterations" => self.iterations = num(key, value)?,
            "base_lr" => self.base_lr = num(key, value)?,
            "lr_drops" => self.lr_drops = list(key, value)?,
            "warmup_iters" => self.warmup_iters = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "det_loss_on" => self.det_loss_on = value.parse()?,
            "stop_grad_clean" => self.stop_grad_clean = flag(key, value)?,
            "label_smoothing" => self.label_smoothing = num(key, value)?,
            "align_foreground_only" => self.align_foreground_only = flag(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "detector_kind" => d.kind = value.parse::<DetectorKind>()?,
            "num_classes" => d.num_classes = num(key, value)?,
            "channels" => d.channels = num(key, value)?,
            "hidden" => d.hidden = num(key, value)?,
            "anchor_sizes" => d.anchor_sizes = list(key, value)?,
            "proposals" => d.proposals = num(key, value)?,
            "rpn_nms_iou" => d.rpn_nms_iou = num(key, value)?,
            "roi_batch" => d.roi_batch = num(key, value)?,
            "roi_fg_fraction" => d.roi_fg_fraction = num(key, value)?,
            "rpn_batch" => d.rpn_batch = num(key, value)?,
            "center_radius" => d.center_radius = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Parses a config file; a `preset = full|desk` line, if present, must
    /// come first and selects the starting point.
    pub fn from_kv(text: &str) -> Result<Self> {
        let first = text
            .lines()
            .map(str::trim)
            .find(|l| !l.is_empty() && !l.starts_with('#'));
        let (mut cfg, rest) = match first.and_then(|l| l.split_once('=')) {
            Some((k, v)) if k.trim() == "preset" => {
                let cfg = match v.trim() {
                    "full" => Self::full(),
                    "desk" => Self::desk(),
                    other => return Err(Error::Config(format!("unknown preset `{other}`"))),
                };
                let pos = text.find(first.unwrap()).unwrap() + first.unwrap().len();
                (cfg, &text[pos..])
            }
            _ => (Self::desk(), text),
        };
        cfg.apply_kv(rest)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv(&text)
    }

    pub fn to_kv(&self) -> String {
        let join = |v: &[String]| if v.is_empty() { "none".to_string() } else { v.join(",") };
        let d = &self.detector;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("detector_kind", d.kind.to_string());
        put("alpha", self.alpha.to_string());
        put("beta", self.beta.to_string());
        put("pool", self.pool.clone());
        put("fixed_severity", self.fixed_severity.map_or("none".into(), |v| v.to_string()));
        put("iterations", self.iterations.to_string());
        put("base_lr", self.base_lr.to_string());
        put("lr_drops", join(&self.lr_drops.iter().map(|v| v.to_string()).collect::<Vec<_>>()));
        put("warmup_iters", self.warmup_iters.to_string());
        put("batch_size", self.batch_size.to_string());
        put("seed", self.seed.to_string());
        put("det_loss_on", self.det_loss_on.to_string());
        put("stop_grad_clean", self.stop_grad_clean.to_string());
        put("label_smoothing", self.label_smoothing.to_string());
        put("align_foreground_only", self.align_foreground_only.to_string());
        put("momentum", self.momentum.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("grad_clip", self.grad_clip.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("num_classes", d.num_classes.to_string());
        put("channels", d.channels.to_string());
        put("hidden", d.hidden.to_string());
        put("anchor_sizes", join(&d.anchor_sizes.iter().map(|v| v.to_string()).collect::<Vec<_>>()));
        put("proposals", d.proposals.to_string());
        put("rpn_nms_iou", d.rpn_nms_iou.to_string());
        put("roi_batch", d.roi_batch.to_string());
        put("roi_fg_fraction", d.roi_fg_fraction.to_string());
        put("rpn_batch", d.rpn_batch.to_string());
        put("center_radius", d.center_radius.to_string());
        s
    }
}
