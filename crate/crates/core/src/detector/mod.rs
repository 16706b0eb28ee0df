//! Detector adapters. A [`Detector`] exposes inference and the per-image
//! training steps; [`TwoStageDetector`] additionally exposes the
//! feature / proposal / pooled-prediction stages that the view-alignment
//! objective cross-wires, and [`OneStageDetector`] pairs dense outputs by
//! location instead.

pub mod backbone;
pub mod boxes;
pub mod nn;
mod one_stage;
pub mod params;
pub mod roi_align;
pub mod targets;
mod two_stage;

#[cfg(test)]
mod tests;

use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align_losses::{
    classification_alignment_grad, localization_alignment_grad, LossBreakdown, DIST_TOL,
};
use crate::bbox::BBox;
use crate::datasets::BoxLabel;
use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub use one_stage::{onestage_align_points, AlignedPoints, DenseHeadOutput, OneStageDetector};
pub use params::{Checkpoint, ParamId, ParamSet};
pub use two_stage::TwoStageDetector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    TwoStage,
    OneStage,
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DetectorKind::TwoStage => "two_stage",
            DetectorKind::OneStage => "one_stage",
        })
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_stage" => Ok(DetectorKind::TwoStage),
            "one_stage" => Ok(DetectorKind::OneStage),
            other => Err(Error::Config(format!("unknown detector kind `{other}`"))),
        }
    }
}

/// Architecture and target-assignment settings. Everything here feeds the
/// checkpoint hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub kind: DetectorKind,
    /// Foreground classes; the heads predict `num_classes + 1` ways.
    pub num_classes: usize,
    pub channels: usize,
    pub hidden: usize,
    pub anchor_sizes: Vec<f64>,
    /// Post-NMS proposal cap `Z`.
    pub proposals: usize,
    pub rpn_nms_iou: f64,
    pub min_proposal_side: f64,
    pub pooled: usize,
    pub sampling_ratio: usize,
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f64,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub roi_batch: usize,
    pub roi_fg_fraction: f64,
    pub roi_fg_iou: f64,
    /// Dense-head centre-sampling radius in strides.
    pub center_radius: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            kind: DetectorKind::TwoStage,
            num_classes: 4,
            channels: 64,
            hidden: 128,
            anchor_sizes: vec![12.0, 20.0, 30.0],
            proposals: 64,
            rpn_nms_iou: 0.7,
            min_proposal_side: 1.0,
            pooled: 3,
            sampling_ratio: 2,
            rpn_batch: 64,
            rpn_pos_fraction: 0.5,
            rpn_pos_iou: 0.6,
            rpn_neg_iou: 0.3,
            roi_batch: 48,
            roi_fg_fraction: 0.25,
            roi_fg_iou: 0.5,
            center_radius: 1.5,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1");
        }
        if self.channels < 2 || self.hidden == 0 || self.pooled == 0 || self.sampling_ratio == 0 {
            return bad("channels >= 2, hidden, pooled and sampling_ratio >= 1 required");
        }
        if self.anchor_sizes.is_empty() || self.anchor_sizes.iter().any(|s| !(*s > 0.0)) {
            return bad("anchor_sizes must be positive and non-empty");
        }
        if self.proposals == 0 || self.rpn_batch == 0 || self.roi_batch == 0 {
            return bad("proposals, rpn_batch and roi_batch must be positive");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }
}

/// Backbone output, `channels × height × width` in channel-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Vec<f32>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub image_height: usize,
    pub image_width: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProposalSet {
    pub boxes: Vec<BBox>,
    pub objectness: Vec<f64>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Reorders proposals; row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            boxes: perm.iter().map(|&i| self.boxes[i]).collect(),
            objectness: perm.iter().map(|&i| self.objectness[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// `Z × (K+1)`, background in column 0.
    pub probs: Array2<f64>,
    /// `Z × 4` decoded, clamped absolute boxes.
    pub boxes: Array2<f64>,
    pub proposals: ProposalSet,
}

/// Checks that every row is a distribution within [`DIST_TOL`].
pub fn check_prob_rows(probs: ArrayView2<f64>) -> Result<()> {
    for (row, r) in probs.rows().into_iter().enumerate() {
        let sum: f64 = r.sum();
        if r.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > DIST_TOL {
            return Err(Error::NotADistribution { row, sum });
        }
    }
    Ok(())
}

impl HeadOutput {
    pub fn validate(&self) -> Result<()> {
        if self.boxes.nrows() != self.probs.nrows() || self.boxes.ncols() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "probs {:?} vs boxes {:?}",
                self.probs.dim(),
                self.boxes.dim()
            )));
        }
        check_prob_rows(self.probs.view())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub class_id: u32,
    pub score: f64,
    #[serde(rename = "probs")]
    pub full_probs: Vec<f64>,
    #[serde(rename = "bbox")]
    pub bbox: [f64; 4],
}

impl Detection {
    pub fn bbox(&self) -> BBox {
        BBox::from_array(self.bbox)
    }
}

/// Writes one JSON object per line.
pub fn write_detections_jsonl(path: &Path, detections: &[Detection]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in detections {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_detections_jsonl(path: &Path) -> Result<Vec<Detection>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Detection = serde_json::from_str(&line)
            .map_err(|e| Error::Schema(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(d);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetLossOn {
    Clean,
    Both,
}

impl FromStr for DetLossOn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(DetLossOn::Clean),
            "both" => Ok(DetLossOn::Both),
            other => Err(Error::Config(format!("det_loss_on must be clean or both, got `{other}`"))),
        }
    }
}

impl fmt::Display for DetLossOn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DetLossOn::Clean => "clean",
            DetLossOn::Both => "both",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    pub alpha: f64,
    pub beta: f64,
    pub det_loss_on: DetLossOn,
    pub stop_grad_clean: bool,
    pub label_smoothing: f64,
    /// Restrict alignment to proposals (or locations) assigned foreground.
    pub align_foreground_only: bool,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            det_loss_on: DetLossOn::Clean,
            stop_grad_clean: false,
            label_smoothing: 0.0,
            align_foreground_only: false,
        }
    }
}

/// One clean/corrupted pair as seen by a training step.
#[derive(Debug, Clone, Copy)]
pub struct PairInput<'a> {
    pub original: &'a ImageTensor,
    pub augmented: &'a ImageTensor,
    pub labels: &'a [BoxLabel],
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub breakdown: LossBreakdown,
    pub grads: ParamSet,
    /// Squared norm of the alignment gradient that reached the clean-view
    /// head outputs (zero under stop-gradient).
    pub clean_align_grad_sq: f64,
    /// Number of co-indexed rows the alignment losses were averaged over.
    pub aligned_rows: usize,
}

pub trait Detector: Send + Sync {
    fn config(&self) -> &DetectorConfig;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;

    /// Full inference: features, candidates, per-class NMS, score filter.
    /// Scores are the maximum foreground probability; a threshold of 1 or
    /// more keeps nothing.
    fn detect(&self, image_id: &str, img: &ImageTensor, score_thresh: f64, nms_iou: f64) -> Vec<Detection>;

    /// Losses and parameter gradients for one clean/corrupted pair.
    fn pair_step(&self, pair: PairInput<'_>, opts: &StepOptions, rng: &mut ChaCha8Rng) -> Result<StepOutput>;

    /// Plain supervised step on a single view.
    fn single_view_step(
        &self,
        img: &ImageTensor,
        labels: &[BoxLabel],
        label_smoothing: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepOutput>;

    fn load_params(&mut self, params: ParamSet) -> Result<()> {
        if !self.params().same_layout(&params) {
            return Err(Error::Checkpoint("parameter layout does not match the detector".into()));
        }
        *self.params_mut() = params;
        Ok(())
    }
}

/// Builds a freshly initialised detector; initialisation draws from the
/// `Init` stream of `seed`.
pub fn build_detector(config: &DetectorConfig, seed: u64) -> Result<Box<dyn Detector>> {
    config.validate()?;
    Ok(match config.kind {
        DetectorKind::TwoStage => Box::new(TwoStageDetector::new(config.clone(), seed)),
        DetectorKind::OneStage => Box::new(OneStageDetector::new(config.clone(), seed)),
    })
}

/// Gradient through a row-wise softmax: `p ⊙ (g − ⟨p, g⟩)`.
pub(crate) fn softmax_backward(probs: ArrayView2<f64>, dprobs: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.dim());
    for ((p, g), mut o) in probs.rows().into_iter().zip(dprobs.rows()).zip(out.rows_mut()) {
        let dot: f64 = p.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        for ((oo, pp), gg) in o.iter_mut().zip(p.iter()).zip(g.iter()) {
            *oo = pp * (gg - dot);
        }
    }
    out
}

/// Alignment values and their gradients with respect to both views' probs
/// and boxes, restricted to `rows` of the two outputs.
pub(crate) struct AlignTerms {
    pub l_cal: f64,
    pub l_ral: f64,
    pub dp_s: Array2<f64>,
    pub dp_phi: Array2<f64>,
    pub db_s: Array2<f64>,
    pub db_phi: Array2<f64>,
}

pub(crate) fn select_rows(a: ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), a.ncols()), |(i, j)| a[[rows[i], j]])
}

pub(crate) fn align_terms(
    p_s: ArrayView2<f64>,
    p_phi: ArrayView2<f64>,
    b_s: ArrayView2<f64>,
    b_phi: ArrayView2<f64>,
    rows: &[usize],
    image_size: (f64, f64),
) -> Result<AlignTerms> {
    let (ps, pp) = (select_rows(p_s, rows), select_rows(p_phi, rows));
    let (bs, bp) = (select_rows(b_s, rows), select_rows(b_phi, rows));
    let (l_cal, gps, gpp) = classification_alignment_grad(ps.view(), pp.view())?;
    let (l_ral, gbs, gbp) = localization_alignment_grad(bs.view(), bp.view(), image_size)?;
    let scatter = |g: Array2<f64>, n: usize| {
        let mut out = Array2::zeros((n, g.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(r).assign(&g.row(i));
        }
        out
    };
    Ok(AlignTerms {
        l_cal,
        l_ral,
        dp_s: scatter(gps, p_s.nrows()),
        dp_phi: scatter(gpp, p_s.nrows()),
        db_s: scatter(gbs, p_s.nrows()),
        db_phi: scatter(gbp, p_s.nrows()),
    })
}

pub(crate) fn check_finite(loss: &LossBreakdown) -> bool {
    [loss.l_det, loss.l_cal, loss.l_ral, loss.l_tot].iter().all(|v| v.is_finite())
}
