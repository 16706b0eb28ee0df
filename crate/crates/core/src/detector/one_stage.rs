//! FCOS-shaped dense detector. Every feature location predicts a class
//! distribution and distances to the four box sides; the two views are
//! paired location by location.

use ndarray::{Array2, ArrayView2};
use rand_chacha::ChaCha8Rng;

use super::backbone::{Backbone, BackboneCache};
use super::boxes::clamp_box;
use super::nn::{relu_backward, relu_inplace, softmax_rows, Conv2d, ConvCache};
use super::params::ParamSet;
use super::targets::{dense_targets, location_center};
use super::two_stage::per_class_nms;
use super::{
    align_terms, check_finite, check_prob_rows, select_rows, softmax_backward, DetLossOn, Detection, Detector,
    DetectorConfig, FeatureMap, PairInput, StepOptions, StepOutput,
};
use crate::align_losses::{detection_loss_grad, total_loss, ProposalTarget, HEAD_SMOOTH_L1_BETA};
use crate::datasets::BoxLabel;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::{stream_rng, Stream};

/// Largest log-distance accepted before exponentiation.
const LTRB_CLIP: f64 = 4.0;

#[derive(Debug, Clone)]
pub struct OneStageDetector {
    config: DetectorConfig,
    params: ParamSet,
    backbone: Backbone,
    conv: Conv2d,
    out: Conv2d,
}

/// Per-location predictions, rows in `y * width + x` order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseHeadOutput {
    pub probs: Array2<f64>,
    pub boxes: Array2<f64>,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

impl DenseHeadOutput {
    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if self.probs.nrows() != n || self.boxes.dim() != (n, 4) {
            return Err(Error::ShapeMismatch(format!(
                "dense output {}x{} with probs {:?} and boxes {:?}",
                self.height,
                self.width,
                self.probs.dim(),
                self.boxes.dim()
            )));
        }
        check_prob_rows(self.probs.view())
    }
}

/// Co-indexed clean/corrupted predictions at the selected locations.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPoints {
    pub rows: Vec<usize>,
    pub probs_s: Array2<f64>,
    pub probs_phi: Array2<f64>,
    pub boxes_s: Array2<f64>,
    pub boxes_phi: Array2<f64>,
}

impl AlignedPoints {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Pairs the two dense outputs by spatial index. `selected` restricts the
/// clean-view locations; `None` pairs all of them.
pub fn onestage_align_points(
    out_s: &DenseHeadOutput,
    out_phi: &DenseHeadOutput,
    selected: Option<&[usize]>,
) -> Result<AlignedPoints> {
    if (out_s.height, out_s.width, out_s.probs.ncols()) != (out_phi.height, out_phi.width, out_phi.probs.ncols()) {
        return Err(Error::ShapeMismatch(format!(
            "dense outputs {}x{}x{} vs {}x{}x{}",
            out_s.height,
            out_s.width,
            out_s.probs.ncols(),
            out_phi.height,
            out_phi.width,
            out_phi.probs.ncols()
        )));
    }
    out_s.validate()?;
    out_phi.validate()?;
    let n = out_s.height * out_s.width;
    let rows: Vec<usize> = match selected {
        Some(sel) => {
            if let Some(&bad) = sel.iter().find(|&&r| r >= n) {
                return Err(Error::ShapeMismatch(format!("location {bad} outside {n}")));
            }
            sel.to_vec()
        }
        None => (0..n).collect(),
    };
    Ok(AlignedPoints {
        probs_s: select_rows(out_s.probs.view(), &rows),
        probs_phi: select_rows(out_phi.probs.view(), &rows),
        boxes_s: select_rows(out_s.boxes.view(), &rows),
        boxes_phi: select_rows(out_phi.boxes.view(), &rows),
        rows,
    })
}

struct DenseForward {
    features: FeatureMap,
    cache: BackboneCache,
    hidden: Vec<f32>,
    conv_cache: ConvCache,
    out_cache: ConvCache,
    probs: Array2<f64>,
    deltas: Array2<f64>,
    boxes: Array2<f64>,
    /// `d box_j / d delta_j`, zero where clipped or clamped.
    dbox: Array2<f64>,
}

impl DenseForward {
    fn output(&self) -> DenseHeadOutput {
        DenseHeadOutput {
            probs: self.probs.clone(),
            boxes: self.boxes.clone(),
            height: self.features.height,
            width: self.features.width,
            stride: self.features.stride,
        }
    }
}

impl OneStageDetector {
    pub fn new(config: DetectorConfig, seed: u64) -> Self {
        let mut rng = stream_rng(seed, Stream::Init, &[]);
        let mut params = ParamSet::new();
        let m = config.channels;
        let backbone = Backbone::new(&mut params, m, &mut rng);
        let conv = Conv2d::new(&mut params, "dense.conv", m, m, 3, 1, 1, None, &mut rng);
        let out = Conv2d::new(&mut params, "dense.out", m, config.num_classes + 5, 1, 1, 0, Some(0.01), &mut rng);
        Self { config, params, backbone, conv, out }
    }

    pub fn extract_features(&self, img: &ImageTensor) -> FeatureMap {
        self.backbone.forward(&self.params, img).0
    }

    pub fn predict_dense(&self, img: &ImageTensor) -> DenseHeadOutput {
        self.forward(img).output()
    }

    fn forward(&self, img: &ImageTensor) -> DenseForward {
        let (features, cache) = self.backbone.forward(&self.params, img);
        let (h, w) = (features.height, features.width);
        let hw = h * w;
        let (mut hidden, conv_cache) = self.conv.forward(&self.params, &features.values, h, w);
        relu_inplace(&mut hidden);
        let (out, out_cache) = self.out.forward(&self.params, &hidden, h, w);
        let k1 = self.config.num_classes + 1;
        let logits = Array2::from_shape_fn((hw, k1), |(p, c)| out[c * hw + p]);
        let probs = softmax_rows(logits.view());
        let deltas = Array2::from_shape_fn((hw, 4), |(p, j)| out[(k1 + j) * hw + p] as f64);
        let s = features.stride as f64;
        let (iw, ih) = (features.image_width as f64, features.image_height as f64);
        let mut boxes = Array2::zeros((hw, 4));
        let mut dbox = Array2::zeros((hw, 4));
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let (cx, cy) = location_center(y, x, features.stride);
                let e: [f64; 4] = std::array::from_fn(|j| s * deltas[[p, j]].min(LTRB_CLIP).exp());
                let raw = crate::bbox::BBox::new(cx - e[0], cy - e[1], cx + e[2], cy + e[3]);
                let (b, pass) = clamp_box(&raw, iw, ih);
                let sign = [-1.0, -1.0, 1.0, 1.0];
                for (j, v) in b.to_array().into_iter().enumerate() {
                    boxes[[p, j]] = v;
                    if pass[j] && deltas[[p, j]] < LTRB_CLIP {
                        dbox[[p, j]] = sign[j] * e[j];
                    }
                }
            }
        }
        DenseForward { features, cache, hidden, conv_cache, out_cache, probs, deltas, boxes, dbox }
    }

    fn backward(&self, fwd: &DenseForward, d_logits: ArrayView2<f64>, d_deltas: ArrayView2<f64>, grads: &mut ParamSet) {
        let hw = fwd.features.height * fwd.features.width;
        let k1 = self.config.num_classes + 1;
        let mut dout = vec![0.0f32; (k1 + 4) * hw];
        for p in 0..hw {
            for c in 0..k1 {
                dout[c * hw + p] = d_logits[[p, c]] as f32;
            }
            for j in 0..4 {
                dout[(k1 + j) * hw + p] = d_deltas[[p, j]] as f32;
            }
        }
        let (h, w) = (fwd.features.height, fwd.features.width);
        debug_assert_eq!(fwd.hidden.len(), self.conv.cout * h * w);
        let mut dh = self
            .out
            .backward(&self.params, &fwd.out_cache, &dout, grads, true)
            .expect("dx requested");
        relu_backward(&fwd.hidden, &mut dh);
        let df = self
            .conv
            .backward(&self.params, &fwd.conv_cache, &dh, grads, true)
            .expect("dx requested");
        self.backbone.backward(&self.params, &fwd.cache, df, grads);
    }

    fn targets(&self, fwd: &DenseForward, labels: &[BoxLabel]) -> Result<Vec<ProposalTarget>> {
        for l in labels {
            if l.class_id == 0 || l.class_id as usize > self.config.num_classes {
                return Err(Error::Schema(format!("class id {} outside 1..={}", l.class_id, self.config.num_classes)));
            }
        }
        let f = &fwd.features;
        Ok(dense_targets(f.height, f.width, f.stride, labels, self.config.center_radius))
    }

    fn box_grad_to_deltas(fwd: &DenseForward, dboxes: &Array2<f64>) -> Array2<f64> {
        dboxes * &fwd.dbox
    }
}

impl Detector for OneStageDetector {
    fn config(&self) -> &DetectorConfig {
        &self.config
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn detect(&self, image_id: &str, img: &ImageTensor, score_thresh: f64, nms_iou: f64) -> Vec<Detection> {
        if score_thresh >= 1.0 {
            return Vec::new();
        }
        let out = self.predict_dense(img);
        let candidates = out
            .probs
            .rows()
            .into_iter()
            .enumerate()
            .filter_map(|(r, p)| {
                let (mut class, mut score) = (1usize, f64::NEG_INFINITY);
                for (c, &v) in p.iter().enumerate().skip(1) {
                    if v > score {
                        (class, score) = (c, v);
                    }
                }
                (score >= score_thresh).then(|| Detection {
                    image_id: image_id.to_string(),
                    class_id: class as u32,
                    score,
                    full_probs: p.to_vec(),
                    bbox: [out.boxes[[r, 0]], out.boxes[[r, 1]], out.boxes[[r, 2]], out.boxes[[r, 3]]],
                })
            })
            .collect();
        per_class_nms(candidates, self.config.num_classes, nms_iou)
    }

    fn pair_step(&self, pair: PairInput<'_>, opts: &StepOptions, _rng: &mut ChaCha8Rng) -> Result<StepOutput> {
        if !pair.original.same_shape(pair.augmented) {
            return Err(Error::ShapeMismatch("clean and corrupted views differ in size".into()));
        }
        let clean = self.forward(pair.original);
        let aug = self.forward(pair.augmented);
        let targets = self.targets(&clean, pair.labels)?;
        let (w_s, w_phi) = match opts.det_loss_on {
            DetLossOn::Clean => (1.0, 0.0),
            DetLossOn::Both => (0.5, 0.5),
        };
        let ls = opts.label_smoothing;
        let det_s = detection_loss_grad(clean.probs.view(), clean.deltas.view(), &targets, ls, HEAD_SMOOTH_L1_BETA)?;
        let det_phi = if w_phi > 0.0 {
            Some(detection_loss_grad(aug.probs.view(), aug.deltas.view(), &targets, ls, HEAD_SMOOTH_L1_BETA)?)
        } else {
            None
        };
        let l_det = w_s * det_s.value + det_phi.as_ref().map_or(0.0, |d| w_phi * d.value);

        let selected: Option<Vec<usize>> = opts
            .align_foreground_only
            .then(|| targets.iter().filter(|t| t.class > 0).map(|t| t.row).collect());
        let (out_s, out_phi) = (clean.output(), aug.output());
        let points = onestage_align_points(&out_s, &out_phi, selected.as_deref())?;
        let f = &clean.features;
        let al = align_terms(
            clean.probs.view(),
            aug.probs.view(),
            clean.boxes.view(),
            aug.boxes.view(),
            &points.rows,
            (f.image_width as f64, f.image_height as f64),
        )?;
        let breakdown = total_loss(l_det, al.l_cal, al.l_ral, opts.alpha, opts.beta)?;
        if !check_finite(&breakdown) {
            return Err(Error::NaNLoss { iteration: 0, image_ids: Vec::new() });
        }

        let clean_align = if opts.stop_grad_clean { 0.0 } else { 1.0 };
        let dp_s = &al.dp_s * (opts.alpha * clean_align);
        let db_s = &al.db_s * (opts.beta * clean_align);
        let clean_align_grad_sq = dp_s.iter().chain(db_s.iter()).map(|v| v * v).sum();
        let dl_s = &det_s.d_logits * w_s + softmax_backward(clean.probs.view(), dp_s.view());
        let dd_s = &det_s.d_deltas * w_s + Self::box_grad_to_deltas(&clean, &db_s);
        let mut grads = self.params.zeros_like();
        self.backward(&clean, dl_s.view(), dd_s.view(), &mut grads);

        let dp_phi = &al.dp_phi * opts.alpha;
        let db_phi = &al.db_phi * opts.beta;
        let mut dl_phi = softmax_backward(aug.probs.view(), dp_phi.view());
        let mut dd_phi = Self::box_grad_to_deltas(&aug, &db_phi);
        if let Some(d) = &det_phi {
            dl_phi += &(&d.d_logits * w_phi);
            dd_phi += &(&d.d_deltas * w_phi);
        }
        if det_phi.is_some() || opts.alpha > 0.0 || opts.beta > 0.0 {
            self.backward(&aug, dl_phi.view(), dd_phi.view(), &mut grads);
        }
        Ok(StepOutput { breakdown, grads, clean_align_grad_sq, aligned_rows: points.len() })
    }

    fn single_view_step(
        &self,
        img: &ImageTensor,
        labels: &[BoxLabel],
        label_smoothing: f64,
        _rng: &mut ChaCha8Rng,
    ) -> Result<StepOutput> {
        let fwd = self.forward(img);
        let targets = self.targets(&fwd, labels)?;
        let det = detection_loss_grad(fwd.probs.view(), fwd.deltas.view(), &targets, label_smoothing, HEAD_SMOOTH_L1_BETA)?;
        let breakdown = total_loss(det.value, 0.0, 0.0, 0.0, 0.0)?;
        if !check_finite(&breakdown) {
            return Err(Error::NaNLoss { iteration: 0, image_ids: Vec::new() });
        }
        let mut grads = self.params.zeros_like();
        self.backward(&fwd, det.d_logits.view(), det.d_deltas.view(), &mut grads);
        Ok(StepOutput { breakdown, grads, clean_align_grad_sq: 0.0, aligned_rows: 0 })
    }
}
