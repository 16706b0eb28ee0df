//! Faster-R-CNN-shaped toy detector: backbone, single-level RPN, RoI Align
//! and a two-layer box head with class-agnostic regression.

use ndarray::{Array2, ArrayView2};
use rand_chacha::ChaCha8Rng;

use super::backbone::{Backbone, BackboneCache};
use super::boxes::{clamp_box, generate_anchors, nms, rank_by_score, BoxCoder};
use super::nn::{relu_backward, relu_inplace, sigmoid, softmax_rows, Conv2d, ConvCache, Linear};
use super::params::ParamSet;
use super::roi_align::{RoiAlign, RoiPlan};
use super::targets::{roi_targets, rpn_targets, RpnTargets};
use super::{
    align_terms, check_finite, softmax_backward, DetLossOn, Detection, Detector, DetectorConfig, FeatureMap,
    HeadOutput, PairInput, ProposalSet, StepOptions, StepOutput,
};
use crate::align_losses::{detection_loss_grad, smooth_l1, smooth_l1_grad, total_loss, HEAD_SMOOTH_L1_BETA};
use crate::bbox::BBox;
use crate::datasets::BoxLabel;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::{stream_rng, Stream};

const RPN_SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

#[derive(Debug, Clone)]
pub struct TwoStageDetector {
    config: DetectorConfig,
    params: ParamSet,
    backbone: Backbone,
    rpn_conv: Conv2d,
    rpn_out: Conv2d,
    fc: Linear,
    cls: Linear,
    reg: Linear,
    roi: RoiAlign,
}

struct RpnForward {
    logits: Vec<f64>,
    deltas: Vec<[f64; 4]>,
    anchors: Vec<BBox>,
    hidden: Vec<f32>,
    conv_cache: ConvCache,
    out_cache: ConvCache,
}

struct HeadForward {
    probs: Array2<f64>,
    deltas: Array2<f64>,
    boxes: Array2<f64>,
    pass: Vec<[bool; 4]>,
    jac: Vec<[[f64; 4]; 4]>,
    plans: Vec<RoiPlan>,
    pooled: Array2<f32>,
    hidden: Array2<f32>,
}

struct ViewForward {
    features: FeatureMap,
    cache: BackboneCache,
    rpn: RpnForward,
}

/// Detection-loss gradients for one view.
struct ViewDet {
    value: f64,
    rpn_logits: Vec<f64>,
    rpn_deltas: Vec<[f64; 4]>,
    head_logits: Array2<f64>,
    head_deltas: Array2<f64>,
}

impl TwoStageDetector {
    pub fn new(config: DetectorConfig, seed: u64) -> Self {
        let mut rng = stream_rng(seed, Stream::Init, &[]);
        let mut params = ParamSet::new();
        let m = config.channels;
        let a = config.anchor_sizes.len();
        let backbone = Backbone::new(&mut params, m, &mut rng);
        let rpn_conv = Conv2d::new(&mut params, "rpn.conv", m, m, 3, 1, 1, Some(0.01), &mut rng);
        let rpn_out = Conv2d::new(&mut params, "rpn.out", m, 5 * a, 1, 1, 0, Some(0.01), &mut rng);
        let roi = RoiAlign { pooled: config.pooled, sampling_ratio: config.sampling_ratio };
        let fc = Linear::new(&mut params, "head.fc", m * roi.bins(), config.hidden, None, &mut rng);
        let cls = Linear::new(&mut params, "head.cls", config.hidden, config.num_classes + 1, Some(0.01), &mut rng);
        let reg = Linear::new(&mut params, "head.reg", config.hidden, 4, Some(0.001), &mut rng);
        Self { config, params, backbone, rpn_conv, rpn_out, fc, cls, reg, roi }
    }

    pub fn extract_features(&self, img: &ImageTensor) -> FeatureMap {
        self.backbone.forward(&self.params, img).0
    }

    /// Top-`Z` proposals after objectness ranking and NMS.
    pub fn propose(&self, f: &FeatureMap) -> ProposalSet {
        self.propose_with_cap(f, self.config.proposals)
    }

    pub fn propose_with_cap(&self, f: &FeatureMap, cap: usize) -> ProposalSet {
        let rpn = self.rpn_forward(f);
        self.proposals_from(&rpn, f, cap)
    }

    /// Pools `f` at the given proposals and runs the box head. The
    /// proposals may come from a different image's forward pass.
    pub fn pool_and_predict(&self, f: &FeatureMap, proposals: &ProposalSet) -> HeadOutput {
        let hf = self.head_forward(f, &proposals.boxes);
        HeadOutput { probs: hf.probs, boxes: hf.boxes, proposals: proposals.clone() }
    }

    /// Standard forward pass on one image.
    pub fn predict(&self, img: &ImageTensor) -> HeadOutput {
        let f = self.extract_features(img);
        let p = self.propose(&f);
        self.pool_and_predict(&f, &p)
    }

    fn rpn_forward(&self, f: &FeatureMap) -> RpnForward {
        let (mut hidden, conv_cache) = self.rpn_conv.forward(&self.params, &f.values, f.height, f.width);
        relu_inplace(&mut hidden);
        let (out, out_cache) = self.rpn_out.forward(&self.params, &hidden, f.height, f.width);
        let a = self.config.anchor_sizes.len();
        let hw = f.height * f.width;
        let n = hw * a;
        let mut logits = vec![0.0; n];
        let mut deltas = vec![[0.0; 4]; n];
        for pos in 0..hw {
            for k in 0..a {
                let i = pos * a + k;
                logits[i] = out[k * hw + pos] as f64;
                for j in 0..4 {
                    deltas[i][j] = out[(a + k * 4 + j) * hw + pos] as f64;
                }
            }
        }
        let anchors = generate_anchors(f.height, f.width, f.stride, &self.config.anchor_sizes);
        RpnForward { logits, deltas, anchors, hidden, conv_cache, out_cache }
    }

    fn rpn_backward(&self, f: &FeatureMap, rpn: &RpnForward, d_logits: &[f64], d_deltas: &[[f64; 4]], grads: &mut ParamSet) -> Vec<f32> {
        let a = self.config.anchor_sizes.len();
        let hw = f.height * f.width;
        let mut dout = vec![0.0f32; 5 * a * hw];
        for pos in 0..hw {
            for k in 0..a {
                let i = pos * a + k;
                dout[k * hw + pos] = d_logits[i] as f32;
                for j in 0..4 {
                    dout[(a + k * 4 + j) * hw + pos] = d_deltas[i][j] as f32;
                }
            }
        }
        let mut dh = self
            .rpn_out
            .backward(&self.params, &rpn.out_cache, &dout, grads, true)
            .expect("dx requested");
        relu_backward(&rpn.hidden, &mut dh);
        self.rpn_conv
            .backward(&self.params, &rpn.conv_cache, &dh, grads, true)
            .expect("dx requested")
    }

    fn proposals_from(&self, rpn: &RpnForward, f: &FeatureMap, cap: usize) -> ProposalSet {
        let coder = BoxCoder::rpn();
        let (iw, ih) = (f.image_width as f64, f.image_height as f64);
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for (i, anchor) in rpn.anchors.iter().enumerate() {
            let (b, _) = clamp_box(&coder.decode(rpn.deltas[i], anchor), iw, ih);
            if b.width() >= self.config.min_proposal_side && b.height() >= self.config.min_proposal_side {
                boxes.push(b);
                scores.push(sigmoid(rpn.logits[i]));
            }
        }
        let keep = nms(&boxes, &scores, self.config.rpn_nms_iou);
        let keep = &keep[..keep.len().min(cap)];
        ProposalSet {
            boxes: keep.iter().map(|&i| boxes[i]).collect(),
            objectness: keep.iter().map(|&i| scores[i]).collect(),
        }
    }

    fn head_forward(&self, f: &FeatureMap, rois: &[BBox]) -> HeadForward {
        let bins = self.roi.bins();
        let c = f.channels;
        let mut pooled = Array2::<f32>::zeros((rois.len(), c * bins));
        let mut plans = Vec::with_capacity(rois.len());
        for (r, roi) in rois.iter().enumerate() {
            let plan = self.roi.plan(roi, f.stride, f.height, f.width);
            let row = pooled.row_mut(r).into_slice().expect("contiguous row");
            self.roi.forward(&f.values, c, f.height, f.width, &plan, row);
            plans.push(plan);
        }
        let mut hidden = self.fc.forward(&self.params, pooled.view());
        relu_inplace(hidden.as_slice_mut().expect("standard layout"));
        let logits = self.cls.forward(&self.params, hidden.view());
        let deltas = self.reg.forward(&self.params, hidden.view()).mapv(|v| v as f64);
        let probs = softmax_rows(logits.view());
        let coder = BoxCoder::head();
        let (iw, ih) = (f.image_width as f64, f.image_height as f64);
        let mut boxes = Array2::zeros((rois.len(), 4));
        let mut pass = Vec::with_capacity(rois.len());
        let mut jac = Vec::with_capacity(rois.len());
        for (r, roi) in rois.iter().enumerate() {
            let d = [deltas[[r, 0]], deltas[[r, 1]], deltas[[r, 2]], deltas[[r, 3]]];
            let (b, p) = clamp_box(&coder.decode(d, roi), iw, ih);
            for (j, v) in b.to_array().into_iter().enumerate() {
                boxes[[r, j]] = v;
            }
            pass.push(p);
            jac.push(coder.decode_jacobian(d, roi));
        }
        HeadForward { probs, deltas, boxes, pass, jac, plans, pooled, hidden }
    }

    fn head_backward(
        &self,
        f: &FeatureMap,
        hf: &HeadForward,
        d_logits: ArrayView2<f64>,
        d_deltas: ArrayView2<f64>,
        grads: &mut ParamSet,
        df: &mut [f32],
    ) {
        let dl = d_logits.mapv(|v| v as f32);
        let dd = d_deltas.mapv(|v| v as f32);
        let mut dh = self.cls.backward(&self.params, hf.hidden.view(), dl.view(), grads);
        dh += &self.reg.backward(&self.params, hf.hidden.view(), dd.view(), grads);
        relu_backward(
            hf.hidden.as_slice().expect("standard layout"),
            dh.as_slice_mut().expect("standard layout"),
        );
        let dx = self.fc.backward(&self.params, hf.pooled.view(), dh.view(), grads);
        for (r, plan) in hf.plans.iter().enumerate() {
            let row = dx.row(r);
            self.roi.backward(row.as_slice().expect("contiguous row"), f.channels, f.height, f.width, plan, df);
        }
    }

    fn view_forward(&self, img: &ImageTensor) -> ViewForward {
        let (features, cache) = self.backbone.forward(&self.params, img);
        let rpn = self.rpn_forward(&features);
        ViewForward { features, cache, rpn }
    }

    /// Binary cross-entropy over sampled anchors plus smooth-L1 on the
    /// positives, both normalised by the number sampled.
    fn rpn_loss(rpn: &RpnForward, t: &RpnTargets) -> (f64, Vec<f64>, Vec<[f64; 4]>) {
        let n = t.num_sampled().max(1) as f64;
        let mut value = 0.0;
        let mut dl = vec![0.0; rpn.logits.len()];
        let mut dd = vec![[0.0; 4]; rpn.logits.len()];
        for (i, &label) in t.labels.iter().enumerate() {
            if label < 0 {
                continue;
            }
            let x = rpn.logits[i];
            let y = label as f64;
            // softplus(x) - y x, computed stably.
            value += x.max(0.0) + (-x.abs()).exp().ln_1p() - y * x;
            dl[i] = (sigmoid(x) - y) / n;
            if label == 1 {
                for j in 0..4 {
                    let e = rpn.deltas[i][j] - t.deltas[i][j];
                    value += smooth_l1(e, RPN_SMOOTH_L1_BETA);
                    dd[i][j] = smooth_l1_grad(e, RPN_SMOOTH_L1_BETA) / n;
                }
            }
        }
        (value / n, dl, dd)
    }

    fn view_det(
        rpn: &RpnForward,
        head: &HeadForward,
        rpn_t: &RpnTargets,
        roi_t: &[crate::align_losses::ProposalTarget],
        label_smoothing: f64,
    ) -> Result<ViewDet> {
        let (rpn_value, rpn_logits, rpn_deltas) = Self::rpn_loss(rpn, rpn_t);
        let det = detection_loss_grad(head.probs.view(), head.deltas.view(), roi_t, label_smoothing, HEAD_SMOOTH_L1_BETA)?;
        Ok(ViewDet {
            value: rpn_value + det.value,
            rpn_logits,
            rpn_deltas,
            head_logits: det.d_logits,
            head_deltas: det.d_deltas,
        })
    }

    /// Chains box gradients through clamping and decoding to head deltas.
    fn box_to_delta_grad(head: &HeadForward, dboxes: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((dboxes.nrows(), 4));
        for r in 0..dboxes.nrows() {
            for i in 0..4 {
                let g = dboxes[[r, i]];
                if g == 0.0 || !head.pass[r][i] {
                    continue;
                }
                for j in 0..4 {
                    out[[r, j]] += g * head.jac[r][i][j];
                }
            }
        }
        out
    }

    fn backprop_view(
        &self,
        view: &ViewForward,
        head: &HeadForward,
        rpn_dl: &[f64],
        rpn_dd: &[[f64; 4]],
        head_dl: ArrayView2<f64>,
        head_dd: ArrayView2<f64>,
        grads: &mut ParamSet,
    ) {
        let f = &view.features;
        let mut df = self.rpn_backward(f, &view.rpn, rpn_dl, rpn_dd, grads);
        self.head_backward(f, head, head_dl, head_dd, grads, &mut df);
        self.backbone.backward(&self.params, &view.cache, df, grads);
    }

    fn training_rois(proposals: &ProposalSet, labels: &[BoxLabel]) -> Vec<BBox> {
        proposals.boxes.iter().copied().chain(labels.iter().map(|l| l.bbox)).collect()
    }

    fn check_labels(&self, labels: &[BoxLabel]) -> Result<()> {
        for l in labels {
            if l.class_id == 0 || l.class_id as usize > self.config.num_classes {
                return Err(Error::Schema(format!("class id {} outside 1..={}", l.class_id, self.config.num_classes)));
            }
        }
        Ok(())
    }

    /// Pair step; `fixed` replaces the clean-view proposals (they carry no
    /// gradient, so holding them fixed isolates the differentiable path).
    pub(crate) fn pair_step_with(
        &self,
        pair: PairInput<'_>,
        opts: &StepOptions,
        rng: &mut ChaCha8Rng,
        fixed: Option<&ProposalSet>,
    ) -> Result<StepOutput> {
        self.check_labels(pair.labels)?;
        if !pair.original.same_shape(pair.augmented) {
            return Err(Error::ShapeMismatch("clean and corrupted views differ in size".into()));
        }
        let clean = self.view_forward(pair.original);
        let aug = self.view_forward(pair.augmented);
        let f = &clean.features;
        let proposals = match fixed {
            Some(p) => p.clone(),
            None => self.proposals_from(&clean.rpn, f, self.config.proposals),
        };
        let z = proposals.len();
        let rois = Self::training_rois(&proposals, pair.labels);
        let rpn_t = rpn_targets(&clean.rpn.anchors, pair.labels, &self.config, rng);
        let roi_t = roi_targets(&rois, pair.labels, &self.config, rng);
        let head_s = self.head_forward(f, &rois);
        let head_phi = self.head_forward(&aug.features, &rois);

        let (w_s, w_phi) = match opts.det_loss_on {
            DetLossOn::Clean => (1.0, 0.0),
            DetLossOn::Both => (0.5, 0.5),
        };
        let det_s = Self::view_det(&clean.rpn, &head_s, &rpn_t, &roi_t, opts.label_smoothing)?;
        let det_phi = if w_phi > 0.0 {
            Some(Self::view_det(&aug.rpn, &head_phi, &rpn_t, &roi_t, opts.label_smoothing)?)
        } else {
            None
        };
        let l_det = w_s * det_s.value + det_phi.as_ref().map_or(0.0, |d| w_phi * d.value);

        let rows: Vec<usize> = (0..z)
            .filter(|&r| {
                !opts.align_foreground_only
                    || pair.labels.iter().any(|l| rois[r].iou(&l.bbox) >= self.config.roi_fg_iou)
            })
            .collect();
        let image_size = (f.image_width as f64, f.image_height as f64);
        let al = align_terms(
            head_s.probs.view(),
            head_phi.probs.view(),
            head_s.boxes.view(),
            head_phi.boxes.view(),
            &rows,
            image_size,
        )?;
        let breakdown = total_loss(l_det, al.l_cal, al.l_ral, opts.alpha, opts.beta)?;
        if !check_finite(&breakdown) {
            return Err(Error::NaNLoss { iteration: 0, image_ids: Vec::new() });
        }

        let clean_align = if opts.stop_grad_clean { 0.0 } else { 1.0 };
        let dp_s = scaled(&al.dp_s, opts.alpha * clean_align);
        let db_s = scaled(&al.db_s, opts.beta * clean_align);
        let clean_align_grad_sq = dp_s.iter().chain(db_s.iter()).map(|v| v * v).sum();
        let head_dl_s = scaled(&det_s.head_logits, w_s) + softmax_backward(head_s.probs.view(), dp_s.view());
        let head_dd_s = scaled(&det_s.head_deltas, w_s) + Self::box_to_delta_grad(&head_s, db_s.view());
        let scale_rpn = |v: &[f64], s: f64| v.iter().map(|x| x * s).collect::<Vec<_>>();
        let scale_rpn4 = |v: &[[f64; 4]], s: f64| v.iter().map(|x| x.map(|y| y * s)).collect::<Vec<_>>();

        let mut grads = self.params.zeros_like();
        self.backprop_view(
            &clean,
            &head_s,
            &scale_rpn(&det_s.rpn_logits, w_s),
            &scale_rpn4(&det_s.rpn_deltas, w_s),
            head_dl_s.view(),
            head_dd_s.view(),
            &mut grads,
        );

        let dp_phi = scaled(&al.dp_phi, opts.alpha);
        let db_phi = scaled(&al.db_phi, opts.beta);
        let mut head_dl_phi = softmax_backward(head_phi.probs.view(), dp_phi.view());
        let mut head_dd_phi = Self::box_to_delta_grad(&head_phi, db_phi.view());
        let n_anchors = aug.rpn.logits.len();
        let (rpn_dl_phi, rpn_dd_phi) = match &det_phi {
            Some(d) => {
                head_dl_phi += &scaled(&d.head_logits, w_phi);
                head_dd_phi += &scaled(&d.head_deltas, w_phi);
                (scale_rpn(&d.rpn_logits, w_phi), scale_rpn4(&d.rpn_deltas, w_phi))
            }
            None => (vec![0.0; n_anchors], vec![[0.0; 4]; n_anchors]),
        };
        let aug_active = det_phi.is_some() || opts.alpha > 0.0 || opts.beta > 0.0;
        if aug_active {
            self.backprop_view(&aug, &head_phi, &rpn_dl_phi, &rpn_dd_phi, head_dl_phi.view(), head_dd_phi.view(), &mut grads);
        }
        Ok(StepOutput { breakdown, grads, clean_align_grad_sq, aligned_rows: rows.len() })
    }
}

fn scaled(a: &Array2<f64>, s: f64) -> Array2<f64> {
    a * s
}

impl Detector for TwoStageDetector {
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
        let out = self.predict(img);
        let candidates: Vec<Detection> = out
            .probs
            .rows()
            .into_iter()
            .enumerate()
            .map(|(r, p)| {
                let (mut class, mut score) = (1usize, f64::NEG_INFINITY);
                for (c, &v) in p.iter().enumerate().skip(1) {
                    if v > score {
                        (class, score) = (c, v);
                    }
                }
                Detection {
                    image_id: image_id.to_string(),
                    class_id: class as u32,
                    score,
                    full_probs: p.to_vec(),
                    bbox: [out.boxes[[r, 0]], out.boxes[[r, 1]], out.boxes[[r, 2]], out.boxes[[r, 3]]],
                }
            })
            .filter(|d| d.score >= score_thresh)
            .collect();
        per_class_nms(candidates, self.config.num_classes, nms_iou)
    }

    fn pair_step(&self, pair: PairInput<'_>, opts: &StepOptions, rng: &mut ChaCha8Rng) -> Result<StepOutput> {
        self.pair_step_with(pair, opts, rng, None)
    }

    fn single_view_step(
        &self,
        img: &ImageTensor,
        labels: &[BoxLabel],
        label_smoothing: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepOutput> {
        self.check_labels(labels)?;
        let view = self.view_forward(img);
        let proposals = self.proposals_from(&view.rpn, &view.features, self.config.proposals);
        let rois = Self::training_rois(&proposals, labels);
        let rpn_t = rpn_targets(&view.rpn.anchors, labels, &self.config, rng);
        let roi_t = roi_targets(&rois, labels, &self.config, rng);
        let head = self.head_forward(&view.features, &rois);
        let det = Self::view_det(&view.rpn, &head, &rpn_t, &roi_t, label_smoothing)?;
        let breakdown = total_loss(det.value, 0.0, 0.0, 0.0, 0.0)?;
        if !check_finite(&breakdown) {
            return Err(Error::NaNLoss { iteration: 0, image_ids: Vec::new() });
        }
        let mut grads = self.params.zeros_like();
        self.backprop_view(
            &view,
            &head,
            &det.rpn_logits,
            &det.rpn_deltas,
            det.head_logits.view(),
            det.head_deltas.view(),
            &mut grads,
        );
        Ok(StepOutput { breakdown, grads, clean_align_grad_sq: 0.0, aligned_rows: 0 })
    }
}

/// Greedy NMS within each class; output sorted by descending score.
pub(crate) fn per_class_nms(candidates: Vec<Detection>, num_classes: usize, iou: f64) -> Vec<Detection> {
    let mut out = Vec::new();
    for c in 1..=num_classes as u32 {
        let cls: Vec<&Detection> = candidates.iter().filter(|d| d.class_id == c).collect();
        let boxes: Vec<BBox> = cls.iter().map(|d| d.bbox()).collect();
        let scores: Vec<f64> = cls.iter().map(|d| d.score).collect();
        out.extend(nms(&boxes, &scores, iou).into_iter().map(|i| cls[i].clone()));
    }
    let scores: Vec<f64> = out.iter().map(|d| d.score).collect();
    rank_by_score(&scores).into_iter().map(|i| out[i].clone()).collect()
}
