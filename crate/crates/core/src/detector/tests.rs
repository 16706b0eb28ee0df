use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::boxes::{clamp_box, generate_anchors};
use super::*;
use crate::corruptions::{apply_corruption, CorruptionSpec};
use crate::datasets::synth::{synth_sample, SynthConfig, SynthDomain};
use crate::fixtures::natural_image;

fn small_config(kind: DetectorKind) -> DetectorConfig {
    DetectorConfig { kind, channels: 8, hidden: 16, ..DetectorConfig::default() }
}

fn two_stage(seed: u64) -> TwoStageDetector {
    TwoStageDetector::new(small_config(DetectorKind::TwoStage), seed)
}

fn sample(index: usize) -> crate::datasets::DatasetSample {
    synth_sample(SynthDomain::SourcePlain, 11, index, &SynthConfig::default()).unwrap()
}

#[test]
fn feature_map_shape_follows_stride() {
    let cfg = DetectorConfig { channels: 64, ..DetectorConfig::default() };
    let det = TwoStageDetector::new(cfg, 0);
    let f = det.extract_features(&natural_image(128, 128));
    assert_eq!((f.channels, f.height, f.width, f.stride), (64, 16, 16, 8));
    assert_eq!(f.values.len(), 64 * 16 * 16);
    // Sizes that are not a multiple of the stride are padded.
    let f = det.extract_features(&natural_image(50, 36));
    assert_eq!((f.height, f.width), (7, 5));
}

#[test]
fn features_are_deterministic_and_image_dependent() {
    let det = two_stage(1);
    let a = sample(0).image;
    let b = sample(1).image;
    assert_eq!(det.extract_features(&a), det.extract_features(&a));
    assert_ne!(det.extract_features(&a).values, det.extract_features(&b).values);
    assert_eq!(two_stage(1).params(), det.params());
    assert_ne!(two_stage(2).params(), det.params());
}

#[test]
fn zero_rpn_ranks_anchors_in_index_order() {
    let mut det = two_stage(0);
    for name in ["rpn.conv.weight", "rpn.conv.bias", "rpn.out.weight", "rpn.out.bias"] {
        let id = det.params().id_of(name).unwrap();
        det.params_mut().get_mut(id).iter_mut().for_each(|v| *v = 0.0);
    }
    let f = det.extract_features(&sample(0).image);
    let p = det.propose(&f);
    assert!(!p.is_empty());
    assert!(p.objectness.iter().all(|&o| o == 0.5));
    let anchors: Vec<BBox> = generate_anchors(8, 8, 8, &det.config().anchor_sizes)
        .iter()
        .map(|a| clamp_box(a, 64.0, 64.0).0)
        .collect();
    let mut last = None;
    for b in &p.boxes {
        let idx = anchors.iter().position(|a| a == b).expect("proposal is an anchor box");
        assert!(last.is_none_or(|l| idx > l));
        last = Some(idx);
    }
    // The first anchor always survives.
    assert_eq!(p.boxes[0], anchors[0]);
}

#[test]
fn proposals_are_clamped_and_capped() {
    let det = two_stage(3);
    for i in 0..4 {
        let f = det.extract_features(&sample(i).image);
        let p = det.propose(&f);
        assert!(p.len() <= det.config().proposals);
        for (b, o) in p.boxes.iter().zip(&p.objectness) {
            assert!(b.is_valid() && b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 64.0 && b.y2 <= 64.0);
            assert!((0.0..=1.0).contains(o));
        }
        let small = det.propose_with_cap(&f, 16);
        assert_eq!(small.boxes[..], p.boxes[..small.len()]);
    }
}

#[test]
fn pool_and_predict_matches_standard_forward() {
    let det = two_stage(4);
    let img = sample(2).image;
    let f = det.extract_features(&img);
    let p = det.propose(&f);
    let out = det.pool_and_predict(&f, &p);
    assert_eq!(out, det.predict(&img));
    assert_eq!(out.probs.dim(), (p.len(), 5));
    assert_eq!(out.boxes.dim(), (p.len(), 4));
    out.validate().unwrap();
    for r in out.boxes.rows() {
        assert!(BBox::new(r[0], r[1], r[2], r[3]).is_valid());
    }
    let empty = det.pool_and_predict(&f, &ProposalSet::default());
    assert_eq!(empty.probs.dim(), (0, 5));
}

#[test]
fn identity_view_reproduces_clean_predictions() {
    let det = two_stage(5);
    let s = sample(3);
    let aug = apply_corruption(&s.image, &CorruptionSpec::identity(), 9).unwrap();
    let fs = det.extract_features(&s.image);
    let fphi = det.extract_features(&aug);
    let o = det.propose(&fs);
    let a = det.pool_and_predict(&fs, &o);
    let b = det.pool_and_predict(&fphi, &o);
    assert_eq!(a.probs, b.probs);
    assert_eq!(a.boxes, b.boxes);
}

#[test]
fn cross_view_pooling_differs_under_corruption() {
    let det = two_stage(5);
    let s = sample(3);
    let aug = apply_corruption(&s.image, &CorruptionSpec::new("gaussian_noise", 5), 9).unwrap();
    let fs = det.extract_features(&s.image);
    let o = det.propose(&fs);
    let a = det.pool_and_predict(&fs, &o);
    let b = det.pool_and_predict(&det.extract_features(&aug), &o);
    assert_eq!(a.probs.dim(), b.probs.dim());
    assert_ne!(a.probs, b.probs);
}

#[test]
fn pooled_predictions_follow_proposal_order() {
    let det = two_stage(6);
    let f = det.extract_features(&sample(4).image);
    let p = det.propose(&f);
    let mut perm: Vec<usize> = (0..p.len()).collect();
    perm.reverse();
    perm.swap(0, p.len() / 2);
    let a = det.pool_and_predict(&f, &p);
    let b = det.pool_and_predict(&f, &p.permuted(&perm));
    for (i, &j) in perm.iter().enumerate() {
        assert_eq!(a.probs.row(j), b.probs.row(i));
        assert_eq!(a.boxes.row(j), b.boxes.row(i));
    }
}

#[test]
fn detect_threshold_and_nms_contracts() {
    for kind in [DetectorKind::TwoStage, DetectorKind::OneStage] {
        let det = build_detector(&small_config(kind), 7).unwrap();
        let img = sample(5).image;
        assert!(det.detect("a", &img, 1.0, 0.5).is_empty());
        let all = det.detect("a", &img, 0.0, 1.0);
        assert!(!all.is_empty());
        for thresh in [0.1, 0.2, 0.25] {
            for d in det.detect("a", &img, thresh, 0.5) {
                assert!(d.score >= thresh);
            }
        }
        for d in &all {
            let fg_max = d.full_probs[1..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(d.score, fg_max);
            assert_eq!(d.full_probs[d.class_id as usize], d.score);
            assert!((d.full_probs.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            assert!(d.bbox().is_valid());
        }
        let strict = det.detect("a", &img, 0.0, 0.0);
        for (i, a) in strict.iter().enumerate() {
            for b in &strict[i + 1..] {
                if a.class_id == b.class_id {
                    assert_eq!(a.bbox().iou(&b.bbox()), 0.0);
                }
            }
        }
        for w in strict.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
    }
}

#[test]
fn nms_at_zero_keeps_one_box_per_overlapping_cluster() {
    let mk = |score: f64, b: [f64; 4], c: u32| Detection {
        image_id: "x".into(),
        class_id: c,
        score,
        full_probs: vec![],
        bbox: b,
    };
    let dets = vec![
        mk(0.5, [0.0, 0.0, 10.0, 10.0], 1),
        mk(0.9, [2.0, 2.0, 12.0, 12.0], 1),
        mk(0.7, [4.0, 1.0, 11.0, 9.0], 1),
        mk(0.8, [30.0, 30.0, 40.0, 40.0], 1),
        mk(0.6, [31.0, 31.0, 41.0, 41.0], 1),
        mk(0.4, [0.0, 0.0, 10.0, 10.0], 2),
    ];
    let kept = two_stage::per_class_nms(dets, 4, 0.0);
    let scores: Vec<f64> = kept.iter().map(|d| d.score).collect();
    assert_eq!(scores, vec![0.9, 0.8, 0.4]);
}

#[test]
fn identical_dense_outputs_pair_every_location() {
    let det = OneStageDetector::new(small_config(DetectorKind::OneStage), 8);
    let out = det.predict_dense(&sample(0).image);
    assert_eq!(out.probs.dim(), (64, 5));
    let pts = onestage_align_points(&out, &out, None).unwrap();
    assert_eq!(pts.len(), 64);
    let l_cal = crate::align_losses::classification_alignment(pts.probs_s.view(), pts.probs_phi.view()).unwrap();
    let l_ral =
        crate::align_losses::localization_alignment(pts.boxes_s.view(), pts.boxes_phi.view(), (64.0, 64.0)).unwrap();
    assert_eq!((l_cal, l_ral), (0.0, 0.0));
    let sel = [3usize, 9, 40];
    assert_eq!(onestage_align_points(&out, &out, Some(&sel)).unwrap().len(), 3);
}

#[test]
fn dense_pairing_rejects_bad_inputs() {
    let det = OneStageDetector::new(small_config(DetectorKind::OneStage), 8);
    let out = det.predict_dense(&sample(0).image);
    let other = det.predict_dense(&natural_image(48, 64));
    assert!(matches!(onestage_align_points(&out, &other, None), Err(Error::ShapeMismatch(_))));
    // Swapping a class channel with a box channel breaks the row sums.
    let mut broken = out.clone();
    let col = broken.probs.column(2).to_owned();
    broken.probs.column_mut(2).assign(&broken.boxes.column(1));
    broken.boxes.column_mut(1).assign(&col);
    assert!(matches!(
        onestage_align_points(&out, &broken, None),
        Err(Error::NotADistribution { .. })
    ));
}

#[test]
fn detections_round_trip_through_jsonl() {
    let det = two_stage(9);
    let dets = det.detect("img_7", &sample(1).image, 0.0, 0.5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_detections_jsonl(&path, &dets).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["image_id", "class_id", "score", "probs", "bbox"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    assert_eq!(read_detections_jsonl(&path).unwrap(), dets);
}

#[test]
fn config_hash_tracks_every_field() {
    let a = DetectorConfig::default();
    assert_eq!(a.hash(), DetectorConfig::default().hash());
    let b = DetectorConfig { proposals: 32, ..a.clone() };
    assert_ne!(a.hash(), b.hash());
    assert!(DetectorConfig { anchor_sizes: vec![], ..a }.validate().is_err());
}

fn pair_loss(det: &dyn Detector, pair: PairInput<'_>, opts: &StepOptions) -> StepOutput {
    det.pair_step(pair, opts, &mut ChaCha8Rng::seed_from_u64(77)).unwrap()
}

fn gradient_pair() -> (crate::datasets::DatasetSample, ImageTensor) {
    let s = sample(6);
    let aug = apply_corruption(&s.image, &CorruptionSpec::new("contrast", 3), 1).unwrap();
    (s, aug)
}

/// Compares `<grad, v>` with a central difference of `l_tot` along random
/// directions `v`.
fn directional_check(params: &ParamSet, step: impl Fn(&ParamSet) -> StepOutput) {
    let base = step(params);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..3 {
        let mut dir = params.zeros_like();
        for t in dir.tensors_mut() {
            t.iter_mut().for_each(|v| *v = rng.random_range(-1.0f32..1.0));
        }
        let analytic: f64 = base
            .grads
            .tensors()
            .zip(dir.tensors())
            .flat_map(|(g, d)| g.iter().zip(d).map(|(a, b)| *a as f64 * *b as f64))
            .sum();
        let h = 1e-3f32;
        let eval = |sign: f32| {
            let mut p = params.clone();
            for (t, d) in p.tensors_mut().zip(dir.tensors()) {
                t.iter_mut().zip(d).for_each(|(v, dv)| *v += sign * h * dv);
            }
            step(&p).breakdown.l_tot
        };
        let numeric = (eval(1.0) - eval(-1.0)) / (2.0 * h as f64);
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-3);
        assert!(rel < 0.02, "trial {trial}: numeric {numeric} analytic {analytic}");
    }
}

#[test]
fn two_stage_pair_gradient_matches_finite_differences() {
    let opts = StepOptions { det_loss_on: DetLossOn::Both, ..StepOptions::default() };
    let det = two_stage(21);
    let (s, aug) = gradient_pair();
    // Proposal selection is not differentiated, so it is held fixed.
    let proposals = det.propose(&det.extract_features(&s.image));
    directional_check(det.params(), |p| {
        let mut d = det.clone();
        d.load_params(p.clone()).unwrap();
        let pair = PairInput { original: &s.image, augmented: &aug, labels: &s.labels };
        d.pair_step_with(pair, &opts, &mut ChaCha8Rng::seed_from_u64(77), Some(&proposals))
            .unwrap()
    });
}

#[test]
fn one_stage_pair_gradient_matches_finite_differences() {
    let opts = StepOptions { det_loss_on: DetLossOn::Both, label_smoothing: 0.1, ..StepOptions::default() };
    let det = build_detector(&small_config(DetectorKind::OneStage), 22).unwrap();
    let (s, aug) = gradient_pair();
    directional_check(det.params(), |p| {
        let mut d = OneStageDetector::new(small_config(DetectorKind::OneStage), 22);
        d.load_params(p.clone()).unwrap();
        let pair = PairInput { original: &s.image, augmented: &aug, labels: &s.labels };
        pair_loss(&d, pair, &opts)
    });
}

#[test]
fn identity_pair_has_zero_alignment_and_matches_single_view() {
    for kind in [DetectorKind::TwoStage, DetectorKind::OneStage] {
        let det = build_detector(&small_config(kind), 30).unwrap();
        let s = sample(7);
        let pair = PairInput { original: &s.image, augmented: &s.image, labels: &s.labels };
        let out = pair_loss(det.as_ref(), pair, &StepOptions::default());
        assert_eq!(out.breakdown.l_cal, 0.0);
        assert_eq!(out.breakdown.l_ral, 0.0);
        assert!(out.aligned_rows > 0);
        let single = det
            .single_view_step(&s.image, &s.labels, 0.0, &mut ChaCha8Rng::seed_from_u64(77))
            .unwrap();
        assert_abs_diff_eq!(single.breakdown.l_det, out.breakdown.l_det, epsilon = 1e-12);
    }
}

#[test]
fn stop_gradient_blocks_clean_alignment_gradient() {
    let det = two_stage(31);
    let s = sample(8);
    let aug = apply_corruption(&s.image, &CorruptionSpec::new("gaussian_noise", 4), 3).unwrap();
    let pair = PairInput { original: &s.image, augmented: &aug, labels: &s.labels };
    let free = pair_loss(&det, pair, &StepOptions::default());
    let stopped = pair_loss(&det, pair, &StepOptions { stop_grad_clean: true, ..StepOptions::default() });
    assert!(free.clean_align_grad_sq > 0.0);
    assert_eq!(stopped.clean_align_grad_sq, 0.0);
    assert_eq!(free.breakdown, stopped.breakdown);
    assert_ne!(free.grads, stopped.grads);
}

#[test]
fn foreground_only_alignment_uses_fewer_rows() {
    let det = two_stage(32);
    let s = sample(9);
    let pair = PairInput { original: &s.image, augmented: &s.image, labels: &s.labels };
    let all = pair_loss(&det, pair, &StepOptions::default());
    let fg = pair_loss(&det, pair, &StepOptions { align_foreground_only: true, ..StepOptions::default() });
    assert!(fg.aligned_rows < all.aligned_rows);
}

