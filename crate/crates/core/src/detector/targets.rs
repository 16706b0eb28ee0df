//! Training-target assignment: anchor labels for the RPN, sampled RoI
//! targets for the box head and location targets for the dense head.

use rand::seq::index::sample;
use rand::Rng;

use super::boxes::BoxCoder;
use super::DetectorConfig;
use crate::align_losses::ProposalTarget;
use crate::bbox::BBox;
use crate::datasets::BoxLabel;

#[derive(Debug, Clone, PartialEq)]
pub struct RpnTargets {
    /// 1 positive, 0 negative, -1 ignored (not sampled).
    pub labels: Vec<i8>,
    pub deltas: Vec<[f64; 4]>,
}

impl RpnTargets {
    pub fn num_sampled(&self) -> usize {
        self.labels.iter().filter(|&&l| l >= 0).count()
    }
}

fn keep_random(indices: &mut Vec<usize>, n: usize, rng: &mut impl Rng) {
    if indices.len() > n {
        let chosen = sample(rng, indices.len(), n);
        let mut kept: Vec<usize> = chosen.iter().map(|i| indices[i]).collect();
        kept.sort_unstable();
        *indices = kept;
    }
}

pub fn rpn_targets(anchors: &[BBox], gts: &[BoxLabel], cfg: &DetectorConfig, rng: &mut impl Rng) -> RpnTargets {
    let coder = BoxCoder::rpn();
    let mut labels = vec![-1i8; anchors.len()];
    let mut deltas = vec![[0.0; 4]; anchors.len()];
    let mut best_gt = vec![0usize; anchors.len()];
    let mut best_iou = vec![0.0f64; anchors.len()];
    for (i, a) in anchors.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            let iou = a.iou(&gt.bbox);
            if iou > best_iou[i] {
                best_iou[i] = iou;
                best_gt[i] = g;
            }
        }
        if best_iou[i] < cfg.rpn_neg_iou {
            labels[i] = 0;
        } else if best_iou[i] >= cfg.rpn_pos_iou {
            labels[i] = 1;
        }
    }
    // Every object gets at least its best-matching anchors.
    for (g, gt) in gts.iter().enumerate() {
        let top = anchors.iter().map(|a| a.iou(&gt.bbox)).fold(0.0, f64::max);
        if top <= 0.0 {
            continue;
        }
        for (i, a) in anchors.iter().enumerate() {
            if a.iou(&gt.bbox) == top {
                labels[i] = 1;
                best_gt[i] = g;
            }
        }
    }
    let mut pos: Vec<usize> = (0..anchors.len()).filter(|&i| labels[i] == 1).collect();
    let mut neg: Vec<usize> = (0..anchors.len()).filter(|&i| labels[i] == 0).collect();
    let max_pos = (cfg.rpn_batch as f64 * cfg.rpn_pos_fraction) as usize;
    keep_random(&mut pos, max_pos, rng);
    keep_random(&mut neg, cfg.rpn_batch - pos.len(), rng);
    labels.iter_mut().for_each(|l| *l = -1);
    for &i in &pos {
        labels[i] = 1;
        deltas[i] = coder.encode(&gts[best_gt[i]].bbox, &anchors[i]);
    }
    for &i in &neg {
        labels[i] = 0;
    }
    RpnTargets { labels, deltas }
}

/// Samples foreground and background RoIs. Targets come back sorted by row.
pub fn roi_targets(rois: &[BBox], gts: &[BoxLabel], cfg: &DetectorConfig, rng: &mut impl Rng) -> Vec<ProposalTarget> {
    let coder = BoxCoder::head();
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    let mut assigned = vec![None; rois.len()];
    for (r, roi) in rois.iter().enumerate() {
        let mut best = (0.0, None);
        for (g, gt) in gts.iter().enumerate() {
            let iou = roi.iou(&gt.bbox);
            if iou > best.0 {
                best = (iou, Some(g));
            }
        }
        match best {
            (iou, Some(g)) if iou >= cfg.roi_fg_iou => {
                assigned[r] = Some(g);
                fg.push(r);
            }
            _ => bg.push(r),
        }
    }
    let max_fg = (cfg.roi_batch as f64 * cfg.roi_fg_fraction) as usize;
    keep_random(&mut fg, max_fg, rng);
    keep_random(&mut bg, cfg.roi_batch - fg.len(), rng);
    let mut out: Vec<ProposalTarget> = fg
        .iter()
        .map(|&r| {
            let gt = &gts[assigned[r].expect("foreground has a match")];
            ProposalTarget {
                row: r,
                class: gt.class_id as usize,
                box_target: Some(coder.encode(&gt.bbox, &rois[r])),
            }
        })
        .chain(bg.iter().map(|&r| ProposalTarget { row: r, class: 0, box_target: None }))
        .collect();
    out.sort_by_key(|t| t.row);
    out
}

/// Centre of feature cell `(y, x)` in image pixels.
pub fn location_center(y: usize, x: usize, stride: usize) -> (f64, f64) {
    ((x as f64 + 0.5) * stride as f64, (y as f64 + 0.5) * stride as f64)
}

/// Dense targets: a location is positive for the smallest object that
/// contains its centre within `radius · stride` of the object centre.
/// Box targets are `ln(distance / stride)` to the four sides.
pub fn dense_targets(h: usize, w: usize, stride: usize, gts: &[BoxLabel], radius: f64) -> Vec<ProposalTarget> {
    let s = stride as f64;
    let r = radius * s;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (cx, cy) = location_center(y, x, stride);
            let mut best: Option<(f64, &BoxLabel)> = None;
            for gt in gts {
                let b = &gt.bbox;
                let (gx, gy) = b.center();
                let inside = cx > b.x1 && cx < b.x2 && cy > b.y1 && cy < b.y2;
                let central = (cx - gx).abs() < r && (cy - gy).abs() < r;
                if inside && central && best.is_none_or(|(a, _)| b.area() < a) {
                    best = Some((b.area(), gt));
                }
            }
            let row = y * w + x;
            out.push(match best {
                Some((_, gt)) => {
                    let b = &gt.bbox;
                    ProposalTarget {
                        row,
                        class: gt.class_id as usize,
                        box_target: Some([
                            ((cx - b.x1) / s).ln(),
                            ((cy - b.y1) / s).ln(),
                            ((b.x2 - cx) / s).ln(),
                            ((b.y2 - cy) / s).ln(),
                        ]),
                    }
                }
                None => ProposalTarget { row, class: 0, box_target: None },
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::boxes::generate_anchors;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gt(c: u32, b: [f64; 4]) -> BoxLabel {
        BoxLabel { class_id: c, bbox: BBox::from_array(b) }
    }

    #[test]
    fn rpn_sampling_respects_budget_and_matches_every_object() {
        let cfg = DetectorConfig::default();
        let anchors = generate_anchors(8, 8, 8, &cfg.anchor_sizes);
        let gts = [gt(1, [10.0, 10.0, 30.0, 28.0]), gt(2, [40.0, 5.0, 52.0, 17.0])];
        let t = rpn_targets(&anchors, &gts, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let pos = t.labels.iter().filter(|&&l| l == 1).count();
        assert!(pos >= 2 && pos <= cfg.rpn_batch / 2);
        assert_eq!(t.num_sampled(), cfg.rpn_batch);
        for g in &gts {
            assert!(anchors
                .iter()
                .zip(&t.labels)
                .any(|(a, &l)| l == 1 && a.iou(&g.bbox) > 0.3));
        }
        let empty = rpn_targets(&anchors, &[], &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(empty.labels.iter().all(|&l| l <= 0));
    }

    #[test]
    fn roi_targets_sorted_and_encoded() {
        let cfg = DetectorConfig::default();
        let gts = [gt(3, [10.0, 10.0, 30.0, 30.0])];
        let rois = vec![
            BBox::new(0.0, 0.0, 5.0, 5.0),
            BBox::new(11.0, 10.0, 30.0, 31.0),
            BBox::new(10.0, 10.0, 30.0, 30.0),
        ];
        let t = roi_targets(&rois, &gts, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(t.len(), 3);
        assert_eq!(t[0].class, 0);
        assert_eq!(t[1].class, 3);
        assert_eq!(t[2].box_target, Some([0.0; 4]));
    }

    #[test]
    fn dense_targets_decode_back_to_the_object() {
        let gts = [gt(1, [4.0, 6.0, 30.0, 26.0]), gt(2, [10.0, 10.0, 22.0, 22.0])];
        let t = dense_targets(8, 8, 8, &gts, 1.5);
        // Cell (1, 1) has centre (12, 12): inside both, the smaller one wins.
        assert_eq!(t[8 + 1].class, 2);
        assert_eq!(t[8 + 3].class, 1);
        let c = &t[2 * 8 + 1];
        assert_eq!(c.class, 2);
        let bt = c.box_target.unwrap();
        let (cx, cy) = location_center(2, 1, 8);
        let b = [cx - 8.0 * bt[0].exp(), cy - 8.0 * bt[1].exp(), cx + 8.0 * bt[2].exp(), cy + 8.0 * bt[3].exp()];
        for (a, e) in b.iter().zip([10.0, 10.0, 22.0, 22.0]) {
            assert!((a - e).abs() < 1e-9);
        }
        assert_eq!(t[63].class, 0);
    }
}
