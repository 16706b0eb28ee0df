//! Anchors, box delta coding and non-maximum suppression.

use crate::bbox::BBox;

/// Smallest side length a decoded box is allowed to collapse to.
pub const MIN_SIDE: f64 = 1e-3;

/// `(dx, dy, log dw, log dh)` coding relative to a reference box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCoder {
    pub weights: [f64; 4],
    /// Upper bound on the log-scale deltas before exponentiation.
    pub clip: f64,
}

impl BoxCoder {
    pub fn rpn() -> Self {
        Self { weights: [1.0; 4], clip: (1000.0f64 / 16.0).ln() }
    }

    pub fn head() -> Self {
        Self { weights: [10.0, 10.0, 5.0, 5.0], clip: (1000.0f64 / 16.0).ln() }
    }

    pub fn encode(&self, target: &BBox, reference: &BBox) -> [f64; 4] {
        let (rw, rh) = (reference.width(), reference.height());
        let (rx, ry) = reference.center();
        let (tw, th) = (target.width(), target.height());
        let (tx, ty) = target.center();
        let [wx, wy, ww, wh] = self.weights;
        [
            wx * (tx - rx) / rw,
            wy * (ty - ry) / rh,
            ww * (tw / rw).ln(),
            wh * (th / rh).ln(),
        ]
    }

    /// Decodes without clamping to the image.
    pub fn decode(&self, d: [f64; 4], reference: &BBox) -> BBox {
        let (rw, rh) = (reference.width(), reference.height());
        let (rx, ry) = reference.center();
        let [wx, wy, ww, wh] = self.weights;
        let cx = d[0] / wx * rw + rx;
        let cy = d[1] / wy * rh + ry;
        let w = (d[2] / ww).min(self.clip).exp() * rw;
        let h = (d[3] / wh).min(self.clip).exp() * rh;
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    /// `J[i][j] = d box_i / d delta_j` for the unclamped decode, box order
    /// `(x1, y1, x2, y2)`.
    pub fn decode_jacobian(&self, d: [f64; 4], reference: &BBox) -> [[f64; 4]; 4] {
        let (rw, rh) = (reference.width(), reference.height());
        let [wx, wy, ww, wh] = self.weights;
        let sw = d[2] / ww;
        let sh = d[3] / wh;
        let dw = if sw < self.clip { 0.5 * sw.exp() * rw / ww } else { 0.0 };
        let dh = if sh < self.clip { 0.5 * sh.exp() * rh / wh } else { 0.0 };
        [
            [rw / wx, 0.0, -dw, 0.0],
            [0.0, rh / wy, 0.0, -dh],
            [rw / wx, 0.0, dw, 0.0],
            [0.0, rh / wy, 0.0, dh],
        ]
    }
}

/// Clamps to the image and reports which coordinates were left untouched
/// (those are the ones that pass gradient).
pub fn clamp_box(b: &BBox, width: f64, height: f64) -> (BBox, [bool; 4]) {
    let lim = [width, height, width, height];
    let mut v = b.to_array();
    let mut pass = [true; 4];
    for j in 0..4 {
        if v[j] < 0.0 || v[j] > lim[j] {
            v[j] = v[j].clamp(0.0, lim[j]);
            pass[j] = false;
        }
    }
    for (lo, hi, l) in [(0usize, 2usize, width), (1, 3, height)] {
        if v[hi] - v[lo] < MIN_SIDE {
            v[lo] = v[lo].min(l - MIN_SIDE);
            v[hi] = v[lo] + MIN_SIDE;
            pass[lo] = false;
            pass[hi] = false;
        }
    }
    (BBox::from_array(v), pass)
}

/// Square anchors centred on every feature cell. Index order is
/// `(y * feat_w + x) * sizes.len() + a`.
pub fn generate_anchors(feat_h: usize, feat_w: usize, stride: usize, sizes: &[f64]) -> Vec<BBox> {
    let s = stride as f64;
    let mut out = Vec::with_capacity(feat_h * feat_w * sizes.len());
    for y in 0..feat_h {
        for x in 0..feat_w {
            let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
            for &size in sizes {
                out.push(BBox::new(cx - size / 2.0, cy - size / 2.0, cx + size / 2.0, cy + size / 2.0));
            }
        }
    }
    out
}

/// Indices sorted by descending score; equal scores keep ascending index.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy NMS. A box is dropped when its IoU with an already kept box
/// exceeds `iou_thresh`. Returns kept indices in rank order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    for i in rank_by_score(scores) {
        if keep.iter().all(|&k| boxes[k].iou(&boxes[i]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_round_trip() {
        for coder in [BoxCoder::rpn(), BoxCoder::head()] {
            let r = BBox::new(10.0, 12.0, 30.0, 40.0);
            let t = BBox::new(8.0, 15.5, 33.0, 37.0);
            let back = coder.decode(coder.encode(&t, &r), &r);
            for (a, b) in back.to_array().iter().zip(t.to_array()) {
                assert!((a - b).abs() < 1e-9);
            }
            assert_eq!(coder.decode([0.0; 4], &r), r);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let coder = BoxCoder::head();
        let r = BBox::new(5.0, 6.0, 25.0, 18.0);
        let d = [0.3, -0.7, 0.4, -0.2];
        let j = coder.decode_jacobian(d, &r);
        let h = 1e-6;
        for k in 0..4 {
            let (mut a, mut b) = (d, d);
            a[k] += h;
            b[k] -= h;
            let (ba, bb) = (coder.decode(a, &r).to_array(), coder.decode(b, &r).to_array());
            for i in 0..4 {
                let num = (ba[i] - bb[i]) / (2.0 * h);
                assert!((num - j[i][k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn width_is_monotone_in_width_delta() {
        let coder = BoxCoder::head();
        let r = BBox::new(0.0, 0.0, 16.0, 16.0);
        let mut prev = 0.0;
        for i in -40..=40 {
            let w = coder.decode([0.0, 0.0, i as f64 * 0.5, 0.0], &r).width();
            assert!(w >= prev);
            prev = w;
        }
    }

    #[test]
    fn clamp_keeps_boxes_valid() {
        let (b, pass) = clamp_box(&BBox::new(-5.0, 3.0, 70.0, 20.0), 64.0, 64.0);
        assert_eq!(b, BBox::new(0.0, 3.0, 64.0, 20.0));
        assert_eq!(pass, [false, true, false, true]);
        let (b, _) = clamp_box(&BBox::new(80.0, 80.0, 90.0, 95.0), 64.0, 64.0);
        assert!(b.is_valid());
        assert!(b.x2 <= 64.0 && b.y2 <= 64.0);
    }

    #[test]
    fn anchors_are_ordered_by_cell_then_size() {
        let a = generate_anchors(2, 3, 8, &[4.0, 8.0]);
        assert_eq!(a.len(), 12);
        assert_eq!(a[0], BBox::new(2.0, 2.0, 6.0, 6.0));
        assert_eq!(a[1], BBox::new(0.0, 0.0, 8.0, 8.0));
        assert_eq!(a[2].center(), (12.0, 4.0));
        assert_eq!(a[6].center(), (4.0, 12.0));
    }

    #[test]
    fn nms_behaviour() {
        let boxes = [
            BBox::new(0.0, 0.0, 10.0, 10.0),
            BBox::new(1.0, 1.0, 11.0, 11.0),
            BBox::new(20.0, 20.0, 30.0, 30.0),
        ];
        assert_eq!(nms(&boxes, &[0.9, 0.8, 0.7], 0.5), vec![0, 2]);
        assert_eq!(nms(&boxes, &[0.5, 0.5, 0.5], 0.5), vec![0, 2]);
        assert_eq!(nms(&boxes, &[0.1, 0.8, 0.7], 0.5), vec![1, 2]);
        assert_eq!(nms(&boxes, &[0.9, 0.8, 0.7], 1.0), vec![0, 1, 2]);
    }
}
