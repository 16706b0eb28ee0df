//! RoI Align with half-pixel alignment and a fixed sampling grid per bin.

use crate::bbox::BBox;

/// Sampling plan for one RoI: for each output bin the bilinear taps
/// `(flat spatial index, weight)`, already divided by the sample count.
#[derive(Debug, Clone)]
pub struct RoiPlan {
    taps: Vec<Vec<(usize, f32)>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoiAlign {
    pub pooled: usize,
    pub sampling_ratio: usize,
}

impl RoiAlign {
    pub fn bins(&self) -> usize {
        self.pooled * self.pooled
    }

    pub fn plan(&self, roi: &BBox, stride: usize, h: usize, w: usize) -> RoiPlan {
        let scale = 1.0 / stride as f64;
        let (x1, y1) = (roi.x1 * scale - 0.5, roi.y1 * scale - 0.5);
        let (x2, y2) = (roi.x2 * scale - 0.5, roi.y2 * scale - 0.5);
        let p = self.pooled as f64;
        let s = self.sampling_ratio;
        let bin_w = (x2 - x1) / p;
        let bin_h = (y2 - y1) / p;
        let norm = 1.0 / (s * s) as f64;
        let mut taps = Vec::with_capacity(self.bins());
        for py in 0..self.pooled {
            for px in 0..self.pooled {
                let mut bin = Vec::with_capacity(4 * s * s);
                for iy in 0..s {
                    let y = y1 + py as f64 * bin_h + (iy as f64 + 0.5) * bin_h / s as f64;
                    for ix in 0..s {
                        let x = x1 + px as f64 * bin_w + (ix as f64 + 0.5) * bin_w / s as f64;
                        bilinear_taps(y, x, h, w, norm, &mut bin);
                    }
                }
                taps.push(bin);
            }
        }
        RoiPlan { taps }
    }

    /// Pools `features` (`c × h × w`) into a `c · pooled²` vector laid out
    /// channel-major.
    pub fn forward(&self, features: &[f32], c: usize, h: usize, w: usize, plan: &RoiPlan, out: &mut [f32]) {
        let bins = self.bins();
        let hw = h * w;
        out.iter_mut().for_each(|v| *v = 0.0);
        for (b, taps) in plan.taps.iter().enumerate() {
            for &(idx, wt) in taps {
                for ch in 0..c {
                    out[ch * bins + b] += wt * features[ch * hw + idx];
                }
            }
        }
    }

    pub fn backward(&self, dout: &[f32], c: usize, h: usize, w: usize, plan: &RoiPlan, dfeatures: &mut [f32]) {
        let bins = self.bins();
        let hw = h * w;
        for (b, taps) in plan.taps.iter().enumerate() {
            for &(idx, wt) in taps {
                for ch in 0..c {
                    dfeatures[ch * hw + idx] += wt * dout[ch * bins + b];
                }
            }
        }
    }
}

fn bilinear_taps(mut y: f64, mut x: f64, h: usize, w: usize, norm: f64, out: &mut Vec<(usize, f32)>) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    y = y.max(0.0);
    x = x.max(0.0);
    let (y_lo, y_hi, ly) = corner(y, h);
    let (x_lo, x_hi, lx) = corner(x, w);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    for (yy, xx, wt) in [
        (y_lo, x_lo, hy * hx),
        (y_lo, x_hi, hy * lx),
        (y_hi, x_lo, ly * hx),
        (y_hi, x_hi, ly * lx),
    ] {
        if wt != 0.0 {
            out.push((yy * w + xx, (wt * norm) as f32));
        }
    }
}

fn corner(v: f64, n: usize) -> (usize, usize, f64) {
    let lo = v.floor() as usize;
    if lo >= n - 1 {
        (n - 1, n - 1, 0.0)
    } else {
        (lo, lo + 1, v - lo as f64)
    }
}
