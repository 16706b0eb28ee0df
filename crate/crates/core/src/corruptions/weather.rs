//! Procedural weather effects. These stay out of the default training pool
//! and exist for pool ablations and previews.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::filters;
use crate::error::Result;
use crate::image::ImageTensor;

fn smoothed_noise(h: usize, w: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let raw: Vec<f32> = (0..h * w).map(|_| rng.random_range(0.0f32..1.0)).collect();
    let s = filters::gaussian_blur(&raw, h, w, sigma);
    let (lo, hi) = s
        .iter()
        .fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(1e-6);
    s.into_iter().map(|v| (v - lo) / span).collect()
}

pub fn snow(
    img: &ImageTensor,
    density: f64,
    radius: f64,
    whiten: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ImageTensor> {
    let (h, w) = (img.height(), img.width());
    let mut flake = vec![0.0f32; h * w];
    let r = radius.ceil() as isize;
    for y in 0..h as isize {
        for x in 0..w as isize {
            if rng.random::<f64>() >= density {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    let d2 = (dx * dx + dy * dy) as f64;
                    let (yy, xx) = (y + dy, x + dx);
                    if d2 <= radius * radius && yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        flake[yy as usize * w + xx as usize] = 1.0;
                    }
                }
            }
        }
    }
    let wh = whiten as f32;
    let px = img
        .pixels()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let base = (1.0 - wh) * v + wh * (0.5 + 0.5 * v);
            let f = flake[i / 3];
            base * (1.0 - f) + 0.95 * f
        })
        .collect();
    ImageTensor::from_unclamped(h, w, px)
}

pub fn frost(img: &ImageTensor, image_weight: f64, frost_weight: f64, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    let (h, w) = (img.height(), img.width());
    let coarse = smoothed_noise(h, w, 2.0, rng);
    let fine = smoothed_noise(h, w, 0.7, rng);
    let px = img
        .pixels()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let t = (0.6 * coarse[i / 3] + 0.4 * fine[i / 3]).powf(1.5);
            let tint = [0.85f32, 0.9, 1.0][i % 3];
            image_weight as f32 * v + frost_weight as f32 * t * tint
        })
        .collect();
    ImageTensor::from_unclamped(h, w, px)
}

/// Diamond-square plasma fractal on a power-of-two grid in `[0, 1]`.
fn plasma(size: usize, decay: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = size + 1;
    let mut g = vec![0.0f64; n * n];
    let mut step = size;
    let mut scale = 1.0;
    while step > 1 {
        let half = step / 2;
        for y in (0..size).step_by(step) {
            for x in (0..size).step_by(step) {
                let avg = (g[y * n + x] + g[y * n + x + step] + g[(y + step) * n + x] + g[(y + step) * n + x + step]) / 4.0;
                g[(y + half) * n + x + half] = avg + scale * rng.random_range(-1.0..1.0);
            }
        }
        for y in (0..=size).step_by(half) {
            let start = if (y / half).is_multiple_of(2) { half } else { 0 };
            for x in (start..=size).step_by(step) {
                let mut sum = 0.0;
                let mut cnt = 0.0;
                if y >= half {
                    sum += g[(y - half) * n + x];
                    cnt += 1.0;
                }
                if y + half <= size {
                    sum += g[(y + half) * n + x];
                    cnt += 1.0;
                }
                if x >= half {
                    sum += g[y * n + x - half];
                    cnt += 1.0;
                }
                if x + half <= size {
                    sum += g[y * n + x + half];
                    cnt += 1.0;
                }
                g[y * n + x] = sum / cnt + scale * rng.random_range(-1.0..1.0);
            }
        }
        step = half;
        scale /= decay;
    }
    let (lo, hi) = g.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(1e-9);
    g.iter().map(|v| (v - lo) / span).collect()
}

pub fn fog(img: &ImageTensor, strength: f64, decay: f64, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    let (h, w) = (img.height(), img.width());
    let size = h.max(w).next_power_of_two();
    let map = plasma(size, decay, rng);
    let max = img.pixels().iter().fold(0.0f32, |m, &v| m.max(v)) as f64;
    let px = img
        .pixels()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let p = i / 3;
            let (y, x) = (p / w, p % w);
            let f = map[y * (size + 1) + x];
            ((v as f64 + strength * f) * max / (max + strength)) as f32
        })
        .collect();
    ImageTensor::from_unclamped(h, w, px)
}

pub fn spatter(img: &ImageTensor, coverage: f64, darkness: f64, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    let (h, w) = (img.height(), img.width());
    let noise = smoothed_noise(h, w, 1.5, rng);
    let mut sorted = noise.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = ((coverage * (h * w) as f64) as usize).min(h * w - 1);
    let threshold = sorted[k];
    let mud = [0.35f32, 0.25, 0.15];
    let d = darkness as f32;
    let px = img
        .pixels()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if noise[i / 3] > threshold {
                (1.0 - d) * v + d * mud[i % 3]
            } else {
                v
            }
        })
        .collect();
    ImageTensor::from_unclamped(h, w, px)
}
