use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::filters::{self, hsv_to_rgb, rgb_to_hsv};
use crate::error::Result;
use crate::image::ImageTensor;

/// Upper bound on elastic displacement as a fraction of `min(H, W)`.
/// Keeps ground-truth boxes valid without remapping labels.
pub const ELASTIC_MAX_DISPLACEMENT: f64 = 0.02;

fn map_hsv(img: &ImageTensor, f: impl Fn(f32, f32, f32) -> (f32, f32, f32)) -> Result<ImageTensor> {
    let mut px = Vec::with_capacity(img.pixels().len());
    for rgb in img.pixels().chunks_exact(3) {
        let (h, s, v) = rgb_to_hsv(rgb[0], rgb[1], rgb[2]);
        let (h, s, v) = f(h, s, v);
        let (r, g, b) = hsv_to_rgb(h, s.clamp(0.0, 1.0), v.clamp(0.0, 1.0));
        px.extend_from_slice(&[r, g, b]);
    }
    ImageTensor::from_unclamped(img.height(), img.width(), px)
}

pub fn brightness(img: &ImageTensor, shift: f64) -> Result<ImageTensor> {
    map_hsv(img, |h, s, v| (h, s, v + shift as f32))
}

/// Pulls every channel toward the image mean.
pub fn contrast(img: &ImageTensor, factor: f64) -> Result<ImageTensor> {
    let n = (img.height() * img.width()) as f64;
    let mut means = [0.0f64; 3];
    for rgb in img.pixels().chunks_exact(3) {
        for c in 0..3 {
            means[c] += rgb[c] as f64;
        }
    }
    means.iter_mut().for_each(|m| *m /= n);
    let px = img
        .pixels()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let m = means[i % 3];
            ((v as f64 - m) * factor + m) as f32
        })
        .collect();
    ImageTensor::from_unclamped(img.height(), img.width(), px)
}

pub fn saturate(img: &ImageTensor, scale: f64, shift: f64) -> Result<ImageTensor> {
    map_hsv(img, |h, s, v| (h, s * scale as f32 + shift as f32, v))
}

pub fn jpeg(img: &ImageTensor, quality: f64) -> Result<ImageTensor> {
    let rgb = img.to_rgb8();
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality.round().clamp(1.0, 100.0) as u8)
        .encode_image(&rgb)?;
    let decoded = image::load(Cursor::new(buf), image::ImageFormat::Jpeg)?.to_rgb8();
    ImageTensor::from_rgb8(&decoded)
}

/// Box-downsample by `scale`, then nearest-neighbour upsample.
pub fn pixelate(img: &ImageTensor, scale: f64) -> Result<ImageTensor> {
    let (h, w) = (img.height(), img.width());
    let sh = ((h as f64 * scale).round() as usize).max(1);
    let sw = ((w as f64 * scale).round() as usize).max(1);
    let mut small = vec![0.0f64; sh * sw * 3];
    let mut counts = vec![0usize; sh * sw];
    for y in 0..h {
        let sy = (y * sh / h).min(sh - 1);
        for x in 0..w {
            let sx = (x * sw / w).min(sw - 1);
            counts[sy * sw + sx] += 1;
            for c in 0..3 {
                small[(sy * sw + sx) * 3 + c] += img.get(y, x, c) as f64;
            }
        }
    }
    let mut px = vec![0.0f32; h * w * 3];
    for y in 0..h {
        let sy = (y * sh / h).min(sh - 1);
        for x in 0..w {
            let sx = (x * sw / w).min(sw - 1);
            let n = counts[sy * sw + sx] as f64;
            for c in 0..3 {
                px[(y * w + x) * 3 + c] = (small[(sy * sw + sx) * 3 + c] / n) as f32;
            }
        }
    }
    ImageTensor::from_unclamped(h, w, px)
}

/// Smooth random displacement field whose largest displacement is
/// `fraction * ELASTIC_MAX_DISPLACEMENT * min(H, W)` pixels.
pub fn elastic(
    img: &ImageTensor,
    fraction: f64,
    smoothing: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ImageTensor> {
    let (h, w) = (img.height(), img.width());
    let max_disp = fraction.clamp(0.0, 1.0) * ELASTIC_MAX_DISPLACEMENT * h.min(w) as f64;
    let field = |rng: &mut ChaCha8Rng| {
        let raw: Vec<f32> = (0..h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let smooth = filters::gaussian_blur(&raw, h, w, smoothing);
        let peak = smooth.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-12);
        smooth
            .into_iter()
            .map(|v| v as f64 / peak as f64 * max_disp)
            .collect::<Vec<f64>>()
    };
    let dx = field(rng);
    let dy = field(rng);
    let planes = [img.plane(0), img.plane(1), img.plane(2)];
    let warped = planes.each_ref().map(|p| {
        let mut out = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                out[i] = filters::bilinear(p, h, w, y as f64 + dy[i], x as f64 + dx[i]);
            }
        }
        out
    });
    ImageTensor::from_planes(h, w, &warped)
}
