use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::filters;
use crate::error::Result;
use crate::image::ImageTensor;

fn per_plane(img: &ImageTensor, f: impl Fn(&[f32]) -> Vec<f32>) -> Result<ImageTensor> {
    let planes = [f(&img.plane(0)), f(&img.plane(1)), f(&img.plane(2))];
    ImageTensor::from_planes(img.height(), img.width(), &planes)
}

pub fn gaussian(img: &ImageTensor, sigma: f64) -> Result<ImageTensor> {
    let (h, w) = (img.height(), img.width());
    per_plane(img, |p| filters::gaussian_blur(p, h, w, sigma))
}

/// Averages along a line segment of `length` pixels at a random angle.
pub fn motion(img: &ImageTensor, length: f64, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    let (h, w) = (img.height(), img.width());
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let ksize = (length.ceil() as usize) | 1;
    let c = (ksize / 2) as f64;
    let mut kernel = vec![0.0f32; ksize * ksize];
    let steps = (length * 4.0).ceil() as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64 - 0.5;
        let x = (c + t * (length - 1.0) * angle.cos()).round() as usize;
        let y = (c + t * (length - 1.0) * angle.sin()).round() as usize;
        kernel[y.min(ksize - 1) * ksize + x.min(ksize - 1)] += 1.0;
    }
    let s: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= s);
    per_plane(img, |p| filters::convolve(p, h, w, &kernel, ksize))
}

/// Gaussian blur, local pixel swaps within `max_delta`, blur again.
pub fn glass(
    img: &ImageTensor,
    sigma: f64,
    max_delta: usize,
    iterations: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ImageTensor> {
    let (h, w) = (img.height(), img.width());
    let mut planes = [
        filters::gaussian_blur(&img.plane(0), h, w, sigma),
        filters::gaussian_blur(&img.plane(1), h, w, sigma),
        filters::gaussian_blur(&img.plane(2), h, w, sigma),
    ];
    let d = max_delta as i64;
    for _ in 0..iterations {
        for y in (max_delta..h - max_delta).rev() {
            for x in (max_delta..w - max_delta).rev() {
                let dy = rng.random_range(-d..=d);
                let dx = rng.random_range(-d..=d);
                let a = y * w + x;
                let b = (y as i64 + dy) as usize * w + (x as i64 + dx) as usize;
                for p in planes.iter_mut() {
                    p.swap(a, b);
                }
            }
        }
    }
    let planes = planes.map(|p| filters::gaussian_blur(&p, h, w, sigma));
    ImageTensor::from_planes(h, w, &planes)
}

/// Disk (defocus) kernel followed by a light anti-alias blur.
pub fn defocus(img: &ImageTensor, radius: f64, alias_sigma: f64) -> Result<ImageTensor> {
    let (h, w) = (img.height(), img.width());
    let r = radius.ceil() as isize;
    let ksize = (2 * r + 1) as usize;
    let mut kernel = vec![0.0f32; ksize * ksize];
    for ky in -r..=r {
        for kx in -r..=r {
            if ((kx * kx + ky * ky) as f64) <= radius * radius {
                kernel[((ky + r) as usize) * ksize + (kx + r) as usize] = 1.0;
            }
        }
    }
    let s: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= s);
    per_plane(img, |p| {
        let d = filters::convolve(p, h, w, &kernel, ksize);
        filters::gaussian_blur(&d, h, w, alias_sigma)
    })
}

/// Mean of centre zooms from 1.0 up to `max_zoom`.
pub fn zoom(img: &ImageTensor, max_zoom: f64, step: f64) -> Result<ImageTensor> {
    let (h, w) = (img.height(), img.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut zooms = vec![1.0];
    let mut z = 1.0 + step;
    while z <= max_zoom + 1e-9 {
        zooms.push(z);
        z += step;
    }
    per_plane(img, |p| {
        let mut acc = vec![0.0f32; h * w];
        for &z in &zooms {
            for y in 0..h {
                for x in 0..w {
                    let sy = cy + (y as f64 - cy) / z;
                    let sx = cx + (x as f64 - cx) / z;
                    acc[y * w + x] += filters::bilinear(p, h, w, sy, sx);
                }
            }
        }
        let n = zooms.len() as f32;
        acc.iter_mut().for_each(|v| *v /= n);
        acc
    })
}
