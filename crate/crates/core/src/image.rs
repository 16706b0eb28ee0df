//! RGB image tensor with values in `[0, 1]`, stored row-major HWC.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;
pub const MIN_SIDE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::InvalidImage(format!(
                "{height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if pixels.len() != height * width * CHANNELS {
            return Err(Error::InvalidImage(format!(
                "expected {} values, got {}",
                height * width * CHANNELS,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self { height, width, pixels })
    }

    /// Clamps every value into `[0, 1]` (NaN becomes 0).
    pub fn from_unclamped(height: usize, width: usize, mut pixels: Vec<f32>) -> Result<Self> {
        for v in pixels.iter_mut() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, pixels)
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width * CHANNELS);
        for _ in 0..height * width {
            pixels.extend_from_slice(&rgb);
        }
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        CHANNELS
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * CHANNELS + c]
    }

    /// One channel as a contiguous row-major plane.
    pub fn plane(&self, c: usize) -> Vec<f32> {
        self.pixels.iter().skip(c).step_by(CHANNELS).copied().collect()
    }

    /// Rebuilds an image from three planes, clamping into `[0, 1]`.
    pub fn from_planes(height: usize, width: usize, planes: &[Vec<f32>; 3]) -> Result<Self> {
        let mut pixels = vec![0.0; height * width * CHANNELS];
        for (c, plane) in planes.iter().enumerate() {
            for (i, v) in plane.iter().enumerate() {
                pixels[i * CHANNELS + c] = *v;
            }
        }
        Self::from_unclamped(height, width, pixels)
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }

    pub fn mean_abs_diff(&self, other: &ImageTensor) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / self.pixels.len() as f64
    }

    pub fn mean_sq_diff(&self, other: &ImageTensor) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / self.pixels.len() as f64
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        let pixels = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self::new(h as usize, w as usize, pixels)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let base = (y as usize * self.width + x as usize) * CHANNELS;
            let q = |v: f32| (v * 255.0).round().clamp(0.0, 255.0) as u8;
            Rgb([
                q(self.pixels[base]),
                q(self.pixels[base + 1]),
                q(self.pixels[base + 2]),
            ])
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingImage(path.to_path_buf()));
        }
        let img = image::open(path)?.to_rgb8();
        Self::from_rgb8(&img)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_and_out_of_range() {
        assert!(ImageTensor::filled(8, 32, [0.5; 3]).is_err());
        assert!(ImageTensor::new(16, 16, vec![1.5; 16 * 16 * 3]).is_err());
        assert!(ImageTensor::new(16, 16, vec![0.5; 10]).is_err());
    }

    #[test]
    fn planes_round_trip() {
        let px: Vec<f32> = (0..16 * 20 * 3).map(|i| (i % 251) as f32 / 250.0).collect();
        let img = ImageTensor::new(16, 20, px).unwrap();
        let planes = [img.plane(0), img.plane(1), img.plane(2)];
        let back = ImageTensor::from_planes(16, 20, &planes).unwrap();
        assert_eq!(img, back);
    }
}
