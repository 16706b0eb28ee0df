//! Fourier-domain corruptions, applied per RGB channel.
//!
//! High-pass DC policy: the zero-frequency term is always kept, so the
//! filter removes low-frequency structure but not the channel mean. A flat
//! image therefore passes through unchanged at every severity.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::Result;
use crate::image::ImageTensor;

/// Row-major 2-D spectrum of one real plane.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub height: usize,
    pub width: usize,
    pub bins: Vec<Complex<f64>>,
}

fn fft_rows_cols(h: usize, w: usize, data: &mut [Complex<f64>], inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in data.chunks_exact_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex::default(); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = data[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            data[y * w + x] = column[y];
        }
    }
}

impl Spectrum {
    pub fn forward(plane: &[f32], height: usize, width: usize) -> Self {
        let mut bins: Vec<Complex<f64>> =
            plane.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
        fft_rows_cols(height, width, &mut bins, false);
        Self { height, width, bins }
    }

    /// Inverse transform, keeping the real part.
    pub fn inverse_real(&self) -> Vec<f64> {
        let mut data = self.bins.clone();
        fft_rows_cols(self.height, self.width, &mut data, true);
        let n = (self.height * self.width) as f64;
        data.iter().map(|c| c.re / n).collect()
    }

    pub fn amplitudes(&self) -> Vec<f64> {
        self.bins.iter().map(|c| c.norm()).collect()
    }

    /// Index of the bin holding frequency `-k`.
    #[inline]
    pub fn mirror(&self, idx: usize) -> usize {
        let (y, x) = (idx / self.width, idx % self.width);
        let my = (self.height - y) % self.height;
        let mx = (self.width - x) % self.width;
        my * self.width + mx
    }

    /// Radial distance of a bin from DC in signed-frequency index units.
    #[inline]
    pub fn radius(&self, idx: usize) -> f64 {
        let (y, x) = (idx / self.width, idx % self.width);
        let fy = if y > self.height / 2 { y as f64 - self.height as f64 } else { y as f64 };
        let fx = if x > self.width / 2 { x as f64 - self.width as f64 } else { x as f64 };
        (fy * fy + fx * fx).sqrt()
    }
}

fn per_channel(img: &ImageTensor, f: impl Fn(Spectrum) -> Spectrum) -> [Vec<f64>; 3] {
    let (h, w) = (img.height(), img.width());
    [0, 1, 2].map(|c| f(Spectrum::forward(&img.plane(c), h, w)).inverse_real())
}

fn to_image(img: &ImageTensor, planes: [Vec<f64>; 3]) -> Result<ImageTensor> {
    let planes = planes.map(|p| p.into_iter().map(|v| v as f32).collect::<Vec<f32>>());
    ImageTensor::from_planes(img.height(), img.width(), &planes)
}

/// Multiplies every phase angle by `factor`, keeping amplitudes. The scaled
/// spectrum is built on one half-plane and mirrored as its conjugate, so it
/// stays Hermitian and the inverse transform is real. Self-conjugate bins
/// (DC and Nyquist) carry real values and are left as they are.
pub fn phase_scale_spectrum(mut s: Spectrum, factor: f64) -> Spectrum {
    for idx in 0..s.bins.len() {
        let m = s.mirror(idx);
        if m <= idx {
            continue;
        }
        let (amp, phase) = s.bins[idx].to_polar();
        let scaled = Complex::from_polar(amp, phase * factor);
        s.bins[idx] = scaled;
        s.bins[m] = scaled.conj();
    }
    s
}

/// Unclamped phase-scaled planes; used to check amplitude preservation.
pub fn phase_scale_planes(img: &ImageTensor, factor: f64) -> [Vec<f64>; 3] {
    per_channel(img, |s| phase_scale_spectrum(s, factor))
}

pub fn phase_scale(img: &ImageTensor, factor: f64) -> Result<ImageTensor> {
    to_image(img, phase_scale_planes(img, factor))
}

/// Zeroes every non-DC bin with radius `<= cutoff`.
pub fn high_pass(img: &ImageTensor, cutoff: f64) -> Result<ImageTensor> {
    let planes = per_channel(img, |mut s| {
        if cutoff > 0.0 {
            for idx in 1..s.bins.len() {
                if s.radius(idx) <= cutoff {
                    s.bins[idx] = Complex::default();
                }
            }
        }
        s
    });
    to_image(img, planes)
}

/// Blends every non-DC amplitude toward the mean non-DC amplitude.
pub fn constant_amplitude(img: &ImageTensor, blend: f64) -> Result<ImageTensor> {
    let planes = per_channel(img, |mut s| {
        let n = s.bins.len();
        let mean_amp = s.bins[1..].iter().map(|c| c.norm()).sum::<f64>() / (n - 1) as f64;
        for idx in 1..n {
            let (amp, phase) = s.bins[idx].to_polar();
            let a = (1.0 - blend) * amp + blend * mean_amp;
            s.bins[idx] = Complex::from_polar(a, phase);
        }
        s
    });
    to_image(img, planes)
}
