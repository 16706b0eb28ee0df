//! Deterministic fixture images for tests, benches and previews.

use crate::image::ImageTensor;

/// A "natural-looking" test image: smooth colour gradient, a few soft discs
/// and a faint sinusoidal texture.
pub fn natural_image(height: usize, width: usize) -> ImageTensor {
    let mut px = Vec::with_capacity(height * width * 3);
    let discs = [
        (0.3, 0.35, 0.18, [0.9f32, 0.2, 0.2]),
        (0.65, 0.6, 0.22, [0.2, 0.3, 0.85]),
        (0.25, 0.75, 0.12, [0.95, 0.85, 0.2]),
    ];
    for y in 0..height {
        for x in 0..width {
            let fy = y as f32 / height as f32;
            let fx = x as f32 / width as f32;
            let tex = 0.05 * ((fx * 23.0).sin() * (fy * 17.0).cos());
            let mut rgb = [0.25 + 0.4 * fx + tex, 0.3 + 0.3 * fy, 0.55 - 0.25 * fx + tex];
            for &(cy, cx, r, col) in &discs {
                let d = ((fy - cy).powi(2) + (fx - cx).powi(2)).sqrt();
                let a = (1.0 - ((d - r) / 0.03).clamp(0.0, 1.0)) * 0.9;
                for c in 0..3 {
                    rgb[c] = rgb[c] * (1.0 - a) + col[c] * a;
                }
            }
            px.extend(rgb.iter().map(|v| v.clamp(0.0, 1.0)));
        }
    }
    ImageTensor::new(height, width, px).expect("fixture is valid")
}

/// Horizontal ramp, identical in every channel: value = x / (width - 1).
pub fn ramp_image(height: usize, width: usize) -> ImageTensor {
    let mut px = Vec::with_capacity(height * width * 3);
    for _ in 0..height {
        for x in 0..width {
            let v = x as f32 / (width - 1) as f32;
            px.extend_from_slice(&[v, v, v]);
        }
    }
    ImageTensor::new(height, width, px).expect("fixture is valid")
}
