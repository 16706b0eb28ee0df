use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::Result;
use crate::image::ImageTensor;

fn map_pixels(img: &ImageTensor, mut f: impl FnMut(f32) -> f32) -> Result<ImageTensor> {
    let px = img.pixels().iter().map(|&v| f(v)).collect();
    ImageTensor::from_unclamped(img.height(), img.width(), px)
}

pub fn gaussian(img: &ImageTensor, sigma: f64, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    let n = Normal::new(0.0, sigma).expect("sigma > 0");
    map_pixels(img, |v| v + n.sample(rng) as f32)
}

pub fn shot(img: &ImageTensor, photons: f64, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    map_pixels(img, |v| {
        let lambda = v as f64 * photons;
        if lambda <= 0.0 {
            return 0.0;
        }
        let k: f64 = Poisson::new(lambda).expect("lambda > 0").sample(rng);
        (k / photons) as f32
    })
}

/// Salt-and-pepper replacement of individual channel values.
pub fn impulse(img: &ImageTensor, amount: f64, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    map_pixels(img, |v| {
        if rng.random::<f64>() < amount {
            if rng.random::<bool>() {
                1.0
            } else {
                0.0
            }
        } else {
            v
        }
    })
}

pub fn speckle(img: &ImageTensor, scale: f64, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    let n = Normal::new(0.0, scale).expect("scale > 0");
    map_pixels(img, |v| v + v * n.sample(rng) as f32)
}
