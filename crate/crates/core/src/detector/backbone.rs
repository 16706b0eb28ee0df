//! Four-block convolutional backbone with total stride 8.

use rand::Rng;

use super::nn::{relu_backward, relu_inplace, Conv2d, ConvCache};
use super::params::ParamSet;
use super::FeatureMap;
use crate::image::ImageTensor;

pub const STRIDE: usize = 8;

#[derive(Debug, Clone)]
pub struct Backbone {
    convs: Vec<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct BackboneCache {
    convs: Vec<ConvCache>,
    acts: Vec<Vec<f32>>,
    dims: Vec<(usize, usize)>,
}

/// Converts an image to a zero-centred CHW buffer padded (with zeros) on the
/// bottom and right to a multiple of the stride.
pub fn image_to_input(img: &ImageTensor) -> (Vec<f32>, usize, usize) {
    let (h, w) = (img.height(), img.width());
    let ph = h.div_ceil(STRIDE) * STRIDE;
    let pw = w.div_ceil(STRIDE) * STRIDE;
    let mut out = vec![0.0f32; 3 * ph * pw];
    let px = img.pixels();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[c * ph * pw + y * pw + x] = (px[(y * w + x) * 3 + c] - 0.5) * 2.0;
            }
        }
    }
    (out, ph, pw)
}

impl Backbone {
    pub fn new(params: &mut ParamSet, channels: usize, rng: &mut impl Rng) -> Self {
        let c1 = (channels / 2).max(1);
        let convs = vec![
            Conv2d::new(params, "backbone.conv1", 3, c1, 3, 2, 1, None, rng),
            Conv2d::new(params, "backbone.conv2", c1, channels, 3, 2, 1, None, rng),
            Conv2d::new(params, "backbone.conv3", channels, channels, 3, 2, 1, None, rng),
            Conv2d::new(params, "backbone.conv4", channels, channels, 3, 1, 1, None, rng),
        ];
        Self { convs }
    }

    pub fn channels(&self) -> usize {
        self.convs.last().map(|c| c.cout).unwrap_or(0)
    }

    pub fn forward(&self, params: &ParamSet, img: &ImageTensor) -> (FeatureMap, BackboneCache) {
        let (mut x, mut h, mut w) = image_to_input(img);
        let mut caches = Vec::with_capacity(self.convs.len());
        let mut acts = Vec::with_capacity(self.convs.len());
        let mut dims = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (mut y, cache) = conv.forward(params, &x, h, w);
            relu_inplace(&mut y);
            (h, w) = conv.out_size(h, w);
            caches.push(cache);
            dims.push((h, w));
            acts.push(y.clone());
            x = y;
        }
        let fm = FeatureMap {
            values: x,
            channels: self.channels(),
            height: h,
            width: w,
            stride: STRIDE,
            image_height: img.height(),
            image_width: img.width(),
        };
        (fm, BackboneCache { convs: caches, acts, dims })
    }

    pub fn backward(&self, params: &ParamSet, cache: &BackboneCache, dfeatures: Vec<f32>, grads: &mut ParamSet) {
        let mut d = dfeatures;
        for i in (0..self.convs.len()).rev() {
            relu_backward(&cache.acts[i], &mut d);
            let need_dx = i > 0;
            match self.convs[i].backward(params, &cache.convs[i], &d, grads, need_dx) {
                Some(dx) => d = dx,
                None => break,
            }
        }
        debug_assert!(cache.dims.len() == self.convs.len());
    }
}
