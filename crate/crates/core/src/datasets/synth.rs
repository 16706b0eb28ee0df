//! Synthetic shape-detection benchmark.
//!
//! Every image holds 1-5 non-overlapping instances of four shape classes.
//! A scene (layout, sizes, base colours) depends only on `(seed, index)`;
//! the domain decides how the scene is rendered. Target domains use
//! renderer-level styles that are not members of the corruption catalog.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{coco, BoxLabel, DatasetMeta, DatasetSample, RoleKind};
use crate::bbox::BBox;
use crate::corruptions::filters;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::{stream_rng, Stream};

pub const CLASS_NAMES: [&str; 4] = ["circle", "square", "triangle", "star"];
const SUPERSAMPLE: usize = 4;
const STAR_INNER_RATIO: f64 = 0.45;

pub fn class_names() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SynthDomain {
    SourcePlain,
    TargetStylized,
    TargetTextured,
    TargetInverted,
}

impl SynthDomain {
    pub const ALL: [SynthDomain; 4] = [
        SynthDomain::SourcePlain,
        SynthDomain::TargetStylized,
        SynthDomain::TargetTextured,
        SynthDomain::TargetInverted,
    ];
    pub const TARGETS: [SynthDomain; 3] =
        [SynthDomain::TargetStylized, SynthDomain::TargetTextured, SynthDomain::TargetInverted];

    pub fn name(self) -> &'static str {
        match self {
            SynthDomain::SourcePlain => "source_plain",
            SynthDomain::TargetStylized => "target_stylized",
            SynthDomain::TargetTextured => "target_textured",
            SynthDomain::TargetInverted => "target_inverted",
        }
    }

    /// Renderer operations that distinguish this domain from the source.
    pub fn renderer_ops(self) -> &'static [&'static str] {
        match self {
            SynthDomain::SourcePlain => &[],
            SynthDomain::TargetStylized => &["palette_remap", "paper_grain", "feathered_edges"],
            SynthDomain::TargetTextured => &["texture_fill", "checker_background"],
            SynthDomain::TargetInverted => &["value_inversion"],
        }
    }

    fn id(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for SynthDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthDomain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SynthDomain::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown synthetic domain `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Range of the shape's circumradius in pixels.
    pub min_radius: f64,
    pub max_radius: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { size: 64, min_objects: 1, max_objects: 5, min_radius: 6.0, max_radius: 13.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Geometry {
    Circle { cx: f64, cy: f64, r: f64 },
    Polygon(Vec<(f64, f64)>),
}

impl Geometry {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Geometry::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Geometry::Polygon(pts) => {
                let mut inside = false;
                let n = pts.len();
                let mut j = n - 1;
                for i in 0..n {
                    let (xi, yi) = pts[i];
                    let (xj, yj) = pts[j];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
        }
    }

    /// Analytic bounding box in continuous pixel coordinates.
    pub fn bbox(&self) -> BBox {
        match self {
            Geometry::Circle { cx, cy, r } => BBox::new(cx - r, cy - r, cx + r, cy + r),
            Geometry::Polygon(pts) => {
                let (mut x1, mut y1, mut x2, mut y2) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
                for &(x, y) in pts {
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x);
                    y2 = y2.max(y);
                }
                BBox::new(x1, y1, x2, y2)
            }
        }
    }

    fn regular(cx: f64, cy: f64, r: f64, n: usize, rot: f64) -> Self {
        Geometry::Polygon(
            (0..n)
                .map(|i| {
                    let a = rot + i as f64 * std::f64::consts::TAU / n as f64;
                    (cx + r * a.cos(), cy + r * a.sin())
                })
                .collect(),
        )
    }

    fn star(cx: f64, cy: f64, r: f64, rot: f64) -> Self {
        Geometry::Polygon(
            (0..10)
                .map(|i| {
                    let a = rot + i as f64 * std::f64::consts::TAU / 10.0;
                    let rr = if i % 2 == 0 { r } else { r * STAR_INNER_RATIO };
                    (cx + rr * a.cos(), cy + rr * a.sin())
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeInstance {
    pub class_id: u32,
    pub geometry: Geometry,
    /// Base fill colour as (hue, saturation, value).
    pub fill_hsv: [f32; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub size: usize,
    pub shapes: Vec<ShapeInstance>,
    pub background_hsv: [f32; 3],
    /// Vertical brightness drift of the background.
    pub gradient: f32,
}

fn make_geometry(class_id: u32, cx: f64, cy: f64, r: f64, rot: f64) -> Geometry {
    match class_id {
        1 => Geometry::Circle { cx, cy, r },
        2 => Geometry::regular(cx, cy, r, 4, rot),
        3 => Geometry::regular(cx, cy, r, 3, rot),
        _ => Geometry::star(cx, cy, r, rot),
    }
}

pub fn sample_scene(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Scene {
    let size = cfg.size as f64;
    let target = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut shapes: Vec<ShapeInstance> = Vec::new();
    let mut attempts = 0;
    while shapes.len() < target && attempts < 200 {
        attempts += 1;
        let class_id = rng.random_range(1..=CLASS_NAMES.len() as u32);
        let r = rng.random_range(cfg.min_radius..=cfg.max_radius);
        let rot = rng.random_range(0.0..std::f64::consts::TAU);
        let cx = rng.random_range(r + 1.0..size - r - 1.0);
        let cy = rng.random_range(r + 1.0..size - r - 1.0);
        let geometry = make_geometry(class_id, cx, cy, r, rot);
        let b = geometry.bbox();
        let grown = BBox::new(b.x1 - 2.0, b.y1 - 2.0, b.x2 + 2.0, b.y2 + 2.0);
        if shapes.iter().any(|s| s.geometry.bbox().intersection(&grown) > 0.0) {
            continue;
        }
        let fill_hsv = [
            rng.random_range(0.0..1.0),
            rng.random_range(0.4..0.9),
            rng.random_range(0.1..0.45),
        ];
        shapes.push(ShapeInstance { class_id, geometry, fill_hsv });
    }
    Scene {
        size: cfg.size,
        shapes,
        background_hsv: [
            rng.random_range(0.0..1.0),
            rng.random_range(0.05..0.4),
            rng.random_range(0.65..0.95),
        ],
        gradient: rng.random_range(-0.1..0.1),
    }
}

impl Scene {
    pub fn labels(&self) -> Vec<BoxLabel> {
        self.shapes
            .iter()
            .map(|s| BoxLabel {
                class_id: s.class_id,
                bbox: s.geometry.bbox().clamp_to(self.size as f64, self.size as f64),
            })
            .collect()
    }
}

fn hsv(c: [f32; 3]) -> [f32; 3] {
    let (r, g, b) = filters::hsv_to_rgb(c[0], c[1].clamp(0.0, 1.0), c[2].clamp(0.0, 1.0));
    [r, g, b]
}

/// Fractional coverage of each pixel by `geometry`.
fn coverage(geometry: &Geometry, size: usize) -> Vec<f32> {
    let b = geometry.bbox();
    let mut cov = vec![0.0f32; size * size];
    let y0 = b.y1.floor().max(0.0) as usize;
    let y1 = (b.y2.ceil() as usize).min(size);
    let x0 = b.x1.floor().max(0.0) as usize;
    let x1 = (b.x2.ceil() as usize).min(size);
    let step = 1.0 / SUPERSAMPLE as f64;
    for y in y0..y1 {
        for x in x0..x1 {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) * step;
                    let py = y as f64 + (sy as f64 + 0.5) * step;
                    if geometry.contains(px, py) {
                        hits += 1;
                    }
                }
            }
            cov[y * size + x] = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
        }
    }
    cov
}

fn composite(px: &mut [f32], alpha: &[f32], color: impl Fn(usize) -> [f32; 3]) {
    for (i, &a) in alpha.iter().enumerate() {
        if a > 0.0 {
            let c = color(i);
            for ch in 0..3 {
                px[i * 3 + ch] = px[i * 3 + ch] * (1.0 - a) + c[ch] * a;
            }
        }
    }
}

fn render_source(scene: &Scene) -> Vec<f32> {
    let n = scene.size;
    let mut px = vec![0.0f32; n * n * 3];
    for y in 0..n {
        let mut c = scene.background_hsv;
        c[2] += scene.gradient * (y as f32 / n as f32 - 0.5);
        let rgb = hsv(c);
        for x in 0..n {
            px[(y * n + x) * 3..(y * n + x) * 3 + 3].copy_from_slice(&rgb);
        }
    }
    for s in &scene.shapes {
        let rgb = hsv(s.fill_hsv);
        composite(&mut px, &coverage(&s.geometry, n), |_| rgb);
    }
    px
}

/// Hue-rotated, low-luminance-contrast palette on grainy paper with soft
/// shape edges.
fn render_stylized(scene: &Scene, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = scene.size;
    let rotate = |h: f32| (h + 0.42).rem_euclid(1.0);
    let bg = scene.background_hsv;
    let bg_rgb = hsv([rotate(bg[0]), (bg[1] + 0.35).min(1.0), 0.45 + 0.3 * (bg[2] - 0.65) / 0.3]);
    let mut px: Vec<f32> = (0..n * n).flat_map(|_| bg_rgb).collect();
    for s in &scene.shapes {
        let f = s.fill_hsv;
        let rgb = hsv([rotate(f[0]), (f[1] + 0.2).min(1.0), 0.3 + 0.6 * (f[2] - 0.1) / 0.35]);
        let cov = filters::gaussian_blur(&coverage(&s.geometry, n), n, n, 0.8);
        composite(&mut px, &cov, |_| rgb);
    }
    let raw: Vec<f32> = (0..n * n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let grain = filters::gaussian_blur(&raw, n, n, 0.6);
    let peak = grain.iter().fold(1e-6f32, |m, v| m.max(v.abs()));
    for (i, v) in px.iter_mut().enumerate() {
        *v *= 1.0 + 0.12 * grain[i / 3] / peak;
    }
    px
}

/// Stripe-filled shapes over a faint checkerboard.
fn render_textured(scene: &Scene, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = scene.size;
    let bg = hsv(scene.background_hsv);
    let bg_alt = hsv([scene.background_hsv[0], scene.background_hsv[1], scene.background_hsv[2] - 0.12]);
    let cell = rng.random_range(3..7);
    let mut px = vec![0.0f32; n * n * 3];
    for y in 0..n {
        for x in 0..n {
            let c = if (x / cell + y / cell) % 2 == 0 { bg } else { bg_alt };
            px[(y * n + x) * 3..(y * n + x) * 3 + 3].copy_from_slice(&c);
        }
    }
    for s in &scene.shapes {
        let a = hsv(s.fill_hsv);
        let b = hsv([(s.fill_hsv[0] + 0.5).rem_euclid(1.0), s.fill_hsv[1], (s.fill_hsv[2] + 0.35).min(1.0)]);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let period: f64 = rng.random_range(3.0..6.0);
        let (ct, st) = (theta.cos(), theta.sin());
        composite(&mut px, &coverage(&s.geometry, n), |i| {
            let (y, x) = ((i / n) as f64, (i % n) as f64);
            let t = (x * ct + y * st) / period;
            if t.rem_euclid(1.0) < 0.5 {
                a
            } else {
                b
            }
        });
    }
    px
}

pub fn render(scene: &Scene, domain: SynthDomain, style_rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    let n = scene.size;
    let px = match domain {
        SynthDomain::SourcePlain => render_source(scene),
        SynthDomain::TargetInverted => render_source(scene).into_iter().map(|v| 1.0 - v).collect(),
        SynthDomain::TargetStylized => render_stylized(scene, style_rng),
        SynthDomain::TargetTextured => render_textured(scene, style_rng),
    };
    ImageTensor::from_unclamped(n, n, px)
}

/// Scene `index` of the dataset keyed by `seed`, rendered in `domain`.
pub fn synth_sample(domain: SynthDomain, seed: u64, index: usize, cfg: &SynthConfig) -> Result<DatasetSample> {
    let mut scene_rng = stream_rng(seed, Stream::Synth, &[index as u64]);
    let scene = sample_scene(cfg, &mut scene_rng);
    let mut style_rng = stream_rng(seed, Stream::Synth, &[index as u64, domain.id()]);
    let image = render(&scene, domain, &mut style_rng)?;
    Ok(DatasetSample {
        image_id: format!("{}_{index:05}", domain.name()),
        image,
        labels: scene.labels(),
    })
}

pub fn synth_samples(domain: SynthDomain, n: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<DatasetSample>> {
    crate::par::map_range(n, |i| synth_sample(domain, seed, i, cfg))
        .into_iter()
        .collect()
}

/// Writes `n` rendered images plus annotations under `out`.
pub fn synth_generate(
    domain: SynthDomain,
    n: usize,
    seed: u64,
    out: &Path,
    cfg: &SynthConfig,
) -> Result<DatasetMeta> {
    if n == 0 {
        return Err(Error::Config("synthetic dataset needs n >= 1".into()));
    }
    let samples = synth_samples(domain, n, seed, cfg)?;
    coco::write_dataset(out, &class_names(), &samples)?;
    Ok(DatasetMeta {
        name: domain.name().to_string(),
        num_classes: CLASS_NAMES.len(),
        class_names: class_names(),
        num_samples: n,
        role: if domain == SynthDomain::SourcePlain { RoleKind::Source } else { RoleKind::Target },
    })
}
