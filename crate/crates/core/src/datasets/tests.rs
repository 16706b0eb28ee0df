use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::synth::{self, SynthConfig, SynthDomain};
use super::*;
use crate::corruptions::{builtin_catalog, CorruptionPool};
use crate::error::Error;
use crate::fixtures::natural_image;

fn write_fixture(dir: &Path, categories: serde_json::Value, bad_box: bool) {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).unwrap();
    natural_image(32, 32).save_png(&img_dir.join("a.png")).unwrap();
    natural_image(32, 32).save_png(&img_dir.join("b.png")).unwrap();
    let w = if bad_box { 0.0 } else { 10.0 };
    let ann = json!({
        "images": [
            {"id": 1, "file_name": "a.png", "width": 32, "height": 32},
            {"id": 2, "file_name": "b.png", "width": 32, "height": 32}
        ],
        "annotations": [
            {"id": 1, "image_id": 1, "category_id": 1, "bbox": [1.0, 2.0, w, 8.0]},
            {"id": 2, "image_id": 1, "category_id": 2, "bbox": [12.0, 12.0, 6.0, 6.0]},
            {"id": 3, "image_id": 2, "category_id": 1, "bbox": [20.0, 20.0, 20.0, 5.0]}
        ],
        "categories": categories
    });
    fs::write(dir.join("annotations.json"), ann.to_string()).unwrap();
}

fn two_classes() -> serde_json::Value {
    json!([{"id": 1, "name": "circle"}, {"id": 2, "name": "square"}])
}

#[test]
fn loads_fixture_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), two_classes(), false);
    let (meta, iter) = load_dataset(dir.path(), DatasetRole::Source).unwrap();
    assert_eq!(meta.num_samples, 2);
    assert_eq!(meta.num_classes, 2);
    let samples: Vec<_> = iter.collect::<Result<_>>().unwrap();
    assert_eq!(samples.iter().map(|s| s.labels.len()).sum::<usize>(), 3);
    assert_eq!(samples[0].labels[0].bbox, BBox::new(1.0, 2.0, 11.0, 10.0));
    // xywh box running past the border is clamped to the image.
    assert_eq!(samples[1].labels[0].bbox, BBox::new(20.0, 20.0, 32.0, 25.0));
}

#[test]
fn rejects_degenerate_boxes() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), two_classes(), true);
    assert!(matches!(load_dataset(dir.path(), DatasetRole::Source), Err(Error::Schema(_))));
}

#[test]
fn target_with_extra_class_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(
        dir.path(),
        json!([{"id": 1, "name": "circle"}, {"id": 2, "name": "square"}, {"id": 3, "name": "hexagon"}]),
        false,
    );
    let role = DatasetRole::Target { source_classes: vec!["circle".into(), "square".into()] };
    assert!(matches!(load_dataset(dir.path(), role), Err(Error::LabelSpaceMismatch { .. })));
}

#[test]
fn missing_image_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), two_classes(), false);
    fs::remove_file(dir.path().join("images/b.png")).unwrap();
    assert!(matches!(load_dataset(dir.path(), DatasetRole::Source), Err(Error::MissingImage(_))));
}

#[test]
fn malformed_json_is_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("annotations.json"), "{\"images\": 3}").unwrap();
    assert!(matches!(load_dataset(dir.path(), DatasetRole::Source), Err(Error::Schema(_))));
}

fn sample() -> DatasetSample {
    synth::synth_sample(SynthDomain::SourcePlain, 5, 0, &SynthConfig::default()).unwrap()
}

#[test]
fn identity_pool_pairs_are_unchanged() {
    let s = sample();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pair = make_view_pair(&s, &CorruptionPool::identity(), &mut rng).unwrap();
    assert_eq!(pair.augmented, pair.original);
    assert_eq!(pair.labels, s.labels);
}

#[test]
fn view_pairs_are_reproducible_and_keep_labels() {
    let s = sample();
    let pool = CorruptionPool::default_pool();
    let make = || make_view_pair(&s, &pool, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
    let (a, b) = (make(), make());
    assert_eq!(a.spec, b.spec);
    assert_eq!(a.augmented, b.augmented);
    assert_eq!(a.labels, s.labels);
    assert!(a.augmented.same_shape(&a.original));
}

#[test]
fn synth_generation_is_bitwise_deterministic() {
    let cfg = SynthConfig::default();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth::synth_generate(SynthDomain::SourcePlain, 10, 1, d1.path(), &cfg).unwrap();
    synth::synth_generate(SynthDomain::SourcePlain, 10, 1, d2.path(), &cfg).unwrap();
    let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(read(d1.path(), "annotations.json"), read(d2.path(), "annotations.json"));
    for i in 0..10 {
        let f = format!("images/source_plain_{i:05}.png");
        assert_eq!(read(d1.path(), &f), read(d2.path(), &f));
    }
    let (meta, samples) = load_all(d1.path(), DatasetRole::Source).unwrap();
    assert_eq!(meta.class_names, synth::class_names());
    assert_eq!(samples.len(), 10);
}

/// Fine-grid rasterisation oracle: bounds of the sub-pixel points inside
/// each shape, independent of the analytic box computation.
#[test]
fn annotation_boxes_tightly_bound_rendered_shapes() {
    let cfg = SynthConfig::default();
    let grid = 8;
    for index in 0..30 {
        let mut rng = crate::rng::stream_rng(3, crate::rng::Stream::Synth, &[index]);
        let scene = synth::sample_scene(&cfg, &mut rng);
        let labels = scene.labels();
        assert!((1..=5).contains(&labels.len()));
        for (shape, label) in scene.shapes.iter().zip(&labels) {
            let (mut x1, mut y1, mut x2, mut y2) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
            for py in 0..cfg.size * grid {
                for px in 0..cfg.size * grid {
                    let (x, y) = ((px as f64 + 0.5) / grid as f64, (py as f64 + 0.5) / grid as f64);
                    if shape.geometry.contains(x, y) {
                        x1 = x1.min(x);
                        y1 = y1.min(y);
                        x2 = x2.max(x);
                        y2 = y2.max(y);
                    }
                }
            }
            let b = label.bbox;
            for (a, o) in [(b.x1, x1), (b.y1, y1), (b.x2, x2), (b.y2, y2)] {
                assert!((a - o).abs() <= 1.0, "box {b:?} vs raster ({x1},{y1},{x2},{y2})");
            }
        }
    }
}

#[test]
fn inverted_domain_mean_mirrors_source() {
    let cfg = SynthConfig::default();
    for i in 0..10 {
        let src = synth::synth_sample(SynthDomain::SourcePlain, 9, i, &cfg).unwrap();
        let inv = synth::synth_sample(SynthDomain::TargetInverted, 9, i, &cfg).unwrap();
        assert!((inv.image.mean() - (1.0 - src.image.mean())).abs() < 0.02);
        assert_eq!(src.labels, inv.labels);
    }
}

#[test]
fn target_domains_share_layout_but_differ_in_pixels() {
    let cfg = SynthConfig::default();
    let src = synth::synth_sample(SynthDomain::SourcePlain, 4, 2, &cfg).unwrap();
    for d in SynthDomain::TARGETS {
        let t = synth::synth_sample(d, 4, 2, &cfg).unwrap();
        assert_eq!(t.labels, src.labels);
        assert!(t.image.mean_abs_diff(&src.image) > 0.05, "{d}");
    }
}

#[test]
fn target_styles_are_not_catalog_corruptions() {
    let catalog: std::collections::HashSet<&str> =
        builtin_catalog().entries.iter().map(|e| e.name.as_str()).collect();
    let pool = CorruptionPool::default_pool();
    for d in SynthDomain::TARGETS {
        assert!(!d.renderer_ops().is_empty());
        for op in d.renderer_ops() {
            assert!(!catalog.contains(op), "{op}");
            assert!(!pool.contains(op), "{op}");
        }
    }
}

#[test]
fn domain_names_parse() {
    for d in SynthDomain::ALL {
        assert_eq!(d.name().parse::<SynthDomain>().unwrap(), d);
    }
    assert!("target_foggy".parse::<SynthDomain>().is_err());
}
