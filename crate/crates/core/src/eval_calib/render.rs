//! Reliability diagram as a PNG: per-bin precision bars, the gap to the
//! mean confidence, and the identity diagonal.

use std::path::Path;

use image::{Rgb, RgbImage};

use super::CalibrationReport;
use crate::error::{Error, Result};

const SIZE: u32 = 320;
const MARGIN: u32 = 20;

fn fill(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, color: Rgb<u8>) {
    for y in y0.min(y1)..y0.max(y1) {
        for x in x0..x1 {
            img.put_pixel(x, y, color);
        }
    }
}

pub fn render_reliability_png(report: &CalibrationReport, path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
    let plot = SIZE - 2 * MARGIN;
    let base = SIZE - MARGIN;
    let to_y = |v: f64| base - (v.clamp(0.0, 1.0) * plot as f64).round() as u32;
    let n = report.bins.len().max(1) as u32;
    let bar = plot / n;
    for (i, b) in report.bins.iter().enumerate() {
        if b.empty {
            continue;
        }
        let x0 = MARGIN + i as u32 * bar + 1;
        let x1 = x0 + bar.saturating_sub(2);
        fill(&mut img, x0, base, x1, to_y(b.precision), Rgb([52, 101, 164]));
        fill(&mut img, x0, to_y(b.precision), x1, to_y(b.mean_confidence), Rgb([239, 125, 125]));
    }
    for t in 0..plot {
        let (x, y) = (MARGIN + t, base - t);
        for dy in 0..2 {
            img.put_pixel(x, y.saturating_sub(dy), Rgb([40, 40, 40]));
        }
    }
    fill(&mut img, MARGIN, base, SIZE - MARGIN, base + 1, Rgb([0, 0, 0]));
    fill(&mut img, MARGIN - 1, MARGIN, MARGIN, base, Rgb([0, 0, 0]));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path)?;
    Ok(())
}
