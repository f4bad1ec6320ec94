use std::path::Path;

use image::{Rgb, RgbImage};

use super::metrics::PrCurve;
use crate::error::{DbdError, Result};

const MARGIN: u32 = 24;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const AXIS: Rgb<u8> = Rgb([0, 0, 0]);
const CURVE: Rgb<u8> = Rgb([31, 119, 180]);

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let (xi, yi) = (x.round() as i64, y.round() as i64);
        if xi >= 0 && yi >= 0 && (xi as u32) < img.width() && (yi as u32) < img.height() {
            img.put_pixel(xi as u32, yi as u32, color);
        }
    }
}

/// Draws precision (y) against recall (x) on a unit square.
pub fn render_pr_plot(curve: &PrCurve, (width, height): (u32, u32)) -> Result<RgbImage> {
    if width <= 2 * MARGIN || height <= 2 * MARGIN {
        return Err(DbdError::Argument(format!(
            "plot size {width}x{height} is too small"
        )));
    }
    let mut img = RgbImage::from_pixel(width, height, BACKGROUND);
    let (w, h) = ((width - 2 * MARGIN) as f64, (height - 2 * MARGIN) as f64);
    let m = MARGIN as f64;
    let map = |r: f64, p: f64| (m + r * w, m + (1.0 - p) * h);
    for i in 1..10 {
        let v = i as f64 / 10.0;
        line(&mut img, map(v, 0.0), map(v, 1.0), GRID);
        line(&mut img, map(0.0, v), map(1.0, v), GRID);
    }
    line(&mut img, map(0.0, 0.0), map(1.0, 0.0), AXIS);
    line(&mut img, map(0.0, 0.0), map(0.0, 1.0), AXIS);
    let points: Vec<_> = curve
        .recall
        .iter()
        .zip(&curve.precision)
        .map(|(&r, &p)| map(r.clamp(0.0, 1.0), p.clamp(0.0, 1.0)))
        .collect();
    for pair in points.windows(2) {
        line(&mut img, pair[0], pair[1], CURVE);
    }
    if let [only] = points.as_slice() {
        line(&mut img, *only, *only, CURVE);
    }
    Ok(img)
}

pub fn write_pr_plot(curve: &PrCurve, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    render_pr_plot(curve, (480, 480))?.save(path)?;
    Ok(())
}
