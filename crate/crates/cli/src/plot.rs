//! Static PNG plots.

use std::path::Path;

use anyhow::Result;
use image::{Rgb, RgbImage};
use slt_core::autograd::Mat;

const SIZE: u32 = 320;
const MARGIN: f64 = 16.0;
const COLORS: [[u8; 3]; 4] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189]];

/// Scatter of the first two columns of each matrix, one colour per matrix,
/// on shared axes.
pub fn scatter(path: &Path, clouds: &[&Mat]) -> Result<()> {
    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
    let pts = clouds.iter().flat_map(|m| m.rows().into_iter().map(|r| (r[0], r.get(1).copied().unwrap_or(0.0))));
    let (mut lo, mut hi) = ((f64::INFINITY, f64::INFINITY), (f64::NEG_INFINITY, f64::NEG_INFINITY));
    for (x, y) in pts {
        lo = (lo.0.min(x), lo.1.min(y));
        hi = (hi.0.max(x), hi.1.max(y));
    }
    let span = |a: f64, b: f64| if b - a > 1e-12 { b - a } else { 1.0 };
    let scale = (SIZE as f64 - 2.0 * MARGIN) / span(lo.0, hi.0).max(span(lo.1, hi.1));
    for (k, m) in clouds.iter().enumerate() {
        let c = Rgb(COLORS[k % COLORS.len()]);
        for r in m.rows() {
            let y = r.get(1).copied().unwrap_or(0.0);
            let px = MARGIN + (r[0] - lo.0) * scale;
            let py = SIZE as f64 - MARGIN - (y - lo.1) * scale;
            dot(&mut img, px.round() as i64, py.round() as i64, c);
        }
    }
    img.save(path)?;
    Ok(())
}

fn dot(img: &mut RgbImage, cx: i64, cy: i64, c: Rgb<u8>) {
    for dy in -2..=2i64 {
        for dx in -2..=2i64 {
            let (x, y) = (cx + dx, cy + dy);
            if dx * dx + dy * dy <= 4 && (0..SIZE as i64).contains(&x) && (0..SIZE as i64).contains(&y) {
                img.put_pixel(x as u32, y as u32, c);
            }
        }
    }
}
