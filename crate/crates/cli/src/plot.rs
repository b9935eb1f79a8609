//! Minimal raster charts so every CSV has a quick visual companion. No text is drawn; the
//! CSV next to each image carries the numbers.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{CliError, CliResult};

const WIDTH: u32 = 480;
const HEIGHT: u32 = 300;
const MARGIN: u32 = 24;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const INK: Rgb<u8> = Rgb([31, 119, 180]);

struct Canvas {
    img: RgbImage,
    lo: f64,
    hi: f64,
}

impl Canvas {
    fn new(values: &[f64]) -> Self {
        let finite = values.iter().copied().filter(|v| v.is_finite());
        let lo = finite.clone().fold(f64::INFINITY, f64::min).min(0.0);
        let mut hi = finite.fold(f64::NEG_INFINITY, f64::max);
        if !hi.is_finite() || hi <= lo {
            hi = lo + 1.0;
        }
        let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BACKGROUND);
        for q in 1..4 {
            let y = MARGIN + q * (HEIGHT - 2 * MARGIN) / 4;
            for x in MARGIN..WIDTH - MARGIN {
                img.put_pixel(x, y, GRID);
            }
        }
        for x in MARGIN..=WIDTH - MARGIN {
            img.put_pixel(x, HEIGHT - MARGIN, AXIS);
        }
        for y in MARGIN..=HEIGHT - MARGIN {
            img.put_pixel(MARGIN, y, AXIS);
        }
        Self { img, lo, hi }
    }

    fn y(&self, v: f64) -> i64 {
        let t = ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0);
        (HEIGHT - MARGIN) as i64 - (t * (HEIGHT - 2 * MARGIN) as f64).round() as i64
    }

    fn x(&self, i: usize, n: usize) -> i64 {
        let span = (WIDTH - 2 * MARGIN) as f64;
        let t = if n <= 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
        MARGIN as i64 + (t * span).round() as i64
    }

    fn dot(&mut self, x: i64, y: i64) {
        if (0..WIDTH as i64).contains(&x) && (0..HEIGHT as i64).contains(&y) {
            self.img.put_pixel(x as u32, y as u32, INK);
        }
    }

    /// Bresenham line, two pixels thick.
    fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64)) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.dot(x0, y0);
            self.dot(x0, y0 + 1);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    fn save(self, path: &Path) -> CliResult<()> {
        self.img.save(path).map_err(|e| CliError::Internal(format!("{}: cannot write plot: {e}", path.display())))
    }
}

/// Line chart of a series over its index (e.g. a loss per epoch).
pub fn line_chart(path: &Path, values: &[f64]) -> CliResult<()> {
    let mut c = Canvas::new(values);
    let n = values.len();
    let points: Vec<(i64, i64)> = values.iter().enumerate().map(|(i, &v)| (c.x(i, n), c.y(v))).collect();
    for w in points.windows(2) {
        c.line(w[0], w[1]);
    }
    if let [only] = points[..] {
        c.line((only.0 - 2, only.1), (only.0 + 2, only.1));
    }
    c.save(path)
}

/// Bar chart with one bar per value (e.g. per-image error).
pub fn bar_chart(path: &Path, values: &[f64]) -> CliResult<()> {
    let mut c = Canvas::new(values);
    let n = values.len().max(1);
    let slot = (WIDTH - 2 * MARGIN) as f64 / n as f64;
    let base = c.y(c.lo.max(0.0));
    for (i, &v) in values.iter().enumerate() {
        let left = MARGIN as f64 + i as f64 * slot;
        let (x0, x1) = ((left + 0.15 * slot).round() as i64, (left + 0.85 * slot).round().max(left + 1.0) as i64);
        let top = c.y(v);
        for x in x0..=x1 {
            c.line((x, base), (x, top));
        }
    }
    c.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_written_and_deterministic() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        let (a, b) = (dir.join("a.png"), dir.join("b.png"));
        line_chart(&a, &[3.0, 2.0, 2.5, 1.0]).unwrap();
        line_chart(&b, &[3.0, 2.0, 2.5, 1.0]).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        bar_chart(&dir.join("c.png"), &[0.1, f64::NAN, 0.4]).unwrap();
        line_chart(&dir.join("d.png"), &[1.0]).unwrap();
        line_chart(&dir.join("e.png"), &[]).unwrap();
        let img = image::open(dir.join("c.png")).unwrap();
        assert_eq!((img.width(), img.height()), (WIDTH, HEIGHT));
    }
}
