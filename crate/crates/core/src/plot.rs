//! Minimal line charts written as PNG (no text rendering; series colours
//! are listed next to the image in the corresponding log).

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub const PALETTE: [[u8; 3]; 5] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189]];

pub struct Series {
    pub values: Vec<f64>,
    pub color: [u8; 3],
}

pub struct LinePlot {
    pub width: u32,
    pub height: u32,
    pub series: Vec<Series>,
    /// Fixed y range; derived from the data when `None`.
    pub y_range: Option<(f64, f64)>,
}

const MARGIN: u32 = 24;

impl LinePlot {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width: width.max(2 * MARGIN + 8),
            height: height.max(2 * MARGIN + 8),
            series: Vec::new(),
            y_range: None,
        }
    }

    pub fn add(&mut self, values: Vec<f64>) -> &mut Self {
        let color = PALETTE[self.series.len() % PALETTE.len()];
        self.series.push(Series { values, color });
        self
    }

    fn y_bounds(&self) -> (f64, f64) {
        if let Some(r) = self.y_range {
            return r;
        }
        let finite = self.series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite());
        let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            let pad = 0.05 * (hi - lo);
            (lo - pad, hi + pad)
        }
    }

    pub fn render(&self) -> RgbImage {
        let (w, h) = (self.width, self.height);
        let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
        let (x0, x1, y0, y1) = (MARGIN, w - MARGIN, MARGIN, h - MARGIN);
        for i in 0..=4 {
            let y = y0 + (y1 - y0) * i / 4;
            for x in x0..=x1 {
                img.put_pixel(x, y, Rgb([225, 225, 225]));
            }
        }
        for x in x0..=x1 {
            img.put_pixel(x, y1, Rgb([0, 0, 0]));
        }
        for y in y0..=y1 {
            img.put_pixel(x0, y, Rgb([0, 0, 0]));
        }
        let (lo, hi) = self.y_bounds();
        let longest = self.series.iter().map(|s| s.values.len()).max().unwrap_or(0);
        let px = |i: usize| -> f64 {
            if longest <= 1 {
                f64::from(x0 + x1) / 2.0
            } else {
                f64::from(x0) + f64::from(x1 - x0) * i as f64 / (longest - 1) as f64
            }
        };
        let py = |v: f64| f64::from(y1) - f64::from(y1 - y0) * ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
        for s in &self.series {
            let pts: Vec<(f64, f64)> = s
                .values
                .iter()
                .enumerate()
                .filter(|(_, v)| v.is_finite())
                .map(|(i, &v)| (px(i), py(v)))
                .collect();
            for p in &pts {
                dot(&mut img, *p, s.color);
            }
            for seg in pts.windows(2) {
                line(&mut img, seg[0], seg[1], s.color);
            }
        }
        img
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.render().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn dot(img: &mut RgbImage, (x, y): (f64, f64), c: [u8; 3]) {
    for dy in -1..=1 {
        for dx in -1..=1 {
            let (xi, yi) = (x.round() as i64 + dx, y.round() as i64 + dy);
            if xi >= 0 && yi >= 0 && (xi as u32) < img.width() && (yi as u32) < img.height() {
                img.put_pixel(xi as u32, yi as u32, Rgb(c));
            }
        }
    }
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: [u8; 3]) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x.round() as u32, y.round() as u32, Rgb(c));
        }
    }
}
