//! Minimal PNG chart rendering: line charts and scatter plots on a fixed
//! canvas. No text; series identity is carried by color and documented in
//! the JSON report written alongside each plot.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [127, 127, 127],
];

const W: u32 = 640;
const H: u32 = 480;
const MARGIN: u32 = 40;

fn bounds(series: &[Vec<(f64, f64)>]) -> Result<(f64, f64, f64, f64)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in series {
        for &(x, y) in s {
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::Argument("non-finite plot point".into()));
            }
            xs.push(x);
            ys.push(y);
        }
    }
    if xs.is_empty() {
        return Err(Error::Argument("nothing to plot".into()));
    }
    let (xmin, xmax) = (xs.iter().cloned().fold(f64::MAX, f64::min), xs.iter().cloned().fold(f64::MIN, f64::max));
    let (ymin, ymax) = (ys.iter().cloned().fold(f64::MAX, f64::min), ys.iter().cloned().fold(f64::MIN, f64::max));
    let pad = |lo: f64, hi: f64| {
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, hi + 0.5)
        }
    };
    let (xmin, xmax) = pad(xmin, xmax);
    let (ymin, ymax) = pad(ymin, ymax);
    Ok((xmin, xmax, ymin, ymax))
}

fn to_px(x: f64, y: f64, b: (f64, f64, f64, f64)) -> (i64, i64) {
    let (xmin, xmax, ymin, ymax) = b;
    let px = MARGIN as f64 + (x - xmin) / (xmax - xmin) * (W - 2 * MARGIN) as f64;
    let py = (H - MARGIN) as f64 - (y - ymin) / (ymax - ymin) * (H - 2 * MARGIN) as f64;
    (px.round() as i64, py.round() as i64)
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < W && (y as u32) < H {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), c: Rgb<u8>) {
    let (mut x0, mut y0) = a;
    let (x1, y1) = b;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, c);
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

fn dot(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    for dy in -1..=1 {
        for dx in -1..=1 {
            put(img, x + dx, y + dy, c);
        }
    }
}

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    let m = MARGIN as i64;
    line(&mut img, (m, (H - MARGIN) as i64), ((W - MARGIN) as i64, (H - MARGIN) as i64), axis);
    line(&mut img, (m, m), (m, (H - MARGIN) as i64), axis);
    img
}

/// Renders one polyline per series onto a shared axis and writes a PNG.
pub fn plot_lines(path: &Path, series: &[Vec<(f64, f64)>]) -> Result<()> {
    let b = bounds(series)?;
    let mut img = canvas();
    for (si, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[si % PALETTE.len()]);
        let mut prev: Option<(i64, i64)> = None;
        for &(x, y) in s {
            let p = to_px(x, y, b);
            dot(&mut img, p.0, p.1, color);
            if let Some(q) = prev {
                line(&mut img, q, p, color);
            }
            prev = Some(p);
        }
    }
    img.save(path).map_err(Error::Image)
}

/// Renders one point cloud per group and writes a PNG.
pub fn plot_scatter(path: &Path, groups: &[Vec<(f64, f64)>]) -> Result<()> {
    let b = bounds(groups)?;
    let mut img = canvas();
    for (gi, g) in groups.iter().enumerate() {
        let color = Rgb(PALETTE[gi % PALETTE.len()]);
        for &(x, y) in g {
            let p = to_px(x, y, b);
            dot(&mut img, p.0, p.1, color);
        }
    }
    img.save(path).map_err(Error::Image)
}
