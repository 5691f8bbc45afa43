//! PNG figures: heatmaps, histograms with summary markers, overlap maps and
//! FLD scatter plots. Drawing is plain raster work; there is no text.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::metrics::{Overlap, Summary};

/// Viridis control points, sampled at equal spacing on `[0, 1]`.
const COLORMAP: [[u8; 3]; 9] = [
    [68, 1, 84],
    [71, 44, 122],
    [59, 81, 139],
    [44, 113, 142],
    [33, 144, 141],
    [39, 173, 129],
    [92, 200, 99],
    [170, 220, 50],
    [253, 231, 37],
];

pub const BACKGROUND: [u8; 3] = [255, 255, 255];
pub const MASKED_OUT: [u8; 3] = [200, 200, 200];
pub const MEAN_COLOR: [u8; 3] = [214, 39, 40];
pub const MEDIAN_COLOR: [u8; 3] = [31, 119, 180];
pub const P90_COLOR: [u8; 3] = [255, 127, 14];
pub const P95_COLOR: [u8; 3] = [44, 160, 44];
pub const OVERLAP_COLOR: [u8; 3] = [148, 103, 189];
pub const GT_ONLY_COLOR: [u8; 3] = [214, 39, 40];
pub const PD_ONLY_COLOR: [u8; 3] = [31, 119, 180];

/// Maps `t ∈ [0, 1]` (clamped) onto the fixed colormap.
pub fn colormap(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let pos = t * (COLORMAP.len() - 1) as f64;
    let i = (pos.floor() as usize).min(COLORMAP.len() - 2);
    let f = pos - i as f64;
    let (a, b) = (COLORMAP[i], COLORMAP[i + 1]);
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (a[c] as f64 + (b[c] as f64 - a[c] as f64) * f).round() as u8;
    }
    out
}

/// Colour range used by [`heatmap`]: min and max over valid cells.
pub fn value_range(field: &Grid, mask: &Mask) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (&v, &m) in field.as_slice().iter().zip(mask.cells()) {
        if m {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if lo > hi {
        (0.0, 0.0)
    } else {
        (lo, hi)
    }
}

/// One pixel per cell, row 0 at the top; invalid cells grey.
pub fn heatmap(field: &Grid, mask: &Mask, range: Option<(f64, f64)>) -> RgbImage {
    let (lo, hi) = range.unwrap_or_else(|| value_range(field, mask));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = RgbImage::new(field.width() as u32, field.height() as u32);
    for row in 0..field.height() {
        for col in 0..field.width() {
            let c = if mask.get(row, col) {
                colormap((field.get(row, col, 0) - lo) / span)
            } else {
                MASKED_OUT
            };
            img.put_pixel(col as u32, row as u32, Rgb(c));
        }
    }
    img
}

pub fn overlap_map(overlap: &Overlap, mask: &Mask) -> RgbImage {
    let (h, w) = (mask.height(), mask.width());
    let mut img = RgbImage::new(w as u32, h as u32);
    for row in 0..h {
        for col in 0..w {
            let c = if mask.get(row, col) { BACKGROUND } else { MASKED_OUT };
            img.put_pixel(col as u32, row as u32, Rgb(c));
        }
    }
    for (cells, color) in [
        (&overlap.overlap, OVERLAP_COLOR),
        (&overlap.gt_only, GT_ONLY_COLOR),
        (&overlap.pd_only, PD_ONLY_COLOR),
    ] {
        for &i in cells {
            img.put_pixel((i % w) as u32, (i / w) as u32, Rgb(color));
        }
    }
    img
}

const PLOT_W: u32 = 480;
const PLOT_H: u32 = 320;
const MARGIN: u32 = 20;

fn fill_rect(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, c: [u8; 3]) {
    for y in y0.min(img.height())..y1.min(img.height()) {
        for x in x0.min(img.width())..x1.min(img.width()) {
            img.put_pixel(x, y, Rgb(c));
        }
    }
}

fn axes(img: &mut RgbImage) {
    let black = [0, 0, 0];
    fill_rect(img, MARGIN, PLOT_H - MARGIN, PLOT_W - MARGIN, PLOT_H - MARGIN + 1, black);
    fill_rect(img, MARGIN, MARGIN, MARGIN + 1, PLOT_H - MARGIN, black);
}

/// Histogram of `values` with vertical marker lines at the summary
/// statistics (mean red, median blue, p90 orange, p95 green).
pub fn histogram(values: &[f64], bins: usize, summary: Option<&Summary>) -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb(BACKGROUND));
    axes(&mut img);
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() || bins == 0 {
        return img;
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
    let mut hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        hi = lo + 1.0;
    }
    let mut counts = vec![0usize; bins];
    for v in &finite {
        let b = (((v - lo) / (hi - lo)) * bins as f64).floor() as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let peak = *counts.iter().max().unwrap_or(&1) as f64;
    let plot_w = (PLOT_W - 2 * MARGIN - 1) as f64;
    let plot_h = (PLOT_H - 2 * MARGIN - 1) as f64;
    let x_of = |v: f64| MARGIN + 1 + (((v - lo) / (hi - lo)) * plot_w).round() as u32;
    for (b, &c) in counts.iter().enumerate() {
        let x0 = MARGIN + 1 + (b as f64 * plot_w / bins as f64) as u32;
        let x1 = MARGIN + 1 + ((b + 1) as f64 * plot_w / bins as f64) as u32;
        let bar = (c as f64 / peak * plot_h).round() as u32;
        fill_rect(&mut img, x0, PLOT_H - MARGIN - bar, x1.max(x0 + 1) - 1, PLOT_H - MARGIN, [120, 120, 120]);
    }
    if let Some(s) = summary {
        for (v, color) in [
            (s.mean, MEAN_COLOR),
            (s.median, MEDIAN_COLOR),
            (s.p90, P90_COLOR),
            (s.p95, P95_COLOR),
        ] {
            let x = x_of(v.clamp(lo, hi)).min(PLOT_W - MARGIN - 1);
            fill_rect(&mut img, x, MARGIN, x + 2, PLOT_H - MARGIN, color);
        }
    }
    img
}

/// Scatter of `(minor, major)` pairs with the axes through the origin
/// (dotted) when the origin is within range.
pub fn fld_scatter(points: &[(f64, f64)], reference: Option<&[(f64, f64)]>) -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb(BACKGROUND));
    axes(&mut img);
    let all = points.iter().chain(reference.unwrap_or(&[]).iter());
    let (mut x0, mut x1, mut y0, mut y1) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for &(x, y) in all {
        if x.is_finite() && y.is_finite() {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    let sx = if x1 > x0 { x1 - x0 } else { 1.0 };
    let sy = if y1 > y0 { y1 - y0 } else { 1.0 };
    let plot_w = (PLOT_W - 2 * MARGIN - 3) as f64;
    let plot_h = (PLOT_H - 2 * MARGIN - 3) as f64;
    let to_px = |x: f64, y: f64| {
        let px = MARGIN + 2 + ((x - x0) / sx * plot_w).round() as u32;
        let py = PLOT_H - MARGIN - 2 - ((y - y0) / sy * plot_h).round() as u32;
        (px, py)
    };
    let (ox, oy) = to_px(0.0, 0.0);
    for y in (MARGIN..PLOT_H - MARGIN).step_by(4) {
        img.put_pixel(ox, y, Rgb([160, 160, 160]));
    }
    for x in (MARGIN..PLOT_W - MARGIN).step_by(4) {
        img.put_pixel(x, oy, Rgb([160, 160, 160]));
    }
    let mut plot = |pts: &[(f64, f64)], color: [u8; 3]| {
        for &(x, y) in pts {
            if x.is_finite() && y.is_finite() {
                let (px, py) = to_px(x, y);
                fill_rect(&mut img, px.saturating_sub(1), py.saturating_sub(1), px + 1, py + 1, color);
            }
        }
    };
    if let Some(r) = reference {
        plot(r, GT_ONLY_COLOR);
    }
    plot(points, PD_ONLY_COLOR);
    img
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    crate::grid::write_atomic(path, &encode_png(img)?)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(Error::from)?;
    Ok(buf.into_inner())
}
