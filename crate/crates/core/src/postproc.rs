//! Visualization-only post-processing of predicted displacement fields:
//! fringe de-noising and surface reconstruction.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::figures::{colormap, BACKGROUND};
use crate::grid::{Grid, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiseConfig {
    pub erosion_radius: usize,
    pub sigma_px: f64,
    pub band_px: usize,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            erosion_radius: 2,
            sigma_px: 1.0,
            band_px: 3,
        }
    }
}

impl DenoiseConfig {
    pub fn kernel(&self) -> Vec<f64> {
        let r = (3.0 * self.sigma_px).ceil() as isize;
        (-r..=r)
            .map(|d| (-(d * d) as f64 / (2.0 * self.sigma_px * self.sigma_px)).exp())
            .collect()
    }
}

/// Cells within `band_px` (Chebyshev) of the eroded mask's edge.
pub fn fringe_band(eroded: &Mask, band_px: usize) -> Mask {
    let core = eroded.erode(band_px);
    let cells = eroded
        .cells()
        .iter()
        .zip(core.cells())
        .map(|(&e, &c)| e && !c)
        .collect();
    Mask::new(eroded.height(), eroded.width(), cells).expect("same shape")
}

/// Erodes the mask, zeroes everything outside it, and replaces cells in the
/// fringe band with a Gaussian average over eroded-valid neighbours. Cells
/// deeper than the band keep their exact input value.
pub fn denoise_displacement(pd: &Grid, mask: &Mask, cfg: &DenoiseConfig) -> Result<(Grid, Mask)> {
    if pd.height() != mask.height() || pd.width() != mask.width() {
        return Err(Error::shape("displacement grid does not match mask"));
    }
    if !(cfg.sigma_px > 0.0) {
        return Err(Error::config("denoise sigma must be positive"));
    }
    let eroded = mask.erode(cfg.erosion_radius);
    if eroded.count() == 0 {
        return Err(Error::data(format!(
            "mask vanishes under erosion by {} px",
            cfg.erosion_radius
        )));
    }
    let mut base = pd.clone();
    base.apply_mask(&eroded);
    let band = fringe_band(&eroded, cfg.band_px);
    let (h, w, c) = (pd.height(), pd.width(), pd.channels());
    let kernel = cfg.kernel();
    let r = (kernel.len() / 2) as isize;

    // normalized convolution: G*(f·m) / G*m, each separable
    let weight = Grid::from_vec(h, w, 1, eroded.cells().iter().map(|&v| if v { 1.0 } else { 0.0 }).collect())?;
    let blur = |src: &Grid| -> Grid {
        let ch = src.channels();
        let mut tmp = Grid::zeros(h, w, ch);
        for row in 0..h {
            for col in 0..w {
                for k in 0..ch {
                    let mut acc = 0.0;
                    for (i, kw) in kernel.iter().enumerate() {
                        let cc = col as isize + i as isize - r;
                        if cc >= 0 && (cc as usize) < w {
                            acc += kw * src.get(row, cc as usize, k);
                        }
                    }
                    tmp.set(row, col, k, acc);
                }
            }
        }
        let mut out = Grid::zeros(h, w, ch);
        for row in 0..h {
            for col in 0..w {
                for k in 0..ch {
                    let mut acc = 0.0;
                    for (i, kw) in kernel.iter().enumerate() {
                        let rr = row as isize + i as isize - r;
                        if rr >= 0 && (rr as usize) < h {
                            acc += kw * tmp.get(rr as usize, col, k);
                        }
                    }
                    out.set(row, col, k, acc);
                }
            }
        }
        out
    };
    let num = blur(&base);
    let den = blur(&weight);
    let mut out = base.clone();
    for row in 0..h {
        for col in 0..w {
            if band.get(row, col) {
                let d = den.get(row, col, 0);
                for k in 0..c {
                    out.set(row, col, k, num.get(row, col, k) / d);
                }
            }
        }
    }
    Ok((out, eroded))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub scalars: Vec<f64>,
    pub triangles: Vec<[u32; 3]>,
    pub scalar_name: String,
}

/// One vertex per valid cell at `(x + dx, y + dy, dz)`; each grid quad is
/// split along its `(r, c)–(r+1, c+1)` diagonal and triangles touching an
/// invalid cell are dropped.
pub fn reconstruct_surface(displacement: &Grid, color: &Grid, mask: &Mask, pitch_mm: f64) -> Result<Mesh> {
    let (h, w) = (mask.height(), mask.width());
    if displacement.channels() != 3 || displacement.height() != h || displacement.width() != w {
        return Err(Error::shape("displacement must be H×W×3 matching the mask"));
    }
    if color.height() != h || color.width() != w || color.channels() != 1 {
        return Err(Error::shape("colour field must be H×W×1 matching the mask"));
    }
    if mask.count() == 0 {
        return Err(Error::data("cannot reconstruct a surface from an empty mask"));
    }
    let mut index = vec![u32::MAX; h * w];
    let mut vertices = Vec::with_capacity(mask.count());
    let mut scalars = Vec::with_capacity(mask.count());
    for row in 0..h {
        for col in 0..w {
            if mask.get(row, col) {
                index[row * w + col] = vertices.len() as u32;
                let x = (col as f64 + 0.5) * pitch_mm;
                let y = (row as f64 + 0.5) * pitch_mm;
                vertices.push([
                    x + displacement.get(row, col, 0),
                    y + displacement.get(row, col, 1),
                    displacement.get(row, col, 2),
                ]);
                scalars.push(color.get(row, col, 0));
            }
        }
    }
    let mut triangles = Vec::new();
    for row in 0..h.saturating_sub(1) {
        for col in 0..w.saturating_sub(1) {
            let a = index[row * w + col];
            let b = index[row * w + col + 1];
            let c = index[(row + 1) * w + col];
            let d = index[(row + 1) * w + col + 1];
            for tri in [[a, b, d], [a, d, c]] {
                if tri.iter().all(|&v| v != u32::MAX) {
                    triangles.push(tri);
                }
            }
        }
    }
    Ok(Mesh {
        vertices,
        scalars,
        triangles,
        scalar_name: "plastic_strain".into(),
    })
}

/// Shortest round-trip form, in exponent notation outside `[1e-4, 1e15)`.
fn ply_number(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

impl Mesh {
    pub fn to_ply(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "ply");
        let _ = writeln!(s, "format ascii 1.0");
        let _ = writeln!(s, "element vertex {}", self.vertices.len());
        for p in ["x", "y", "z", &self.scalar_name] {
            let _ = writeln!(s, "property double {p}");
        }
        let _ = writeln!(s, "element face {}", self.triangles.len());
        let _ = writeln!(s, "property list uchar int vertex_indices");
        let _ = writeln!(s, "end_header");
        for (v, c) in self.vertices.iter().zip(&self.scalars) {
            let _ = writeln!(s, "{} {} {} {}", ply_number(v[0]), ply_number(v[1]), ply_number(v[2]), ply_number(*c));
        }
        for t in &self.triangles {
            let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
        }
        s
    }

    pub fn write_ply(&self, path: &Path) -> Result<()> {
        crate::grid::write_atomic(path, self.to_ply().as_bytes())
    }

    /// Top-down orthographic render coloured by the vertex scalar; the
    /// highest surface wins where triangles overlap.
    pub fn render_top_view(&self, pixels_per_mm: f64) -> RgbImage {
        let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            x0 = x0.min(v[0]);
            y0 = y0.min(v[1]);
            x1 = x1.max(v[0]);
            y1 = y1.max(v[1]);
        }
        if self.vertices.is_empty() {
            return RgbImage::from_pixel(1, 1, Rgb(BACKGROUND));
        }
        let wpx = (((x1 - x0) * pixels_per_mm).ceil() as u32 + 1).max(1);
        let hpx = (((y1 - y0) * pixels_per_mm).ceil() as u32 + 1).max(1);
        let mut img = RgbImage::from_pixel(wpx, hpx, Rgb(BACKGROUND));
        let mut depth = vec![f64::NEG_INFINITY; (wpx * hpx) as usize];
        let (smin, smax) = self
            .scalars
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s)));
        let span = if smax > smin { smax - smin } else { 1.0 };
        let to_px = |v: &[f64; 3]| ((v[0] - x0) * pixels_per_mm, (v[1] - y0) * pixels_per_mm);
        for t in &self.triangles {
            let p: Vec<(f64, f64)> = t.iter().map(|&i| to_px(&self.vertices[i as usize])).collect();
            let z: Vec<f64> = t.iter().map(|&i| self.vertices[i as usize][2]).collect();
            let s: Vec<f64> = t.iter().map(|&i| self.scalars[i as usize]).collect();
            let area = (p[1].0 - p[0].0) * (p[2].1 - p[0].1) - (p[2].0 - p[0].0) * (p[1].1 - p[0].1);
            if area.abs() < 1e-12 {
                continue;
            }
            let bx0 = p.iter().map(|q| q.0).fold(f64::INFINITY, f64::min).floor().max(0.0) as u32;
            let bx1 = (p.iter().map(|q| q.0).fold(f64::NEG_INFINITY, f64::max).ceil() as u32).min(wpx - 1);
            let by0 = p.iter().map(|q| q.1).fold(f64::INFINITY, f64::min).floor().max(0.0) as u32;
            let by1 = (p.iter().map(|q| q.1).fold(f64::NEG_INFINITY, f64::max).ceil() as u32).min(hpx - 1);
            for py in by0..=by1 {
                for px in bx0..=bx1 {
                    let (qx, qy) = (px as f64, py as f64);
                    let w0 = ((p[1].0 - qx) * (p[2].1 - qy) - (p[2].0 - qx) * (p[1].1 - qy)) / area;
                    let w1 = ((p[2].0 - qx) * (p[0].1 - qy) - (p[0].0 - qx) * (p[2].1 - qy)) / area;
                    let w2 = 1.0 - w0 - w1;
                    if w0 < -1e-9 || w1 < -1e-9 || w2 < -1e-9 {
                        continue;
                    }
                    let zz = w0 * z[0] + w1 * z[1] + w2 * z[2];
                    let k = (py * wpx + px) as usize;
                    if zz > depth[k] {
                        depth[k] = zz;
                        let sv = w0 * s[0] + w1 * s[1] + w2 * s[2];
                        img.put_pixel(px, py, Rgb(colormap((sv - smin) / span)));
                    }
                }
            }
        }
        img
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc_mask(n: usize, radius: f64) -> Mask {
        let c = n as f64 / 2.0;
        let cells = (0..n * n)
            .map(|i| {
                let (r, col) = ((i / n) as f64 + 0.5, (i % n) as f64 + 0.5);
                (r - c).hypot(col - c) <= radius
            })
            .collect();
        Mask::new(n, n, cells).unwrap()
    }

    fn noisy_field(n: usize) -> Grid {
        let data = (0..n * n * 3)
            .map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0)
            .collect();
        Grid::from_vec(n, n, 3, data).unwrap()
    }

    #[test]
    fn interior_is_bit_exact() {
        let mask = disc_mask(40, 17.0);
        let pd = noisy_field(40);
        let cfg = DenoiseConfig::default();
        let (out, eroded) = denoise_displacement(&pd, &mask, &cfg).unwrap();
        let core = eroded.erode(cfg.band_px);
        assert!(core.count() > 0);
        for row in 0..40 {
            for col in 0..40 {
                for k in 0..3 {
                    if core.get(row, col) {
                        assert_eq!(out.get(row, col, k).to_bits(), pd.get(row, col, k).to_bits());
                    }
                    if !eroded.get(row, col) {
                        assert_eq!(out.get(row, col, k), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn band_matches_direct_convolution() {
        let mask = disc_mask(32, 13.0);
        let pd = noisy_field(32);
        let cfg = DenoiseConfig::default();
        let (out, eroded) = denoise_displacement(&pd, &mask, &cfg).unwrap();
        let band = fringe_band(&eroded, cfg.band_px);
        let r = (3.0 * cfg.sigma_px).ceil() as isize;
        for row in 0..32 {
            for col in 0..32 {
                if !band.get(row, col) {
                    continue;
                }
                for k in 0..3 {
                    let (mut num, mut den) = (0.0, 0.0);
                    for dr in -r..=r {
                        for dc in -r..=r {
                            let (rr, cc) = (row as isize + dr, col as isize + dc);
                            if rr < 0 || cc < 0 || rr >= 32 || cc >= 32 || !eroded.get(rr as usize, cc as usize) {
                                continue;
                            }
                            let wgt = (-((dr * dr + dc * dc) as f64) / (2.0 * cfg.sigma_px.powi(2))).exp();
                            num += wgt * pd.get(rr as usize, cc as usize, k);
                            den += wgt;
                        }
                    }
                    assert!((out.get(row, col, k) - num / den).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn deep_blob_passes_through() {
        let mask = disc_mask(48, 22.0);
        let mut pd = Grid::zeros(48, 48, 3);
        for row in 21..27 {
            for col in 21..27 {
                pd.set(row, col, 2, -3.0);
            }
        }
        let (out, _) = denoise_displacement(&pd, &mask, &DenoiseConfig::default()).unwrap();
        assert_eq!(out, pd);
    }

    #[test]
    fn tiny_mask_fails() {
        let mask = disc_mask(10, 1.5);
        assert!(denoise_displacement(&Grid::zeros(10, 10, 3), &mask, &DenoiseConfig::default()).is_err());
    }

    #[test]
    fn flat_and_translated_meshes() {
        let mask = disc_mask(12, 5.0);
        let color = Grid::zeros(12, 12, 1);
        let flat = reconstruct_surface(&Grid::zeros(12, 12, 3), &color, &mask, 2.0).unwrap();
        assert_eq!(flat.vertices.len(), mask.count());
        assert!(flat.vertices.iter().all(|v| v[2] == 0.0));
        let mut shift = Grid::zeros(12, 12, 3);
        for px in shift.as_mut_slice().chunks_exact_mut(3) {
            px.copy_from_slice(&[0.5, -1.0, 2.0]);
        }
        let moved = reconstruct_surface(&shift, &color, &mask, 2.0).unwrap();
        assert_eq!(moved.triangles, flat.triangles);
        for (a, b) in moved.vertices.iter().zip(&flat.vertices) {
            assert_eq!(*a, [b[0] + 0.5, b[1] - 1.0, b[2] + 2.0]);
        }
    }

    #[test]
    fn edges_shared_by_at_most_two_triangles() {
        let mask = disc_mask(16, 7.0);
        let mesh = reconstruct_surface(&Grid::zeros(16, 16, 3), &Grid::zeros(16, 16, 1), &mask, 1.0).unwrap();
        let mut edges = std::collections::HashMap::new();
        for t in &mesh.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        assert!(edges.values().all(|&n| n <= 2));
        let ply = mesh.to_ply();
        assert!(ply.starts_with("ply\nformat ascii 1.0\n"));
        assert!(ply.contains(&format!("element vertex {}", mask.count())));
        assert!(reconstruct_surface(&Grid::zeros(16, 16, 3), &Grid::zeros(16, 16, 1), &Mask::empty(16, 16), 1.0).is_err());
    }

    #[test]
    fn render_is_nonblank() {
        let mask = disc_mask(16, 7.0);
        let mut color = Grid::zeros(16, 16, 1);
        for (i, v) in color.as_mut_slice().iter_mut().enumerate() {
            *v = i as f64;
        }
        let mesh = reconstruct_surface(&Grid::zeros(16, 16, 3), &color, &mask, 1.0).unwrap();
        let img = mesh.render_top_view(4.0);
        assert!(img.pixels().any(|p| p.0 != BACKGROUND));
    }
}
