//! Panel design space: Latin hypercube sampling of the nine geometric
//! parameters and rasterisation of a parameter set into a height-map.
//!
//! The panel is an analytic stand-in for a CAD part, defined on a nominal
//! 608 mm × 768 mm blank:
//!
//! * a hat-shaped channel running along the part length; cross-section walls
//!   rise at `draft_angle_deg` to a fixed depth,
//! * cross-section corner fillets `r1` (left foot), `r2` (left top), `r3`
//!   (right top) and a right foot fillet that varies linearly from
//!   `r5_start_mm` to `r5_end_mm` along the length,
//! * channel ends closed by walls of the same inclination with fillets `r4`,
//! * two Gaussian draw beads on the flanges at `bead_d1_mm` (left) and
//!   `bead_d2_mm` (right) from the wall feet.
//!
//! The blank outline is a superellipse. A raster of `H × W` cells at pitch `p`
//! covers `H·p × W·p` mm; when that differs from the nominal blank the part is
//! scaled isotropically (lengths and heights alike) so slopes do not depend on
//! resolution.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{read_json, write_json, Grid, Mask};

pub const NOMINAL_WIDTH_MM: f64 = 608.0;
pub const NOMINAL_LENGTH_MM: f64 = 768.0;
/// Default divisibility requirement for raster sides (patch 2 × 2⁴ merges).
pub const DEFAULT_ALIGNMENT: usize = 32;
pub const PARAM_COUNT: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub name: &'static str,
    pub unit: &'static str,
    pub min: f64,
    pub max: f64,
}

/// Sampling ranges of the nine design parameters.
pub const DESIGN_RANGES: [ParamRange; PARAM_COUNT] = [
    ParamRange { name: "r1_mm", unit: "mm", min: 5.0, max: 10.0 },
    ParamRange { name: "r2_mm", unit: "mm", min: 5.0, max: 10.0 },
    ParamRange { name: "r3_mm", unit: "mm", min: 5.0, max: 10.0 },
    ParamRange { name: "r4_mm", unit: "mm", min: 30.0, max: 60.0 },
    ParamRange { name: "r5_start_mm", unit: "mm", min: 5.0, max: 15.0 },
    ParamRange { name: "r5_end_mm", unit: "mm", min: 10.0, max: 25.0 },
    ParamRange { name: "bead_d1_mm", unit: "mm", min: 30.0, max: 60.0 },
    ParamRange { name: "bead_d2_mm", unit: "mm", min: 100.0, max: 130.0 },
    ParamRange { name: "draft_angle_deg", unit: "deg", min: 35.0, max: 60.0 },
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryParams {
    pub geometry_id: u32,
    pub r1_mm: f64,
    pub r2_mm: f64,
    pub r3_mm: f64,
    pub r4_mm: f64,
    pub r5_start_mm: f64,
    pub r5_end_mm: f64,
    pub bead_d1_mm: f64,
    pub bead_d2_mm: f64,
    pub draft_angle_deg: f64,
}

impl GeometryParams {
    pub fn from_values(geometry_id: u32, v: [f64; PARAM_COUNT]) -> Self {
        Self {
            geometry_id,
            r1_mm: v[0],
            r2_mm: v[1],
            r3_mm: v[2],
            r4_mm: v[3],
            r5_start_mm: v[4],
            r5_end_mm: v[5],
            bead_d1_mm: v[6],
            bead_d2_mm: v[7],
            draft_angle_deg: v[8],
        }
    }

    pub fn values(&self) -> [f64; PARAM_COUNT] {
        [
            self.r1_mm,
            self.r2_mm,
            self.r3_mm,
            self.r4_mm,
            self.r5_start_mm,
            self.r5_end_mm,
            self.bead_d1_mm,
            self.bead_d2_mm,
            self.draft_angle_deg,
        ]
    }

    /// Centre of every sampling range.
    pub fn midpoint(geometry_id: u32) -> Self {
        let mut v = [0.0; PARAM_COUNT];
        for (x, r) in v.iter_mut().zip(DESIGN_RANGES.iter()) {
            *x = 0.5 * (r.min + r.max);
        }
        Self::from_values(geometry_id, v)
    }

    /// Messages for parameters outside the sampling ranges. Out-of-range
    /// values are still rasterised.
    pub fn range_warnings(&self) -> Vec<String> {
        self.values()
            .iter()
            .zip(DESIGN_RANGES.iter())
            .filter(|(v, r)| **v < r.min || **v > r.max)
            .map(|(v, r)| format!("{} = {v} is outside [{}, {}] {}", r.name, r.min, r.max, r.unit))
            .collect()
    }

    /// Hard validity: finite values, non-negative radii and offsets, and a
    /// draft angle strictly between 0° and 90°.
    pub fn validate(&self) -> Result<()> {
        let values = self.values();
        for (v, r) in values.iter().zip(DESIGN_RANGES.iter()) {
            if !v.is_finite() {
                return Err(Error::config(format!("{} must be finite", r.name)));
            }
        }
        for (v, r) in values[..8].iter().zip(DESIGN_RANGES.iter()) {
            if *v < 0.0 {
                return Err(Error::config(format!("{} must be non-negative, got {v}", r.name)));
            }
        }
        if !(self.draft_angle_deg > 0.0 && self.draft_angle_deg < 90.0) {
            return Err(Error::config(format!(
                "draft_angle_deg must lie in (0, 90), got {}",
                self.draft_angle_deg
            )));
        }
        Ok(())
    }
}

/// One-sample-per-stratum Latin hypercube design over `ranges`.
pub fn lhs_sample(n: usize, ranges: &[(f64, f64); PARAM_COUNT], rng_seed: u64) -> Result<Vec<GeometryParams>> {
    if n == 0 {
        return Err(Error::config("LHS needs at least one sample"));
    }
    for (i, (lo, hi)) in ranges.iter().enumerate() {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::config(format!(
                "range for {} is empty: [{lo}, {hi}]",
                DESIGN_RANGES[i].name
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut columns = [const { Vec::new() }; PARAM_COUNT];
    for (col, &(lo, hi)) in columns.iter_mut().zip(ranges.iter()) {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(&mut rng);
        *col = strata
            .into_iter()
            .map(|k| {
                let u: f64 = rng.random();
                lo + (hi - lo) * ((k as f64 + u) / n as f64)
            })
            .collect();
    }
    Ok((0..n)
        .map(|i| {
            let mut v = [0.0; PARAM_COUNT];
            for (x, col) in v.iter_mut().zip(columns.iter()) {
                *x = col[i];
            }
            GeometryParams::from_values(i as u32, v)
        })
        .collect())
}

pub fn design_bounds() -> [(f64, f64); PARAM_COUNT] {
    let mut out = [(0.0, 0.0); PARAM_COUNT];
    for (o, r) in out.iter_mut().zip(DESIGN_RANGES.iter()) {
        *o = (r.min, r.max);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterSpec {
    pub height: usize,
    pub width: usize,
    pub pitch_mm: f64,
    #[serde(default = "default_alignment")]
    pub alignment: usize,
}

fn default_alignment() -> usize {
    DEFAULT_ALIGNMENT
}

impl RasterSpec {
    pub fn new(height: usize, width: usize, pitch_mm: f64) -> Self {
        Self {
            height,
            width,
            pitch_mm,
            alignment: DEFAULT_ALIGNMENT,
        }
    }

    pub fn with_alignment(mut self, alignment: usize) -> Self {
        self.alignment = alignment;
        self
    }

    /// 64 × 64 cells at 1 mm.
    pub fn desk() -> Self {
        Self::new(64, 64, 1.0)
    }

    /// 608 × 768 cells at 1 mm, the nominal blank at full resolution.
    pub fn full() -> Self {
        Self::new(608, 768, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("raster dimensions must be positive"));
        }
        if !(self.pitch_mm > 0.0) || !self.pitch_mm.is_finite() {
            return Err(Error::config(format!("pixel pitch must be positive, got {}", self.pitch_mm)));
        }
        if self.alignment == 0 || self.height % self.alignment != 0 || self.width % self.alignment != 0 {
            return Err(Error::config(format!(
                "raster {}x{} is not divisible by {}",
                self.height, self.width, self.alignment
            )));
        }
        Ok(())
    }

    /// Parses `HxW`, e.g. `64x64`.
    pub fn parse_resolution(s: &str) -> Result<(usize, usize)> {
        let (h, w) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::config(format!("resolution '{s}' is not of the form HxW")))?;
        let parse = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("resolution '{s}' is not of the form HxW")))
        };
        Ok((parse(h)?, parse(w)?))
    }
}

/// Fixed shape constants of the analytic panel, in nominal millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PanelShape {
    pub channel_depth_mm: f64,
    pub top_half_width_mm: f64,
    pub top_half_length_mm: f64,
    /// Bead height as a fraction of channel depth.
    pub bead_height_ratio: f64,
    pub bead_sigma_mm: f64,
    /// Superellipse exponent and relative size of the blank outline.
    pub outline_exponent: f64,
    pub outline_scale: f64,
}

impl Default for PanelShape {
    fn default() -> Self {
        Self {
            channel_depth_mm: 60.0,
            top_half_width_mm: 60.0,
            top_half_length_mm: 200.0,
            bead_height_ratio: 0.1,
            bead_sigma_mm: 6.0,
            outline_exponent: 4.0,
            outline_scale: 0.94,
        }
    }
}

impl PanelShape {
    /// Same outline, no channel and no beads.
    pub fn flat() -> Self {
        Self {
            channel_depth_mm: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeightMap {
    pub heights: Grid,
    pub valid_mask: Mask,
    pub pixel_pitch_mm: f64,
    pub geometry_id: u32,
}

impl HeightMap {
    pub fn height(&self) -> usize {
        self.heights.height()
    }

    pub fn width(&self) -> usize {
        self.heights.width()
    }

    pub fn validate(&self, alignment: usize) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        if self.heights.channels() != 1 || self.valid_mask.height() != h || self.valid_mask.width() != w {
            return Err(Error::shape("height-map and mask shapes disagree"));
        }
        if alignment == 0 || h % alignment != 0 || w % alignment != 0 {
            return Err(Error::shape(format!("height-map {h}x{w} is not divisible by {alignment}")));
        }
        for (v, &m) in self.heights.as_slice().iter().zip(self.valid_mask.cells()) {
            if !v.is_finite() {
                return Err(Error::data("height-map contains non-finite heights"));
            }
            if !m && *v != 0.0 {
                return Err(Error::data("height-map is non-zero outside its mask"));
            }
        }
        Ok(())
    }

    /// `|∇h|` by central differences (one-sided at the raster edge), in mm/mm.
    pub fn slope(&self) -> Grid {
        let (h, w) = (self.height(), self.width());
        let p = self.pixel_pitch_mm;
        let z = |r: usize, c: usize| self.heights.get(r, c, 0);
        let mut out = Grid::zeros(h, w, 1);
        for r in 0..h {
            for c in 0..w {
                let gx = derivative(c, w, p, |cc| z(r, cc));
                let gy = derivative(r, h, p, |rr| z(rr, c));
                out.set(r, c, 0, (gx * gx + gy * gy).sqrt());
            }
        }
        out
    }

    /// Five-point Laplacian with replicated edges, in 1/mm.
    pub fn laplacian(&self) -> Grid {
        let (h, w) = (self.height(), self.width());
        let p2 = self.pixel_pitch_mm * self.pixel_pitch_mm;
        let z = |r: usize, c: usize| self.heights.get(r, c, 0);
        let mut out = Grid::zeros(h, w, 1);
        for r in 0..h {
            for c in 0..w {
                let up = z(r.saturating_sub(1), c);
                let down = z((r + 1).min(h - 1), c);
                let left = z(r, c.saturating_sub(1));
                let right = z(r, (c + 1).min(w - 1));
                out.set(r, c, 0, (up + down + left + right - 4.0 * z(r, c)) / p2);
            }
        }
        out
    }

    /// Writes `<stem>.f32`, `<stem>.mask` and the `<stem>.json` sidecar.
    pub fn write(&self, dir: &Path, stem: &str, params: &GeometryParams) -> Result<()> {
        self.heights.write_f32(&dir.join(format!("{stem}.f32")))?;
        self.valid_mask.write_packed(&dir.join(format!("{stem}.mask")))?;
        let sidecar = HeightMapSidecar {
            geometry_id: self.geometry_id,
            height: self.height(),
            width: self.width(),
            pitch_mm: self.pixel_pitch_mm,
            params: *params,
        };
        write_json(&dir.join(format!("{stem}.json")), &sidecar)
    }

    pub fn read(dir: &Path, stem: &str) -> Result<(Self, GeometryParams)> {
        let sidecar: HeightMapSidecar = read_json(&dir.join(format!("{stem}.json")))?;
        let heights = Grid::read_f32(&dir.join(format!("{stem}.f32")), sidecar.height, sidecar.width, 1)?;
        let valid_mask = Mask::read_packed(&dir.join(format!("{stem}.mask")), sidecar.height, sidecar.width)?;
        Ok((
            Self {
                heights,
                valid_mask,
                pixel_pitch_mm: sidecar.pitch_mm,
                geometry_id: sidecar.geometry_id,
            },
            sidecar.params,
        ))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeightMapSidecar {
    pub geometry_id: u32,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "pitch")]
    pub pitch_mm: f64,
    pub params: GeometryParams,
}

fn derivative(i: usize, n: usize, pitch: f64, f: impl Fn(usize) -> f64) -> f64 {
    if n == 1 {
        0.0
    } else if i == 0 {
        (f(1) - f(0)) / pitch
    } else if i == n - 1 {
        (f(n - 1) - f(n - 2)) / pitch
    } else {
        (f(i + 1) - f(i - 1)) / (2.0 * pitch)
    }
}

pub fn rasterize_panel(params: &GeometryParams, spec: &RasterSpec) -> Result<HeightMap> {
    rasterize_panel_with(params, spec, &PanelShape::default())
}

pub fn rasterize_panel_with(params: &GeometryParams, spec: &RasterSpec, shape: &PanelShape) -> Result<HeightMap> {
    spec.validate()?;
    params.validate()?;
    for w in params.range_warnings() {
        log::warn!("geometry {}: {w}", params.geometry_id);
    }
    let (h, w, pitch) = (spec.height, spec.width, spec.pitch_mm);
    // physical mm per nominal mm
    let scale = (h as f64 * pitch / NOMINAL_WIDTH_MM).min(w as f64 * pitch / NOMINAL_LENGTH_MM);
    // grid is centred on the nominal blank
    let x0 = 0.5 * (NOMINAL_LENGTH_MM - w as f64 * pitch / scale);
    let y0 = 0.5 * (NOMINAL_WIDTH_MM - h as f64 * pitch / scale);
    let nominal = |row: usize, col: usize| {
        (
            x0 + (col as f64 + 0.5) * pitch / scale,
            y0 + (row as f64 + 0.5) * pitch / scale,
        )
    };

    let mut cells = vec![false; h * w];
    let (xc, yc) = (0.5 * NOMINAL_LENGTH_MM, 0.5 * NOMINAL_WIDTH_MM);
    let e = shape.outline_exponent;
    let limit = shape.outline_scale.powf(e);
    for row in 0..h {
        for col in 0..w {
            let (x, y) = nominal(row, col);
            let u = ((x - xc) / xc).abs().powf(e) + ((y - yc) / yc).abs().powf(e);
            cells[row * w + col] = u <= limit;
        }
    }
    let mask = Mask::new(h, w, cells)?;
    let mut heights = Grid::zeros(h, w, 1);

    let depth = shape.channel_depth_mm;
    if depth > 0.0 {
        let slope = params.draft_angle_deg.to_radians().tan();
        let run = depth / slope;
        let a = shape.top_half_width_mm;
        let b = shape.top_half_length_mm;
        let left_foot = yc - a - run;
        let right_foot = yc + a + run;
        let long_profile = FilletedProfile::new(
            &[
                (0.0, 0.0),
                (xc - b - run, 0.0),
                (xc - b, depth),
                (xc + b, depth),
                (xc + b + run, 0.0),
                (NOMINAL_LENGTH_MM, 0.0),
            ],
            &[params.r4_mm; 4],
        );
        let bead_height = shape.bead_height_ratio * depth;
        let bead_y = [left_foot - params.bead_d1_mm, right_foot + params.bead_d2_mm];
        let two_s2 = 2.0 * shape.bead_sigma_mm * shape.bead_sigma_mm;

        for col in 0..w {
            let (x, _) = nominal(0, col);
            let t = (x / NOMINAL_LENGTH_MM).clamp(0.0, 1.0);
            let r5 = params.r5_start_mm + (params.r5_end_mm - params.r5_start_mm) * t;
            let cross = FilletedProfile::new(
                &[
                    (0.0, 0.0),
                    (left_foot, 0.0),
                    (yc - a, depth),
                    (yc + a, depth),
                    (right_foot, 0.0),
                    (NOMINAL_WIDTH_MM, 0.0),
                ],
                &[params.r1_mm, params.r2_mm, params.r3_mm, r5],
            );
            let z_long = long_profile.eval(x);
            for row in 0..h {
                if !mask.get(row, col) {
                    continue;
                }
                let (_, y) = nominal(row, col);
                let channel = cross.eval(y).min(z_long);
                let beads: f64 = bead_y
                    .iter()
                    .map(|&by| bead_height * (-(y - by) * (y - by) / two_s2).exp())
                    .sum();
                heights.set(row, col, 0, (channel + beads) * scale);
            }
        }
    }

    Ok(HeightMap {
        heights,
        valid_mask: mask,
        pixel_pitch_mm: pitch,
        geometry_id: params.geometry_id,
    })
}

#[derive(Debug, Clone, Copy)]
enum Piece {
    Line { s0: f64, z0: f64, s1: f64, z1: f64 },
    Arc { s0: f64, s1: f64, cs: f64, cz: f64, r: f64, upper: bool },
}

impl Piece {
    fn start(&self) -> f64 {
        match *self {
            Piece::Line { s0, .. } | Piece::Arc { s0, .. } => s0,
        }
    }

    fn eval(&self, s: f64) -> f64 {
        match *self {
            Piece::Line { s0, z0, s1, z1 } => {
                if s1 > s0 {
                    z0 + (z1 - z0) * (s - s0) / (s1 - s0)
                } else {
                    z0
                }
            }
            Piece::Arc { cs, cz, r, upper, .. } => {
                let d = (r * r - (s - cs) * (s - cs)).max(0.0).sqrt();
                if upper {
                    cz + d
                } else {
                    cz - d
                }
            }
        }
    }
}

/// Single-valued polyline `z(s)` whose interior corners are replaced by
/// tangent circular arcs.
struct FilletedProfile {
    pieces: Vec<Piece>,
}

impl FilletedProfile {
    fn new(vertices: &[(f64, f64)], radii: &[f64]) -> Self {
        debug_assert_eq!(radii.len() + 2, vertices.len());
        let n = vertices.len();
        let seg_len = |i: usize| {
            let (a, b) = (vertices[i], vertices[i + 1]);
            ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt()
        };
        // (tangent-in, tangent-out, arc) per interior corner
        let mut corners = Vec::with_capacity(n - 2);
        for k in 1..n - 1 {
            let (p0, p1, p2) = (vertices[k - 1], vertices[k], vertices[k + 1]);
            let (l_in, l_out) = (seg_len(k - 1), seg_len(k));
            let d1 = ((p1.0 - p0.0) / l_in, (p1.1 - p0.1) / l_in);
            let d2 = ((p2.0 - p1.0) / l_out, (p2.1 - p1.1) / l_out);
            let cross = d1.0 * d2.1 - d1.1 * d2.0;
            let turn = (d1.0 * d2.0 + d1.1 * d2.1).clamp(-1.0, 1.0).acos();
            let mut r = radii[k - 1];
            if r <= 0.0 || turn < 1e-12 {
                corners.push(None);
                continue;
            }
            let half = (0.5 * turn).tan();
            let t_max = 0.5 * l_in.min(l_out);
            let mut t = r * half;
            if t > t_max {
                t = t_max;
                r = t / half;
            }
            let a = (p1.0 - t * d1.0, p1.1 - t * d1.1);
            let b = (p1.0 + t * d2.0, p1.1 + t * d2.1);
            // left turn: centre above the curve
            let normal = if cross > 0.0 { (-d1.1, d1.0) } else { (d1.1, -d1.0) };
            let centre = (a.0 + r * normal.0, a.1 + r * normal.1);
            corners.push(Some((
                a,
                b,
                Piece::Arc {
                    s0: a.0,
                    s1: b.0,
                    cs: centre.0,
                    cz: centre.1,
                    r,
                    upper: cross <= 0.0,
                },
            )));
        }
        let mut pieces = Vec::new();
        let mut cursor = vertices[0];
        for k in 1..n {
            let end = if k < n - 1 {
                match corners[k - 1] {
                    Some((a, _, _)) => a,
                    None => vertices[k],
                }
            } else {
                vertices[k]
            };
            if end.0 > cursor.0 {
                pieces.push(Piece::Line { s0: cursor.0, z0: cursor.1, s1: end.0, z1: end.1 });
            }
            cursor = end;
            if k < n - 1 {
                if let Some((_, b, arc)) = corners[k - 1] {
                    pieces.push(arc);
                    cursor = b;
                }
            }
        }
        Self { pieces }
    }

    fn eval(&self, s: f64) -> f64 {
        let first = &self.pieces[0];
        if s <= first.start() {
            return first.eval(first.start());
        }
        let idx = self.pieces.partition_point(|p| p.start() <= s) - 1;
        let piece = &self.pieces[idx];
        match *piece {
            Piece::Line { s1, .. } | Piece::Arc { s1, .. } if s > s1 => piece.eval(s1),
            _ => piece.eval(s),
        }
    }
}

/// Index file written next to the per-geometry height-maps.
pub const GEOMETRY_INDEX: &str = "geometries.json";

pub fn geometry_stem(geometry_id: u32) -> String {
    format!("geom_{geometry_id:04}")
}

pub fn write_geometry_set(dir: &Path, params: &[GeometryParams], spec: &RasterSpec) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let written: Result<Vec<()>> = {
        use rayon::prelude::*;
        params
            .par_iter()
            .map(|p| rasterize_panel(p, spec)?.write(dir, &geometry_stem(p.geometry_id), p))
            .collect()
    };
    written?;
    write_json(&dir.join(GEOMETRY_INDEX), &params)
}

pub fn read_geometry_index(dir: &Path) -> Result<Vec<GeometryParams>> {
    read_json(&dir.join(GEOMETRY_INDEX))
}
