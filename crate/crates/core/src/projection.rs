//! Scattered 3D point data ↔ regular grid.
//!
//! Values are interpolated linearly on a Delaunay triangulation of the
//! `(x, y)` positions. Cells outside the convex hull but within two pitches of
//! a point take the nearest point's value; cells farther than two pitches from
//! every point are masked out and left at zero.

use std::path::Path;

use spade::{DelaunayTriangulation, FloatTriangulation, HasPosition, Point2, Triangulation};

use crate::error::{Error, Result};
use crate::geometry::HeightMap;
use crate::grid::{Grid, Mask};

#[derive(Debug, Clone, PartialEq)]
pub enum FieldValues {
    Scalar(Vec<f64>),
    Vector(Vec<[f64; 3]>),
}

impl FieldValues {
    pub fn len(&self) -> usize {
        match self {
            FieldValues::Scalar(v) => v.len(),
            FieldValues::Vector(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        match self {
            FieldValues::Scalar(_) => 1,
            FieldValues::Vector(_) => 3,
        }
    }

    fn channel(&self, ch: usize) -> Vec<f64> {
        match self {
            FieldValues::Scalar(v) => v.clone(),
            FieldValues::Vector(v) => v.iter().map(|p| p[ch]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointField {
    pub points: Vec<[f64; 3]>,
    pub values: FieldValues,
    pub displacements: Option<Vec<[f64; 3]>>,
}

impl PointField {
    pub fn new(points: Vec<[f64; 3]>, values: FieldValues, displacements: Option<Vec<[f64; 3]>>) -> Result<Self> {
        if values.len() != points.len() {
            return Err(Error::shape(format!(
                "{} points but {} values",
                points.len(),
                values.len()
            )));
        }
        if let Some(d) = &displacements {
            if d.len() != points.len() {
                return Err(Error::shape(format!(
                    "{} points but {} displacements",
                    points.len(),
                    d.len()
                )));
            }
            if d.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::data("non-finite displacement"));
            }
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::data("non-finite point coordinate"));
        }
        Ok(Self {
            points,
            values,
            displacements,
        })
    }

    /// Heights as the value field.
    pub fn from_heights(points: Vec<[f64; 3]>) -> Result<Self> {
        let z = points.iter().map(|p| p[2]).collect();
        Self::new(points, FieldValues::Scalar(z), None)
    }

    /// Valid cells of a height-map as a cloud of cell centres.
    pub fn from_heightmap(hm: &HeightMap) -> Result<Self> {
        let spec = GridSpec::of(hm);
        let mut points = Vec::with_capacity(hm.valid_mask.count());
        for row in 0..hm.height() {
            for col in 0..hm.width() {
                if hm.valid_mask.get(row, col) {
                    let (x, y) = spec.cell_centre(row, col);
                    points.push([x, y, hm.heights.get(row, col, 0)]);
                }
            }
        }
        Self::from_heights(points)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub pitch_mm: f64,
}

impl GridSpec {
    pub fn new(height: usize, width: usize, pitch_mm: f64) -> Self {
        Self {
            height,
            width,
            pitch_mm,
        }
    }

    pub fn of(hm: &HeightMap) -> Self {
        Self::new(hm.height(), hm.width(), hm.pixel_pitch_mm)
    }

    #[inline]
    pub fn cell_centre(&self, row: usize, col: usize) -> (f64, f64) {
        ((col as f64 + 0.5) * self.pitch_mm, (row as f64 + 0.5) * self.pitch_mm)
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || !(self.pitch_mm > 0.0) {
            return Err(Error::config("grid needs positive dimensions and pitch"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    pos: Point2<f64>,
    index: usize,
}

impl HasPosition for Node {
    type Scalar = f64;

    fn position(&self) -> Point2<f64> {
        self.pos
    }
}

fn interpolate_channels(xy: &[(f64, f64)], channels: &[Vec<f64>], spec: &GridSpec) -> Result<(Grid, Mask)> {
    spec.validate()?;
    if xy.is_empty() {
        return Err(Error::data("point cloud is empty"));
    }
    let nodes: Vec<Node> = xy
        .iter()
        .enumerate()
        .map(|(index, &(x, y))| Node {
            pos: Point2::new(x, y),
            index,
        })
        .collect();
    let tri: DelaunayTriangulation<Node> = DelaunayTriangulation::bulk_load_stable(nodes)
        .map_err(|e| Error::Interpolation(format!("triangulation failed: {e:?}")))?;
    if tri.num_vertices() < 3 || tri.all_vertices_on_line() {
        return Err(Error::Interpolation(
            "all points are collinear in (x, y); cannot interpolate".into(),
        ));
    }
    let c = channels.len();
    let reach = 2.0 * spec.pitch_mm;
    let bary = tri.barycentric();
    let mut weights = Vec::with_capacity(3);
    let mut grid = Grid::zeros(spec.height, spec.width, c);
    let mut mask = Mask::empty(spec.height, spec.width);
    for row in 0..spec.height {
        for col in 0..spec.width {
            let (x, y) = spec.cell_centre(row, col);
            let q = Point2::new(x, y);
            let Some(nearest) = tri.nearest_neighbor(q) else {
                continue;
            };
            let p = nearest.position();
            if ((p.x - x).powi(2) + (p.y - y).powi(2)).sqrt() > reach {
                continue;
            }
            mask.set(row, col, true);
            bary.get_weights(q, &mut weights);
            for (ch, values) in channels.iter().enumerate() {
                let v = if weights.is_empty() {
                    values[nearest.data().index]
                } else {
                    weights
                        .iter()
                        .map(|(h, w)| values[tri.vertex(*h).data().index] * w)
                        .sum()
                };
                grid.set(row, col, ch, v);
            }
        }
    }
    Ok((grid, mask))
}

/// Height-map from a cloud of surface points (value = z).
pub fn project_heightmap(cloud: &PointField, spec: &GridSpec) -> Result<HeightMap> {
    let xy: Vec<(f64, f64)> = cloud.points.iter().map(|p| (p[0], p[1])).collect();
    let z: Vec<f64> = cloud.points.iter().map(|p| p[2]).collect();
    let (heights, valid_mask) = interpolate_channels(&xy, &[z], spec)?;
    Ok(HeightMap {
        heights,
        valid_mask,
        pixel_pitch_mm: spec.pitch_mm,
        geometry_id: 0,
    })
}

/// Interpolates the cloud's values (scalar or 3-vector) at each point's
/// position on the undeformed blank, `(x − dx, y − dy)`.
pub fn backmap_to_blank(deformed: &PointField, spec: &GridSpec) -> Result<(Grid, Mask)> {
    let disp = deformed
        .displacements
        .as_ref()
        .ok_or_else(|| Error::data("back-mapping needs per-point displacements"))?;
    let xy: Vec<(f64, f64)> = deformed
        .points
        .iter()
        .zip(disp)
        .map(|(p, d)| (p[0] - d[0], p[1] - d[1]))
        .collect();
    let channels: Vec<Vec<f64>> = (0..deformed.values.channels())
        .map(|ch| deformed.values.channel(ch))
        .collect();
    let (grid, mask) = interpolate_channels(&xy, &channels, spec)?;
    if mask.count() == 0 {
        return Err(Error::data("no relocated point falls within reach of the grid"));
    }
    Ok((grid, mask))
}

/// Reads a point cloud CSV with columns `x,y,z,<values...>[,dx,dy,dz]`; one
/// value column gives a scalar field, three give a vector field.
pub fn read_point_csv(path: &Path) -> Result<PointField> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::csv(path, e))?
        .iter()
        .map(|h| h.trim().to_ascii_lowercase())
        .collect();
    if headers.len() < 4 || headers[..3] != ["x", "y", "z"] {
        return Err(Error::data(format!(
            "{}: header must start with x,y,z followed by value columns",
            path.display()
        )));
    }
    let has_disp = headers.len() >= 7 && headers[headers.len() - 3..] == ["dx", "dy", "dz"];
    let n_values = headers.len() - 3 - if has_disp { 3 } else { 0 };
    if n_values != 1 && n_values != 3 {
        return Err(Error::data(format!(
            "{}: expected 1 or 3 value columns, found {n_values}",
            path.display()
        )));
    }
    let mut points = Vec::new();
    let mut scalars = Vec::new();
    let mut vectors = Vec::new();
    let mut disps = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let row: Vec<f64> = record
            .iter()
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        if row.len() != headers.len() {
            return Err(Error::data(format!("{}: ragged row", path.display())));
        }
        points.push([row[0], row[1], row[2]]);
        if n_values == 1 {
            scalars.push(row[3]);
        } else {
            vectors.push([row[3], row[4], row[5]]);
        }
        if has_disp {
            let k = 3 + n_values;
            disps.push([row[k], row[k + 1], row[k + 2]]);
        }
    }
    let values = if n_values == 1 {
        FieldValues::Scalar(scalars)
    } else {
        FieldValues::Vector(vectors)
    };
    PointField::new(points, values, has_disp.then_some(disps))
}
