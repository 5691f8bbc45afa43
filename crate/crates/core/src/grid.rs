//! Dense raster containers shared by every stage of the pipeline.
//!
//! Grids are stored row-major with channels innermost (`H × W × C`). Cell
//! `(row, col)` has its centre at `((col + 0.5)·pitch, (row + 0.5)·pitch)` in
//! millimetres; row maps to `y`, column maps to `x`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "grid {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        let i = self.index(row, col, ch);
        self.data[i] = value;
    }

    /// Copies one channel out as a single-channel grid.
    pub fn channel(&self, ch: usize) -> Grid {
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px[ch])
            .collect();
        Grid {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Zeroes every cell outside `mask`.
    pub fn apply_mask(&mut self, mask: &Mask) {
        for (px, &valid) in self.data.chunks_exact_mut(self.channels).zip(mask.cells()) {
            if !valid {
                px.fill(0.0);
            }
        }
    }

    pub fn write_f32(&self, path: &Path) -> Result<()> {
        write_f32_le(path, &self.data)
    }

    pub fn read_f32(path: &Path, height: usize, width: usize, channels: usize) -> Result<Self> {
        let data = read_f32_le(path, height * width * channels)?;
        Grid::from_vec(height, width, channels, data)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    cells: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != height * width {
            return Err(Error::shape(format!(
                "mask {height}x{width} needs {} cells, got {}",
                height * width,
                cells.len()
            )));
        }
        Ok(Self {
            height,
            width,
            cells,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![true; height * width],
        }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, valid: bool) {
        self.cells[row * self.width + col] = valid;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Number of 4-connected components of valid cells.
    pub fn connected_components(&self) -> usize {
        let mut seen = vec![false; self.cells.len()];
        let mut stack = Vec::new();
        let mut components = 0;
        for start in 0..self.cells.len() {
            if !self.cells[start] || seen[start] {
                continue;
            }
            components += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let (r, c) = (i / self.width, i % self.width);
                let mut visit = |rr: usize, cc: usize| {
                    let j = rr * self.width + cc;
                    if self.cells[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if r > 0 {
                    visit(r - 1, c);
                }
                if r + 1 < self.height {
                    visit(r + 1, c);
                }
                if c > 0 {
                    visit(r, c - 1);
                }
                if c + 1 < self.width {
                    visit(r, c + 1);
                }
            }
        }
        components
    }

    /// Erosion with a `(2r+1)²` square structuring element; cells outside the
    /// grid count as invalid.
    pub fn erode(&self, radius: usize) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let (h, w) = (self.height, self.width);
        let r = radius as isize;
        let mut out = Mask::empty(h, w);
        for row in 0..h {
            for col in 0..w {
                let mut keep = true;
                'window: for dr in -r..=r {
                    for dc in -r..=r {
                        let rr = row as isize + dr;
                        let cc = col as isize + dc;
                        if rr < 0
                            || cc < 0
                            || rr >= h as isize
                            || cc >= w as isize
                            || !self.get(rr as usize, cc as usize)
                        {
                            keep = false;
                            break 'window;
                        }
                    }
                }
                out.set(row, col, keep);
            }
        }
        out
    }

    /// Bit-packed representation, row-major, most significant bit first.
    pub fn pack(&self) -> Vec<u8> {
        let mut bytes = vec![0u8; self.cells.len().div_ceil(8)];
        for (i, &valid) in self.cells.iter().enumerate() {
            if valid {
                bytes[i / 8] |= 0x80 >> (i % 8);
            }
        }
        bytes
    }

    pub fn unpack(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let n = height * width;
        if bytes.len() != n.div_ceil(8) {
            return Err(Error::shape(format!(
                "packed mask {height}x{width} needs {} bytes, got {}",
                n.div_ceil(8),
                bytes.len()
            )));
        }
        let cells = (0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect();
        Ok(Self {
            height,
            width,
            cells,
        })
    }

    pub fn write_packed(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.pack())
    }

    pub fn read_packed(path: &Path, height: usize, width: usize) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Mask::unpack(height, width, &bytes)
    }
}

pub fn f32_le_bytes(values: &[f64]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

pub fn f32_from_le_bytes(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect()
}

pub fn write_f32_le(path: &Path, values: &[f64]) -> Result<()> {
    write_atomic(path, &f32_le_bytes(values))
}

pub fn read_f32_le(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::data(format!(
            "{} holds {} bytes, expected {} float32 values",
            path.display(),
            bytes.len(),
            expected
        )));
    }
    Ok(f32_from_le_bytes(&bytes))
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".to_string(),
    });
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}
