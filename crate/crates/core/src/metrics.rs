//! Field-level evaluation metrics.
//!
//! Loss-style metrics ([`mse`]) run over every grid entry, background
//! included; peak-style metrics use only cells inside the validity mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};

pub const TOP_FRACTION: f64 = 0.001;
pub const OVERLAP_FRACTION: f64 = 0.003;

fn check_mask(field: &Grid, mask: &Mask) -> Result<()> {
    if field.height() != mask.height() || field.width() != mask.width() {
        return Err(Error::shape(format!(
            "field {}x{} does not match mask {}x{}",
            field.height(),
            field.width(),
            mask.height(),
            mask.width()
        )));
    }
    Ok(())
}

fn check_pair(a: &Grid, b: &Grid) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::shape(format!(
            "grids {}x{}x{} and {}x{}x{} differ in shape",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

/// One scalar per valid cell in row-major order: the value itself for
/// single-channel grids, the Euclidean norm across channels otherwise.
pub fn cell_values(field: &Grid, mask: &Mask) -> Result<Vec<f64>> {
    check_mask(field, mask)?;
    let c = field.channels();
    Ok(field
        .as_slice()
        .chunks_exact(c)
        .zip(mask.cells())
        .filter(|(_, &valid)| valid)
        .map(|(px, _)| {
            if c == 1 {
                px[0]
            } else {
                px.iter().map(|v| v * v).sum::<f64>().sqrt()
            }
        })
        .collect())
}

pub fn top_k(n_valid: usize) -> usize {
    ((TOP_FRACTION * n_valid as f64).floor() as usize).max(1)
}

/// Mean of the `max(1, ⌊0.001·N⌋)` largest valid values.
pub fn representative_max(field: &Grid, mask: &Mask) -> Result<f64> {
    let values = cell_values(field, mask)?;
    representative_max_of(&values)
}

pub fn representative_max_of(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::data("representative maximum of an empty mask"));
    }
    let k = top_k(values.len());
    let mut v = values.to_vec();
    if k < v.len() {
        v.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    }
    v.truncate(k);
    // sum in descending order so the result does not depend on selection order
    v.sort_unstable_by(|a, b| b.total_cmp(a));
    Ok(v.iter().sum::<f64>() / k as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeError {
    pub m_gt: f64,
    pub m_pd: f64,
    /// `None` when the ground-truth maximum is zero.
    pub rel_err_pct: Option<f64>,
}

pub fn relative_error_of(m_gt: f64, m_pd: f64) -> Option<f64> {
    if m_gt == 0.0 {
        None
    } else {
        Some(100.0 * (m_gt - m_pd).abs() / m_gt.abs())
    }
}

pub fn relative_error(gt: &Grid, pd: &Grid, mask: &Mask) -> Result<RelativeError> {
    check_pair(gt, pd)?;
    let m_gt = representative_max(gt, mask)?;
    let m_pd = representative_max(pd, mask)?;
    Ok(RelativeError {
        m_gt,
        m_pd,
        rel_err_pct: relative_error_of(m_gt, m_pd),
    })
}

/// Mean squared error over all `H·W·C` entries.
pub fn mse(pd: &Grid, gt: &Grid) -> Result<f64> {
    check_pair(pd, gt)?;
    Ok(mse_slices(pd.as_slice(), gt.as_slice()))
}

pub fn mse_slices(pd: &[f64], gt: &[f64]) -> f64 {
    let sum: f64 = pd.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum();
    sum / pd.len() as f64
}

pub fn displacement_mse(pd: &Grid, gt: &Grid) -> Result<f64> {
    if gt.channels() != 3 {
        return Err(Error::shape(format!("displacement needs 3 channels, got {}", gt.channels())));
    }
    mse(pd, gt)
}

/// Squared error averaged over valid cells and channels only.
pub fn masked_mse(pd: &Grid, gt: &Grid, mask: &Mask) -> Result<f64> {
    check_pair(pd, gt)?;
    check_mask(gt, mask)?;
    let c = gt.channels();
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((a, b), &valid) in pd
        .as_slice()
        .chunks_exact(c)
        .zip(gt.as_slice().chunks_exact(c))
        .zip(mask.cells())
    {
        if valid {
            sum += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            n += c;
        }
    }
    if n == 0 {
        return Err(Error::data("masked MSE over an empty mask"));
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    /// Flat cell indices (`row·W + col`), ascending.
    pub overlap: Vec<usize>,
    pub gt_only: Vec<usize>,
    pub pd_only: Vec<usize>,
    pub iou: f64,
    /// True when ties straddled the cut-off and stable index order broke them.
    pub ties_broken: bool,
}

impl Overlap {
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.overlap.len(), self.gt_only.len(), self.pd_only.len())
    }
}

/// The `k` largest valid cells, ties resolved by ascending index.
fn top_cells(field: &Grid, mask: &Mask, k: usize) -> Result<(Vec<usize>, bool)> {
    let values = cell_values(field, mask)?;
    let idx: Vec<usize> = mask
        .cells()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v)
        .map(|(i, _)| i)
        .collect();
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let tied = k < order.len() && values[order[k - 1]] == values[order[k]];
    let mut cells: Vec<usize> = order[..k].iter().map(|&i| idx[i]).collect();
    cells.sort_unstable();
    Ok((cells, tied))
}

pub fn top_value_overlap(gt: &Grid, pd: &Grid, mask: &Mask, fraction: f64) -> Result<Overlap> {
    check_pair(gt, pd)?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("overlap fraction {fraction} must lie in (0, 1]")));
    }
    let n = mask.count();
    let k = (fraction * n as f64).floor() as usize;
    if k == 0 {
        return Err(Error::data(format!(
            "{n} valid cells are too few for a top-{:.2}% selection",
            fraction * 100.0
        )));
    }
    let (a, tie_a) = top_cells(gt, mask, k)?;
    let (b, tie_b) = top_cells(pd, mask, k)?;
    if tie_a || tie_b {
        log::warn!("tied values at the top-value cut-off; broken by cell order");
    }
    let set_b: std::collections::BTreeSet<usize> = b.iter().copied().collect();
    let set_a: std::collections::BTreeSet<usize> = a.iter().copied().collect();
    let overlap: Vec<usize> = a.iter().copied().filter(|i| set_b.contains(i)).collect();
    let gt_only: Vec<usize> = a.iter().copied().filter(|i| !set_b.contains(i)).collect();
    let pd_only: Vec<usize> = b.iter().copied().filter(|i| !set_a.contains(i)).collect();
    let union = overlap.len() + gt_only.len() + pd_only.len();
    Ok(Overlap {
        iou: overlap.len() as f64 / union as f64,
        overlap,
        gt_only,
        pd_only,
        ties_broken: tie_a || tie_b,
    })
}

/// `(minor, major)` pairs for every valid cell, row-major.
pub fn fld_points(major: &Grid, minor: &Grid, mask: &Mask) -> Result<Vec<(f64, f64)>> {
    check_pair(major, minor)?;
    check_mask(major, mask)?;
    Ok(major
        .as_slice()
        .iter()
        .zip(minor.as_slice())
        .zip(mask.cells())
        .filter(|(_, &v)| v)
        .map(|((&ma, &mi), _)| (mi, ma))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
    pub p95: f64,
}

/// Percentile by linear interpolation between closest ranks.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(Summary {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        median: percentile(&v, 50.0),
        p90: percentile(&v, 90.0),
        p95: percentile(&v, 95.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(v: Vec<f64>, h: usize, w: usize) -> Grid {
        Grid::from_vec(h, w, 1, v).unwrap()
    }

    #[test]
    fn top_tenth_percent() {
        let g = grid((0..10_000).map(|i| i as f64).collect(), 100, 100);
        let m = representative_max(&g, &Mask::full(100, 100)).unwrap();
        assert_eq!(m, (9990..10_000).sum::<i32>() as f64 / 10.0);
        let small = grid((1..=500).map(|i| i as f64).collect(), 20, 25);
        assert_eq!(representative_max(&small, &Mask::full(20, 25)).unwrap(), 500.0);
        assert!(representative_max(&small, &Mask::empty(20, 25)).is_err());
    }

    #[test]
    fn hand_relative_errors() {
        assert!((relative_error_of(0.20, 0.22).unwrap() - 10.0).abs() < 1e-12);
        assert!((relative_error_of(0.30, 0.27).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(relative_error_of(0.5, 0.5), Some(0.0));
        assert_eq!(relative_error_of(0.0, 0.1), None);
    }

    #[test]
    fn mse_cases() {
        let z = grid(vec![0.0; 4], 2, 2);
        let one = grid(vec![1.0, 0.0, 0.0, 0.0], 2, 2);
        assert_eq!(mse(&one, &z).unwrap(), 0.25);
        let shifted = grid(vec![0.5; 4], 2, 2);
        assert_eq!(mse(&shifted, &z).unwrap(), 0.25);
        assert!(mse(&z, &grid(vec![0.0; 6], 2, 3)).is_err());
    }

    #[test]
    fn unit_x_shift_displacement() {
        let gt = Grid::zeros(4, 4, 3);
        let mut pd = gt.clone();
        for px in pd.as_mut_slice().chunks_exact_mut(3) {
            px[0] = 1.0;
        }
        assert!((displacement_mse(&pd, &gt).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(displacement_mse(&grid(vec![0.0; 4], 2, 2), &grid(vec![0.0; 4], 2, 2)).is_err());
    }

    #[test]
    fn overlap_identical_and_disjoint() {
        let n = 1000;
        let v: Vec<f64> = (0..n).map(|i| ((i * 37) % n) as f64).collect();
        let g = grid(v.clone(), 25, 40);
        let mask = Mask::full(25, 40);
        let same = top_value_overlap(&g, &g, &mask, OVERLAP_FRACTION).unwrap();
        assert_eq!(same.counts(), (3, 0, 0));
        assert_eq!(same.iou, 1.0);
        let rev = grid(v.iter().map(|x| -x).collect(), 25, 40);
        let disjoint = top_value_overlap(&g, &rev, &mask, OVERLAP_FRACTION).unwrap();
        assert_eq!(disjoint.iou, 0.0);
        assert!(top_value_overlap(&g, &g, &Mask::new(25, 40, (0..n).map(|i| i < 100).collect()).unwrap(), 0.003).is_err());
    }

    #[test]
    fn constant_field_ties_break_by_index() {
        let g = grid(vec![1.0; 1000], 25, 40);
        let o = top_value_overlap(&g, &g, &Mask::full(25, 40), OVERLAP_FRACTION).unwrap();
        assert_eq!(o.overlap, vec![0, 1, 2]);
        assert!(o.ties_broken);
    }

    #[test]
    fn fld_pairs() {
        let major = grid(vec![0.3, 0.2, 0.1, 0.0], 2, 2);
        let minor = grid(vec![-0.1, -0.2, -0.3, 0.0], 2, 2);
        let mask = Mask::new(2, 2, vec![true, false, true, false]).unwrap();
        assert_eq!(fld_points(&major, &minor, &mask).unwrap(), vec![(-0.1, 0.3), (-0.3, 0.1)]);
        assert!(fld_points(&major, &minor, &Mask::empty(2, 2)).unwrap().is_empty());
    }

    #[test]
    fn summary_percentiles() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(s.mean, 3.0);
        assert_eq!(s.median, 3.0);
        assert!((s.p90 - 4.6).abs() < 1e-12);
        assert!((s.p95 - 4.8).abs() < 1e-12);
        assert!(summarize(&[]).is_none());
    }

    #[test]
    fn masked_mse_ignores_background() {
        let gt = grid(vec![0.0; 4], 2, 2);
        let pd = grid(vec![1.0, 0.0, 0.0, 5.0], 2, 2);
        let mask = Mask::new(2, 2, vec![true, true, false, false]).unwrap();
        assert_eq!(masked_mse(&pd, &gt, &mask).unwrap(), 0.5);
    }
}
