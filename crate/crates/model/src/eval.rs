//! Offline evaluation over a dataset split.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use stamp_core::dataset::Dataset;
use stamp_core::doe::Split;
use stamp_core::figures;
use stamp_core::geometry::HeightMap;
use stamp_core::materials::StressStrainCurve;
use stamp_core::metrics::{self, Summary, OVERLAP_FRACTION};
use stamp_core::oracle::Field;
use stamp_core::Grid;

use crate::error::{ModelError, Result};
use crate::network::{ForwardOptions, StampFormer};

/// Batch-1 forward pass returning an `(H, W, C)` grid. The service calls
/// this same function, so offline and online predictions agree exactly.
pub fn predict(model: &StampFormer, heights: &[f64], stresses: &[f64], zero_material: bool) -> Result<Grid> {
    let cfg = &model.config;
    let (geo, curves) = model.inputs(&[heights], &[stresses])?;
    let opts = ForwardOptions {
        zero_material,
        ..Default::default()
    };
    let (out, _) = model.forward_with(&geo, &curves, &opts)?;
    let values = out.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    Ok(Grid::from_vec(cfg.grid_height, cfg.grid_width, cfg.out_channels, values)?)
}

/// Predicts from a height-map and curve. Heights are rounded to single
/// precision first, the precision datasets store them in, so a freshly
/// rasterised geometry and its stored copy give identical outputs.
pub fn predict_sample(model: &StampFormer, hm: &HeightMap, curve: &StressStrainCurve, zero_material: bool) -> Result<Grid> {
    let heights: Vec<f64> = hm.heights.as_slice().iter().map(|&h| h as f32 as f64).collect();
    predict(model, &heights, &curve.stresses, zero_material)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: u32,
    pub geometry_id: u32,
    pub material_id: u32,
    pub mse: f64,
    pub masked_mse: f64,
    pub m_gt: f64,
    pub m_pd: f64,
    /// Absent when the ground-truth maximum is zero.
    pub rel_err_pct: Option<f64>,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_samples: usize,
    pub n_flagged: usize,
    pub rel_err: Option<Summary>,
    pub mse_mean: f64,
    pub mse_median: f64,
    pub masked_mse_mean: f64,
    pub masked_mse_median: f64,
    pub iou_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub field: Field,
    pub family: Option<String>,
    pub split: Split,
    pub model_version: String,
    pub zero_material: bool,
    pub per_sample: Vec<SampleMetrics>,
    pub aggregate: Aggregate,
    /// Samples excluded from relative-error statistics.
    pub flagged: Vec<u32>,
    pub figures: Vec<String>,
}

impl EvalReport {
    pub fn mean_rel_err(&self) -> Option<f64> {
        self.aggregate.rel_err.map(|s| s.mean)
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub split: Split,
    pub zero_material: bool,
    pub overlap_fraction: f64,
    pub figure_dir: Option<PathBuf>,
    pub model_version: String,
    pub family: Option<String>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            split: Split::Test,
            zero_material: false,
            overlap_fraction: OVERLAP_FRACTION,
            figure_dir: None,
            model_version: String::new(),
            family: None,
        }
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    metrics::percentile(&v, 50.0)
}

pub fn aggregate(per_sample: &[SampleMetrics]) -> Aggregate {
    let rel: Vec<f64> = per_sample.iter().filter_map(|s| s.rel_err_pct).collect();
    let mse: Vec<f64> = per_sample.iter().map(|s| s.mse).collect();
    let masked: Vec<f64> = per_sample.iter().map(|s| s.masked_mse).collect();
    let iou: Vec<f64> = per_sample.iter().filter_map(|s| s.iou).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Aggregate {
        n_samples: per_sample.len(),
        n_flagged: per_sample.len() - rel.len(),
        rel_err: metrics::summarize(&rel),
        mse_mean: mean(&mse),
        mse_median: median(&mse),
        masked_mse_mean: mean(&masked),
        masked_mse_median: median(&masked),
        iou_mean: (!iou.is_empty()).then(|| mean(&iou)),
    }
}

/// Runs the model on every sample of a split and collects the metrics; with
/// a figure directory set, histograms and maps for the median sample are
/// written as PNG.
pub fn evaluate(model: &StampFormer, ds: &Dataset, field: Field, opts: &EvalOptions) -> Result<EvalReport> {
    if field.channels() != model.config.out_channels {
        return Err(ModelError::Config(format!(
            "checkpoint predicts {} channels, field {} has {}",
            model.config.out_channels,
            field,
            field.channels()
        )));
    }
    let ids = ds.ids(opts.split);
    if ids.is_empty() {
        return Err(ModelError::Config(format!("split {} is empty", opts.split)));
    }
    let mut per_sample = Vec::with_capacity(ids.len());
    let mut flagged = Vec::new();
    let mut predictions = Vec::with_capacity(ids.len());
    for &id in &ids {
        let meta = ds.meta(id)?;
        let hm = ds.load_heightmap(id)?;
        let curve = ds.load_curve(id)?;
        let gt = ds.load_field(id, field)?;
        let pd = predict_sample(model, &hm, &curve, opts.zero_material)?;
        let mask = &hm.valid_mask;
        let re = metrics::relative_error(&gt, &pd, mask)?;
        if re.rel_err_pct.is_none() {
            log::warn!("sample {id}: ground-truth maximum is zero, excluded from relative error");
            flagged.push(id);
        }
        let iou = metrics::top_value_overlap(&gt, &pd, mask, opts.overlap_fraction).ok().map(|o| o.iou);
        per_sample.push(SampleMetrics {
            sample_id: id,
            geometry_id: meta.geometry_id,
            material_id: meta.material_id,
            mse: metrics::mse(&pd, &gt)?,
            masked_mse: metrics::masked_mse(&pd, &gt, mask)?,
            m_gt: re.m_gt,
            m_pd: re.m_pd,
            rel_err_pct: re.rel_err_pct,
            iou,
        });
        if opts.figure_dir.is_some() {
            predictions.push(pd);
        }
    }
    let aggregate = aggregate(&per_sample);
    let mut report = EvalReport {
        field,
        family: opts.family.clone(),
        split: opts.split,
        model_version: opts.model_version.clone(),
        zero_material: opts.zero_material,
        per_sample,
        aggregate,
        flagged,
        figures: Vec::new(),
    };
    if let Some(dir) = &opts.figure_dir {
        report.figures = write_figures(ds, field, &report, &predictions, dir, opts.overlap_fraction)?;
    }
    Ok(report)
}

fn write_figures(
    ds: &Dataset,
    field: Field,
    report: &EvalReport,
    predictions: &[Grid],
    dir: &Path,
    fraction: f64,
) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| ModelError::io(dir, e))?;
    let mut written = Vec::new();
    let mut save = |img: &image::RgbImage, name: String| -> Result<()> {
        figures::save_png(img, &dir.join(&name))?;
        written.push(name);
        Ok(())
    };
    let rel: Vec<f64> = report.per_sample.iter().filter_map(|s| s.rel_err_pct).collect();
    save(&figures::histogram(&rel, 20, report.aggregate.rel_err.as_ref()), "rel_err_hist.png".into())?;
    let mse: Vec<f64> = report.per_sample.iter().map(|s| s.mse).collect();
    save(&figures::histogram(&mse, 20, metrics::summarize(&mse).as_ref()), "mse_hist.png".into())?;

    // the sample closest to the median relative error stands in for the split
    let Some(med) = report.aggregate.rel_err.map(|s| s.median) else {
        return Ok(written);
    };
    let (idx, sample) = report
        .per_sample
        .iter()
        .enumerate()
        .filter(|(_, s)| s.rel_err_pct.is_some())
        .min_by(|a, b| {
            let da = (a.1.rel_err_pct.unwrap() - med).abs();
            let db = (b.1.rel_err_pct.unwrap() - med).abs();
            da.total_cmp(&db)
        })
        .unwrap();
    let id = sample.sample_id;
    let mask = ds.load_mask(id)?;
    let gt = ds.load_field(id, field)?;
    let pd = &predictions[idx];
    let scalar = |g: &Grid| -> Result<Grid> {
        if g.channels() == 1 {
            return Ok(g.clone());
        }
        let all = metrics::cell_values(g, &stamp_core::Mask::full(g.height(), g.width()))?;
        Ok(Grid::from_vec(g.height(), g.width(), 1, all)?)
    };
    let (gt_s, pd_s) = (scalar(&gt)?, scalar(pd)?);
    let (lo_g, hi_g) = figures::value_range(&gt_s, &mask);
    let (lo_p, hi_p) = figures::value_range(&pd_s, &mask);
    let range = Some((lo_g.min(lo_p), hi_g.max(hi_p)));
    save(&figures::heatmap(&gt_s, &mask, range), format!("sample_{id:05}_gt.png"))?;
    save(&figures::heatmap(&pd_s, &mask, range), format!("sample_{id:05}_pd.png"))?;
    if let Ok(ov) = metrics::top_value_overlap(&gt, pd, &mask, fraction) {
        save(&figures::overlap_map(&ov, &mask), format!("sample_{id:05}_overlap.png"))?;
    }
    if matches!(field, Field::Major | Field::Minor) {
        let other = if field == Field::Major { Field::Minor } else { Field::Major };
        let partner = ds.load_field(id, other)?;
        let (major_pd, minor_pd, major_gt, minor_gt) = if field == Field::Major {
            (pd, &partner, &gt, &partner)
        } else {
            (&partner, pd, &partner, &gt)
        };
        let pts = metrics::fld_points(major_pd, minor_pd, &mask)?;
        let reference = metrics::fld_points(major_gt, minor_gt, &mask)?;
        save(&figures::fld_scatter(&pts, Some(&reference)), format!("sample_{id:05}_fld.png"))?;
    }
    Ok(written)
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    stamp_core::grid::write_json(path, report)?;
    Ok(())
}
