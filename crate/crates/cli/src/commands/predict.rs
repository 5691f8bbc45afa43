//! `predict`: one geometry and material through a checkpoint.

use std::path::PathBuf;

use clap::Args;
use serde_json::{json, Value};

use stamp_core::figures::{heatmap, save_png, value_range};
use stamp_core::grid::{write_f32_le, write_json};
use stamp_core::materials::{load_material, read_curve_points, read_material_manifest, resample_curve, StressStrainCurve};
use stamp_core::oracle::Field;
use stamp_serve::{infer, parse_geometry, scalar_view, LoadedModel};

use crate::config::read_json_file;
use crate::error::CliError;

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSON object with the nine design parameters.
    #[arg(long)]
    pub geometry: PathBuf,
    /// Material from the catalogue given by --materials.
    #[arg(long, requires = "materials", conflicts_with = "curve")]
    pub material_id: Option<u32>,
    #[arg(long)]
    pub materials: Option<PathBuf>,
    /// CSV with header strain,stress.
    #[arg(long)]
    pub curve: Option<PathBuf>,
    /// Output grid as little-endian float32, row-major, channel-last; a
    /// JSON sidecar with the same stem is written beside it.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a heatmap PNG.
    #[arg(long)]
    pub png: Option<PathBuf>,
    /// Fringe de-noising (displacement only).
    #[arg(long)]
    pub denoise: bool,
}

fn curve(a: &PredictArgs) -> Result<StressStrainCurve, CliError> {
    match (a.material_id, &a.curve) {
        (Some(id), None) => {
            let dir = a.materials.as_ref().ok_or_else(|| CliError::config("--material-id needs --materials"))?;
            let record = read_material_manifest(dir)?
                .into_iter()
                .find(|r| r.material_id == id)
                .ok_or_else(|| CliError::config(format!("material_id {id} is not in {}", dir.display())))?;
            Ok(load_material(dir, &record)?)
        }
        (None, Some(path)) => Ok(resample_curve(&read_curve_points(path)?)?),
        _ => Err(CliError::config("give exactly one of --material-id or --curve")),
    }
}

pub fn predict(a: &PredictArgs) -> Result<(), CliError> {
    let model = LoadedModel::load(&a.checkpoint)?;
    if a.denoise && model.field != Field::Displacement {
        return Err(CliError::config("--denoise applies to displacement models only"));
    }
    let mut geometry = match read_json_file(&a.geometry)? {
        Value::Object(m) => m,
        _ => return Err(CliError::config(format!("{} must hold a JSON object", a.geometry.display()))),
    };
    geometry.remove("geometry_id");
    let (params, warnings) = parse_geometry(&geometry).map_err(stamp_serve::ApiError::BadRequest)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let curve = curve(a)?;
    let result = infer(&model, &params, &curve, a.denoise)?;
    write_f32_le(&a.out, result.grid.as_slice())?;
    let sidecar = json!({
        "field": model.field.as_str(),
        "unit": model.field.unit(),
        "height": result.grid.height(),
        "width": result.grid.width(),
        "channels": result.grid.channels(),
        "pitch_mm": model.pitch_mm,
        "summary": result.summary,
        "denoised": a.denoise,
        "model_version": model.version,
        "warnings": warnings,
    });
    write_json(&a.out.with_extension("json"), &sidecar)?;
    if let Some(png) = &a.png {
        let scalar = scalar_view(&result.grid);
        let range = value_range(&scalar, &result.mask);
        save_png(&heatmap(&scalar, &result.mask, Some(range)), png)?;
    }
    println!("{}", serde_json::to_string_pretty(&sidecar).expect("json value"));
    Ok(())
}
