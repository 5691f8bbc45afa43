//! `export-mesh`: formed surface of one sample, coloured by plastic strain.

use std::path::PathBuf;

use clap::Args;

use stamp_core::dataset::Dataset;
use stamp_core::figures::save_png;
use stamp_core::oracle::Field;
use stamp_core::postproc::{denoise_displacement, reconstruct_surface, DenoiseConfig};
use stamp_core::Grid;
use stamp_model::eval::predict_sample;
use stamp_serve::state::load_models;

use crate::error::CliError;

#[derive(Debug, Args)]
pub struct ExportMeshArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub sample: u32,
    /// Directory holding displacement and plastic checkpoints; the
    /// sample's oracle fields are used when omitted.
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
    /// Fringe de-noising of the displacement before reconstruction.
    #[arg(long)]
    pub denoise: bool,
    /// ASCII PLY output.
    #[arg(long)]
    pub out: PathBuf,
    /// Top-view PNG render.
    #[arg(long)]
    pub render: Option<PathBuf>,
    #[arg(long, default_value_t = 4.0)]
    pub pixels_per_mm: f64,
}

pub fn export_mesh(a: &ExportMeshArgs) -> Result<(), CliError> {
    if !(a.pixels_per_mm > 0.0) {
        return Err(CliError::config("--pixels-per-mm must be positive"));
    }
    let ds = Dataset::open(&a.data)?;
    if !ds.manifest.samples.iter().any(|s| s.sample_id == a.sample) {
        return Err(CliError::config(format!("sample {} is not in {}", a.sample, a.data.display())));
    }
    let hm = ds.load_heightmap(a.sample)?;
    let (displacement, plastic): (Grid, Grid) = match &a.checkpoints {
        None => (ds.load_field(a.sample, Field::Displacement)?, ds.load_field(a.sample, Field::Plastic)?),
        Some(dir) => {
            let models = load_models(dir)?;
            let curve = ds.load_curve(a.sample)?;
            let pick = |field: Field| {
                models
                    .iter()
                    .find(|m| m.field == field)
                    .ok_or_else(|| CliError::config(format!("no {field} checkpoint under {}", dir.display())))
            };
            let d = predict_sample(&pick(Field::Displacement)?.model, &hm, &curve, false)?;
            let p = predict_sample(&pick(Field::Plastic)?.model, &hm, &curve, false)?;
            (d, p)
        }
    };
    let (displacement, mask) = if a.denoise {
        denoise_displacement(&displacement, &hm.valid_mask, &DenoiseConfig::default())?
    } else {
        (displacement, hm.valid_mask.clone())
    };
    let mesh = reconstruct_surface(&displacement, &plastic, &mask, ds.manifest.pitch_mm)?;
    mesh.write_ply(&a.out)?;
    if let Some(png) = &a.render {
        save_png(&mesh.render_top_view(a.pixels_per_mm), png)?;
    }
    println!(
        "wrote {} vertices and {} triangles to {}",
        mesh.vertices.len(),
        mesh.triangles.len(),
        a.out.display()
    );
    Ok(())
}
