//! `gen-materials`, `gen-geometries`, `gen-doe` and `gen-dataset`.

use std::path::PathBuf;

use clap::Args;
use serde_json::json;

use stamp_core::dataset::{materialize_dataset, MaterializeOptions};
use stamp_core::doe::{build_doe, read_doe_csv, split_sizes, validate_doe, write_doe_csv, DOE_FILE};
use stamp_core::geometry::{lhs_sample, read_geometry_index, design_bounds, write_geometry_set, RasterSpec, DEFAULT_ALIGNMENT};
use stamp_core::materials::{build_family, read_material_manifest, write_material_set, MaterialFamily, DEFAULT_CLUSTERS};
use stamp_core::oracle::OracleConfig;

use crate::config::{overlay, parse, read_json_file, write_snapshot};
use crate::error::CliError;

#[derive(Debug, Args)]
pub struct GenMaterialsArgs {
    /// steel or aluminium
    #[arg(long)]
    pub family: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of synthetic seed curves (family default when omitted).
    #[arg(long)]
    pub n_seeds: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn gen_materials(a: &GenMaterialsArgs) -> Result<(), CliError> {
    let family: MaterialFamily = parse(&a.family, "--family")?;
    let curves = build_family(family, a.n_seeds, a.seed)?;
    write_material_set(&a.out, family, &curves)?;
    write_snapshot(
        &a.out,
        &json!({
            "command": "gen-materials",
            "family": family.as_str(),
            "seed": a.seed,
            "n_seeds": a.n_seeds,
            "curves": curves.len(),
        }),
    )?;
    println!("wrote {} {} curves to {}", curves.len(), family.as_str(), a.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct GenGeometriesArgs {
    #[arg(long, default_value_t = 600)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Raster size as HxW.
    #[arg(long, default_value = "64x64")]
    pub res: String,
    /// Cell size in millimetres.
    #[arg(long, default_value_t = 1.0)]
    pub pitch: f64,
    /// Both raster dimensions must be multiples of this.
    #[arg(long, default_value_t = DEFAULT_ALIGNMENT)]
    pub alignment: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn gen_geometries(a: &GenGeometriesArgs) -> Result<(), CliError> {
    let (h, w) = RasterSpec::parse_resolution(&a.res)?;
    let spec = RasterSpec::new(h, w, a.pitch).with_alignment(a.alignment);
    spec.validate()?;
    if a.n == 0 {
        return Err(CliError::config("--n must be positive"));
    }
    let params = lhs_sample(a.n, &design_bounds(), a.seed)?;
    write_geometry_set(&a.out, &params, &spec)?;
    write_snapshot(
        &a.out,
        &json!({"command": "gen-geometries", "n": a.n, "seed": a.seed, "raster": spec}),
    )?;
    println!("wrote {} geometries at {h}x{w} to {}", params.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct GenDoeArgs {
    #[arg(long)]
    pub geometries: PathBuf,
    #[arg(long)]
    pub materials: PathBuf,
    /// Train, validation and test fractions of the geometries.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    pub split: String,
    #[arg(long, default_value_t = DEFAULT_CLUSTERS as u8)]
    pub clusters: u8,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for doe.csv.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_ratios(s: &str) -> Result<[f64; 3], CliError> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| parse::<f64>(p.trim(), "--split"))
        .collect::<Result<_, _>>()?;
    <[f64; 3]>::try_from(parts).map_err(|_| CliError::config(format!("--split needs three fractions, got '{s}'")))
}

pub fn gen_doe(a: &GenDoeArgs) -> Result<(), CliError> {
    let ratios = parse_ratios(&a.split)?;
    let ids: Vec<u32> = read_geometry_index(&a.geometries)?.iter().map(|g| g.geometry_id).collect();
    let records = read_material_manifest(&a.materials)?;
    let entries = build_doe(&ids, &records, ratios, a.clusters, a.seed)?;
    validate_doe(&entries, a.clusters)?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::data(format!("{}: {e}", a.out.display())))?;
    write_doe_csv(&a.out.join(DOE_FILE), &entries)?;
    let [train, val, test] = split_sizes(&entries);
    write_snapshot(
        &a.out,
        &json!({
            "command": "gen-doe",
            "geometries": a.geometries,
            "materials": a.materials,
            "split": ratios,
            "clusters": a.clusters,
            "seed": a.seed,
            "entries": {"train": train, "val": val, "test": test},
        }),
    )?;
    println!("wrote {} entries (train {train}, val {val}, test {test}) to {}", entries.len(), a.out.join(DOE_FILE).display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct GenDatasetArgs {
    /// doe.csv from gen-doe.
    #[arg(long)]
    pub doe: PathBuf,
    #[arg(long)]
    pub geometries: PathBuf,
    #[arg(long)]
    pub materials: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long)]
    pub workers: Option<usize>,
    /// JSON file overriding forming-oracle constants.
    #[arg(long)]
    pub oracle: Option<PathBuf>,
}

pub fn gen_dataset(a: &GenDatasetArgs) -> Result<(), CliError> {
    let patch = a.oracle.as_deref().map(read_json_file).transpose()?;
    let oracle: OracleConfig = overlay(&OracleConfig::default(), patch.as_ref(), "oracle")?;
    oracle.validate()?;
    if a.workers == Some(0) {
        return Err(CliError::config("--workers must be positive"));
    }
    let entries = read_doe_csv(&a.doe)?;
    let opts = MaterializeOptions {
        oracle,
        threads: a.workers,
    };
    let manifest = materialize_dataset(&entries, &a.geometries, &a.materials, &a.out, &opts)?;
    write_snapshot(
        &a.out,
        &json!({
            "command": "gen-dataset",
            "doe": a.doe,
            "geometries": a.geometries,
            "materials": a.materials,
            "workers": a.workers,
            "oracle": oracle,
        }),
    )?;
    println!(
        "wrote {} samples to {} (content hash {})",
        manifest.samples.len(),
        a.out.display(),
        manifest.content_hash
    );
    Ok(())
}
