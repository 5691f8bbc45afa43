//! `eval`: per-sample metrics, aggregates and figures for one checkpoint.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use clap::Args;
use serde_json::json;

use stamp_core::dataset::Dataset;
use stamp_core::doe::Split;
use stamp_core::oracle::Field;
use stamp_model::checkpoint::Checkpoint;
use stamp_core::metrics::OVERLAP_FRACTION;
use stamp_model::eval::{evaluate, write_report, EvalOptions, EvalReport};

use crate::config::{parse, write_snapshot};
use crate::error::CliError;

pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// train, val or test
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Defaults to an `eval` directory beside the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Force the material embeddings to zero.
    #[arg(long)]
    pub zero_material: bool,
    /// Fraction of cells in the top-value overlap maps.
    #[arg(long, default_value_t = OVERLAP_FRACTION)]
    pub overlap: f64,
    #[arg(long)]
    pub no_figures: bool,
}

fn default_out(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join("eval")
}

pub fn eval(a: &EvalArgs) -> Result<EvalReport, CliError> {
    let split: Split = parse(&a.split, "--split")?;
    if !(a.overlap > 0.0 && a.overlap <= 1.0) {
        return Err(CliError::config("--overlap must lie in (0, 1]"));
    }
    let ck = Checkpoint::load(&a.checkpoint)?;
    let field: Field = parse(&ck.header.meta.field, "checkpoint field")?;
    let model = ck.to_model(DType::F32, &Device::Cpu)?;
    let ds = Dataset::open(&a.data)?;
    let (h, w) = (ds.manifest.height, ds.manifest.width);
    if (model.config.grid_height, model.config.grid_width) != (h, w) {
        return Err(CliError::config(format!(
            "checkpoint expects {}x{} grids, dataset holds {h}x{w}",
            model.config.grid_height, model.config.grid_width
        )));
    }
    let out = a.out.clone().unwrap_or_else(|| default_out(&a.checkpoint));
    let opts = EvalOptions {
        split,
        zero_material: a.zero_material,
        overlap_fraction: a.overlap,
        figure_dir: (!a.no_figures).then(|| out.join("figures")),
        model_version: ck.model_version().to_string(),
        family: ck.header.meta.family.clone(),
    };
    let report = evaluate(&model, &ds, field, &opts)?;
    write_snapshot(
        &out,
        &json!({
            "command": "eval",
            "checkpoint": a.checkpoint,
            "model_version": opts.model_version,
            "data": a.data,
            "split": split,
            "zero_material": a.zero_material,
            "overlap_fraction": a.overlap,
            "figures": !a.no_figures,
        }),
    )?;
    write_report(&report, &out.join(REPORT_FILE))?;
    let agg = &report.aggregate;
    match agg.rel_err {
        Some(s) => println!(
            "{field} on {} {split} samples: relative error mean {:.3}% median {:.3}% p90 {:.3}% p95 {:.3}%; mse {:.4e}; masked mse {:.4e}",
            agg.n_samples, s.mean, s.median, s.p90, s.p95, agg.mse_mean, agg.masked_mse_mean
        ),
        None => println!(
            "{field} on {} {split} samples: mse {:.4e}; masked mse {:.4e}; relative error undefined",
            agg.n_samples, agg.mse_mean, agg.masked_mse_mean
        ),
    }
    println!("report written to {}", out.join(REPORT_FILE).display());
    Ok(report)
}
