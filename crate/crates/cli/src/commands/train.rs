//! `train`: fit one field model on a materialized dataset.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use stamp_core::dataset::Dataset;
use stamp_core::doe::Split;
use stamp_core::materials::MaterialFamily;
use stamp_core::oracle::Field;
use stamp_model::checkpoint::Checkpoint;
use stamp_model::train::{load_samples, TrainConfig, Trainer};
use stamp_model::{ModelConfig, StampFormer};

use crate::config::{overlay, parse, read_json_file, write_snapshot};
use crate::error::CliError;

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// thinning, major, minor, plastic or displacement
    #[arg(long)]
    pub field: String,
    /// Must match the dataset's family when both are known.
    #[arg(long)]
    pub family: Option<String>,
    /// JSON file with optional `preset`, `init_seed`, `model` and `train` keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// toy, default, grad-check or full
    #[arg(long)]
    pub preset: Option<String>,
    /// Seeds both initialisation and batch order.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub step_epochs: Option<usize>,
    /// Continue from a last.ckpt written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    preset: Option<String>,
    init_seed: Option<u64>,
    model: Option<Value>,
    train: Option<Value>,
}

/// Everything a run used, as written to `resolved_config.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRun {
    pub preset: String,
    pub init_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: PathBuf,
    pub family: Option<String>,
    pub pitch_mm: f64,
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_score: Option<f64>,
    pub best_train_loss: f64,
    pub epochs: usize,
}

pub fn preset(name: &str, out_channels: usize) -> Result<ModelConfig, CliError> {
    match name {
        "toy" => Ok(ModelConfig::toy(out_channels)),
        "default" => Ok(ModelConfig::default().with_out_channels(out_channels)),
        "grad-check" => Ok(ModelConfig::grad_check().with_out_channels(out_channels)),
        "full" => Ok(ModelConfig::full(out_channels)),
        other => Err(CliError::config(format!(
            "unknown preset '{other}' (expected toy, default, grad-check or full)"
        ))),
    }
}

fn resolve(a: &TrainArgs, ds: &Dataset, field: Field) -> Result<TrainRun, CliError> {
    let file: TrainFile = match &a.config {
        Some(p) => serde_json::from_value(read_json_file(p)?)
            .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?,
        None => TrainFile::default(),
    };
    let manifest = &ds.manifest;
    let family = match (&a.family, manifest.family) {
        (Some(f), Some(m)) => {
            let f: MaterialFamily = parse(f, "--family")?;
            if f != m {
                return Err(CliError::config(format!(
                    "--family {} does not match the dataset ({})",
                    f.as_str(),
                    m.as_str()
                )));
            }
            Some(f.as_str().to_string())
        }
        (Some(f), None) => Some(parse::<MaterialFamily>(f, "--family")?.as_str().to_string()),
        (None, m) => m.map(|m| m.as_str().to_string()),
    };

    let preset_name = a.preset.clone().or(file.preset).unwrap_or_else(|| "default".into());
    let base = preset(&preset_name, field.channels())?;
    let mut model: ModelConfig = overlay(&base, file.model.as_ref(), "model")?;
    let grid_fixed = file
        .model
        .as_ref()
        .is_some_and(|m| m.get("grid_height").is_some() || m.get("grid_width").is_some());
    if grid_fixed && (model.grid_height, model.grid_width) != (manifest.height, manifest.width) {
        return Err(CliError::config(format!(
            "model grid {}x{} does not match the dataset ({}x{})",
            model.grid_height, model.grid_width, manifest.height, manifest.width
        )));
    }
    model.grid_height = manifest.height;
    model.grid_width = manifest.width;
    if model.out_channels != field.channels() {
        return Err(CliError::config(format!(
            "field {field} needs {} output channels, model config has {}",
            field.channels(),
            model.out_channels
        )));
    }
    model.validate()?;

    let mut train: TrainConfig = overlay(&TrainConfig::default(), file.train.as_ref(), "train")?;
    train.field = field;
    let mut init_seed = file.init_seed.unwrap_or(0);
    if let Some(s) = a.seed {
        train.rng_seed = s;
        init_seed = s;
    }
    if let Some(e) = a.epochs {
        train.max_epochs = e;
    }
    if let Some(lr) = a.lr {
        train.lr0 = lr;
    }
    if let Some(b) = a.batch_size {
        train.batch_size = b;
    }
    if let Some(s) = a.step_epochs {
        train.step_epochs = s;
    }
    train.validate()?;
    Ok(TrainRun {
        preset: preset_name,
        init_seed,
        model,
        train,
        data: a.data.clone(),
        family,
        pitch_mm: manifest.pitch_mm,
        resume: a.resume.clone(),
    })
}

fn start(run: &TrainRun, out: &Path) -> Result<Trainer, CliError> {
    let mut trainer = match &run.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.header.meta.field != run.train.field.as_str() {
                return Err(CliError::config(format!(
                    "{} holds a {} model, not {}",
                    path.display(),
                    ck.header.meta.field,
                    run.train.field
                )));
            }
            Trainer::resume(&ck, run.train.clone())?
        }
        None => {
            let model = StampFormer::new(&run.model, run.init_seed, DType::F32, &Device::Cpu)?;
            Trainer::new(model, run.train.clone())?
        }
    };
    let family = run.family.clone().or(trainer.family.clone());
    trainer = trainer.with_output(out, family);
    trainer.pitch_mm = Some(run.pitch_mm);
    Ok(trainer)
}

pub fn train(a: &TrainArgs) -> Result<TrainOutcome, CliError> {
    let field: Field = parse(&a.field, "--field")?;
    let ds = Dataset::open(&a.data)?;
    let run = resolve(a, &ds, field)?;
    let train = load_samples(&ds, Split::Train, field)?;
    let val = load_samples(&ds, Split::Val, field)?;
    if train.is_empty() {
        return Err(CliError::data(format!("{} has no training samples", a.data.display())));
    }
    write_snapshot(&a.out, &run)?;
    let mut trainer = start(&run, &a.out)?;
    log::info!(
        "training {field} on {} samples ({} validation), {} parameters",
        train.len(),
        val.len(),
        trainer.model.params.num_params()
    );
    trainer.fit(&train, &val)?;
    let outcome = TrainOutcome {
        best_epoch: trainer.best_epoch(),
        best_score: trainer.best_val,
        best_train_loss: trainer.history.iter().map(|r| r.train_loss).fold(f64::INFINITY, f64::min),
        epochs: trainer.history.len(),
    };
    println!(
        "trained {} epochs; best epoch {} (score {:.6e}); checkpoints in {}",
        outcome.epochs,
        outcome.best_epoch,
        outcome.best_score.unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(outcome)
}
