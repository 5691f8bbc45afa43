//! Training loop: Adam with a step schedule on the unmasked MSE.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{Tensor, D};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use stamp_core::dataset::Dataset;
use stamp_core::doe::Split;
use stamp_core::oracle::Field;
use stamp_core::Mask;

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::error::{ModelError, Result};
use crate::network::StampFormer;
use crate::optim::{clip_grad_norm, lr_schedule, Adam, AdamParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub step_epochs: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub rng_seed: u64,
    pub field: Field,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            gamma: 0.4,
            step_epochs: 100,
            max_epochs: 200,
            batch_size: 4,
            rng_seed: 0,
            field: Field::Thinning,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if !(self.lr0 > 0.0) {
            return bad("lr0 must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("beta1, beta2 must lie in [0, 1) and epsilon must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.step_epochs == 0 {
            return bad("batch_size, max_epochs and step_epochs must be positive");
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip must be positive when set");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        lr_schedule(epoch, self.lr0, self.gamma, self.step_epochs)
    }
}

/// One sample held in memory, inputs raw and target channel-last.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub sample_id: u32,
    pub heights: Vec<f64>,
    pub stresses: Vec<f64>,
    pub target: Vec<f64>,
    pub mask: Mask,
}

pub fn load_samples(ds: &Dataset, split: Split, field: Field) -> Result<Vec<TrainSample>> {
    ds.ids(split)
        .into_iter()
        .map(|id| {
            let hm = ds.load_heightmap(id)?;
            Ok(TrainSample {
                sample_id: id,
                heights: hm.heights.into_vec(),
                stresses: ds.load_curve(id)?.stresses,
                target: ds.load_field(id, field)?.into_vec(),
                mask: hm.valid_mask,
            })
        })
        .collect()
}

/// Mean squared error over every entry of `(B, H, W, C)` tensors.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(ModelError::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    Ok((pred - target)?.sqr()?.mean_all()?)
}

pub fn batch_tensors(model: &StampFormer, batch: &[&TrainSample]) -> Result<(Tensor, Tensor, Tensor)> {
    let heights: Vec<&[f64]> = batch.iter().map(|s| s.heights.as_slice()).collect();
    let stresses: Vec<&[f64]> = batch.iter().map(|s| s.stresses.as_slice()).collect();
    let (geo, curves) = model.inputs(&heights, &stresses)?;
    let cfg = &model.config;
    let mut target = Vec::with_capacity(batch.len() * batch[0].target.len());
    for s in batch {
        target.extend_from_slice(&s.target);
    }
    let target = Tensor::from_vec(target, (batch.len(), cfg.grid_height, cfg.grid_width, cfg.out_channels), model.device())?
        .to_dtype(model.dtype())?;
    Ok((geo, curves, target))
}

/// Average per-sample loss over `samples`, without gradients.
pub fn evaluate_loss(model: &StampFormer, samples: &[TrainSample], batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(ModelError::Config("cannot evaluate an empty split".into()));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&TrainSample> = chunk.iter().collect();
        let (geo, curves, target) = batch_tensors(model, &refs)?;
        let pred = model.forward(&geo, &curves)?.detach();
        let loss = mse_loss(&pred, &target)?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Per-sample unmasked losses, for diagnostics.
pub fn per_sample_losses(model: &StampFormer, samples: &[TrainSample]) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            let (geo, curves, target) = batch_tensors(model, &[s])?;
            let pred = model.forward(&geo, &curves)?;
            Ok((pred - target)?.sqr()?.mean(D::Minus1)?.mean_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_loss\n");
    for r in history {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.lr, r.train_loss, val));
    }
    s
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const HISTORY_FILE: &str = "history.csv";

pub struct Trainer {
    pub model: StampFormer,
    pub adam: Adam,
    pub cfg: TrainConfig,
    pub history: Vec<EpochRecord>,
    pub next_epoch: usize,
    pub best_val: Option<f64>,
    best_params: Option<Vec<(String, Vec<usize>, Vec<f64>)>>,
    best_epoch: usize,
    pub family: Option<String>,
    pub pitch_mm: Option<f64>,
    pub out_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(model: StampFormer, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.field.channels() != model.config.out_channels {
            return Err(ModelError::Config(format!(
                "field {} needs {} output channels, model has {}",
                cfg.field,
                cfg.field.channels(),
                model.config.out_channels
            )));
        }
        let adam = Adam::new(model.params.vars(), cfg.adam());
        Ok(Self {
            model,
            adam,
            cfg,
            history: Vec::new(),
            next_epoch: 0,
            best_val: None,
            best_params: None,
            best_epoch: 0,
            family: None,
            pitch_mm: None,
            out_dir: None,
        })
    }

    /// Continues from a checkpoint written with optimiser state.
    pub fn resume(ck: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        let model = ck.to_model(candle_core::DType::F32, &candle_core::Device::Cpu)?;
        let mut t = Self::new(model, cfg)?;
        ck.restore_adam(&t.model, &mut t.adam)?;
        t.next_epoch = ck.header.meta.epoch + 1;
        t.best_val = ck.header.meta.best_val_loss;
        t.family = ck.header.meta.family.clone();
        t.pitch_mm = ck.header.meta.pitch_mm;
        Ok(t)
    }

    pub fn with_output(mut self, dir: &Path, family: Option<String>) -> Self {
        self.out_dir = Some(dir.to_path_buf());
        self.family = family;
        self
    }

    fn meta(&self, epoch: usize) -> CheckpointMeta {
        CheckpointMeta {
            field: self.cfg.field.as_str().to_string(),
            family: self.family.clone(),
            epoch,
            best_val_loss: self.best_val,
            pitch_mm: self.pitch_mm,
            train_config: serde_json::to_value(&self.cfg).ok(),
        }
    }

    pub fn run_epoch(&mut self, train: &[TrainSample], val: &[TrainSample]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(ModelError::Config("training split is empty".into()));
        }
        let epoch = self.next_epoch;
        let lr = self.cfg.lr(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.rng_seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &train[i]).collect();
            let (geo, curves, target) = batch_tensors(&self.model, &batch)?;
            let pred = self.model.forward(&geo, &curves)?;
            let loss = mse_loss(&pred, &target)?;
            let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(ModelError::Diverged(format!(
                    "non-finite loss {value} at epoch {epoch}, batch {bi}"
                )));
            }
            let grads = loss.backward()?;
            let mut g = self.adam.collect_grads(&grads)?;
            if let Some(max) = self.cfg.grad_clip {
                clip_grad_norm(&mut g, max);
            }
            self.adam.step(&g, lr)?;
            total += value * batch.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(evaluate_loss(&self.model, val, self.cfg.batch_size)?)
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
        };
        let score = val_loss.unwrap_or(train_loss);
        if self.best_val.is_none_or(|b| score < b) {
            self.best_val = Some(score);
            self.best_epoch = epoch;
            self.best_params = Some(self.model.params.export()?);
            if let Some(dir) = &self.out_dir {
                Checkpoint::from_model(&self.model, self.meta(epoch), None)?.save(&dir.join(BEST_CHECKPOINT))?;
            }
        }
        self.history.push(record);
        self.next_epoch += 1;
        if let Some(dir) = &self.out_dir {
            stamp_core::grid::write_atomic(&dir.join(HISTORY_FILE), history_csv(&self.history).as_bytes())?;
        }
        log::info!(
            "epoch {epoch}: lr {lr:.3e} train {train_loss:.6e} val {}",
            val_loss.map(|v| format!("{v:.6e}")).unwrap_or_else(|| "-".into())
        );
        Ok(record)
    }

    /// Runs until `max_epochs` epochs have completed; writes the final
    /// checkpoint (with optimiser state) when an output directory is set.
    pub fn fit(&mut self, train: &[TrainSample], val: &[TrainSample]) -> Result<()> {
        while self.next_epoch < self.cfg.max_epochs {
            self.run_epoch(train, val)?;
        }
        if let Some(dir) = &self.out_dir {
            self.last_checkpoint()?.save(&dir.join(LAST_CHECKPOINT))?;
            let mut f = std::fs::File::create(dir.join("train_summary.json")).map_err(|e| ModelError::io(dir, e))?;
            let summary = serde_json::json!({
                "best_epoch": self.best_epoch,
                "best_val_loss": self.best_val,
                "epochs": self.history.len(),
                "num_params": self.model.params.num_params(),
            });
            writeln!(f, "{}", serde_json::to_string_pretty(&summary).unwrap()).map_err(|e| ModelError::io(dir, e))?;
        }
        Ok(())
    }

    pub fn last_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_model(&self.model, self.meta(self.next_epoch.saturating_sub(1)), Some(&self.adam))
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    /// Loads the best-scoring parameters back into the model.
    pub fn restore_best(&mut self) -> Result<()> {
        if let Some(best) = &self.best_params {
            for (name, shape, data) in best {
                self.model.params.assign(name, shape, data)?;
            }
        }
        Ok(())
    }

    pub fn best_checkpoint(&self) -> Result<Checkpoint> {
        let model = &self.model;
        let ck = Checkpoint::from_model(model, self.meta(self.best_epoch), None)?;
        match &self.best_params {
            None => Ok(ck),
            Some(best) => {
                let mut ck = ck;
                for (name, shape, data) in best {
                    ck.arrays.insert(name.clone(), (shape.clone(), data.iter().map(|&v| v as f32).collect()));
                }
                let bytes = ck.to_bytes()?;
                Checkpoint::from_bytes(&bytes)
            }
        }
    }
}
