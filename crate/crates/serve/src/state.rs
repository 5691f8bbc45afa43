//! Loaded checkpoints and the material catalogue.

use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use candle_core::{DType, Device};
use stamp_core::materials::{load_material, read_material_manifest, MaterialRecord, StressStrainCurve, MATERIALS_MANIFEST};
use stamp_core::oracle::Field;
use stamp_model::checkpoint::Checkpoint;
use stamp_model::StampFormer;

use crate::ServeError;

pub struct LoadedModel {
    pub model: StampFormer,
    pub field: Field,
    pub family: Option<String>,
    pub version: String,
    pub path: PathBuf,
    pub epoch: usize,
    pub pitch_mm: f64,
}

impl LoadedModel {
    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<Self, ServeError> {
        let meta = &ck.header.meta;
        let field: Field = meta
            .field
            .parse()
            .map_err(|e| ServeError::Load(format!("{}: {e}", path.display())))?;
        let model = ck
            .to_model(DType::F32, &Device::Cpu)
            .map_err(|e| ServeError::Load(format!("{}: {e}", path.display())))?;
        if model.config.out_channels != field.channels() {
            return Err(ServeError::Load(format!(
                "{}: field {field} needs {} channels, network has {}",
                path.display(),
                field.channels(),
                model.config.out_channels
            )));
        }
        Ok(Self {
            model,
            field,
            family: meta.family.clone(),
            version: ck.model_version().to_string(),
            path: path.to_path_buf(),
            epoch: meta.epoch,
            pitch_mm: meta.pitch_mm.unwrap_or(1.0),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ServeError> {
        let ck = Checkpoint::load(path).map_err(|e| ServeError::Load(format!("{}: {e}", path.display())))?;
        Self::from_checkpoint(&ck, path)
    }
}

pub struct Material {
    pub record: MaterialRecord,
    pub curve: StressStrainCurve,
}

#[derive(Default)]
pub struct Catalog {
    pub materials: Vec<Material>,
}

impl Catalog {
    pub fn load(dir: &Path) -> Result<Self, ServeError> {
        let records = read_material_manifest(dir).map_err(|e| ServeError::Load(e.to_string()))?;
        let mut materials = Vec::with_capacity(records.len());
        for record in records {
            let curve = load_material(dir, &record).map_err(|e| ServeError::Load(e.to_string()))?;
            materials.push(Material { record, curve });
        }
        Ok(Self { materials })
    }

    pub fn get(&self, material_id: u32) -> Option<&Material> {
        self.materials.iter().find(|m| m.record.material_id == material_id)
    }
}

/// `*.ckpt` files under `dir` (one level of subdirectories), sorted; where a
/// directory holds both `best.ckpt` and `last.ckpt` only the former is kept.
pub fn discover_checkpoints(dir: &Path) -> Result<Vec<PathBuf>, ServeError> {
    let mut found = Vec::new();
    let scan = |d: &Path, found: &mut Vec<PathBuf>| -> Result<Vec<PathBuf>, ServeError> {
        let mut subdirs = Vec::new();
        let entries = std::fs::read_dir(d).map_err(|e| ServeError::Load(format!("{}: {e}", d.display())))?;
        let mut here = Vec::new();
        for entry in entries.flatten() {
            let p = entry.path();
            if p.is_dir() {
                subdirs.push(p);
            } else if p.extension().is_some_and(|e| e == "ckpt") {
                here.push(p);
            }
        }
        let has_best = here.iter().any(|p| p.file_name().is_some_and(|n| n == "best.ckpt"));
        found.extend(here.into_iter().filter(|p| !(has_best && p.file_name().is_some_and(|n| n == "last.ckpt"))));
        Ok(subdirs)
    };
    for sub in scan(dir, &mut found)? {
        scan(&sub, &mut found)?;
    }
    found.sort();
    Ok(found)
}

pub struct AppState {
    models: RwLock<Vec<Arc<LoadedModel>>>,
    catalog: RwLock<Arc<Catalog>>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(models: Vec<LoadedModel>, catalog: Catalog) -> Self {
        Self {
            models: RwLock::new(models.into_iter().map(Arc::new).collect()),
            catalog: RwLock::new(Arc::new(catalog)),
            checkpoint_dir: None,
        }
    }

    /// Loads every checkpoint under `dir` and the catalogue from
    /// `materials` (default `dir/materials`, empty if absent).
    pub fn from_dirs(dir: &Path, materials: Option<&Path>) -> Result<Self, ServeError> {
        let models = load_models(dir)?;
        let mdir = materials.map(Path::to_path_buf).unwrap_or_else(|| dir.join("materials"));
        let catalog = if mdir.join(MATERIALS_MANIFEST).exists() {
            Catalog::load(&mdir)?
        } else {
            log::warn!("no material catalogue at {}", mdir.display());
            Catalog::default()
        };
        let mut state = Self::new(models, catalog);
        state.checkpoint_dir = Some(dir.to_path_buf());
        Ok(state)
    }

    pub fn models(&self) -> Vec<Arc<LoadedModel>> {
        self.models.read().unwrap().clone()
    }

    pub fn catalog(&self) -> Arc<Catalog> {
        self.catalog.read().unwrap().clone()
    }

    /// The model serving `field`, restricted to `family` when given.
    pub fn model_for(&self, field: Field, family: Option<&str>) -> Option<Arc<LoadedModel>> {
        self.models
            .read()
            .unwrap()
            .iter()
            .find(|m| m.field == field && family.is_none_or(|f| m.family.as_deref() == Some(f)))
            .cloned()
    }

    /// Replaces the loaded set; in-flight requests keep the models they hold.
    pub fn swap_models(&self, models: Vec<LoadedModel>) {
        *self.models.write().unwrap() = models.into_iter().map(Arc::new).collect();
    }

    pub fn swap_catalog(&self, catalog: Catalog) {
        *self.catalog.write().unwrap() = Arc::new(catalog);
    }
}

pub fn load_models(dir: &Path) -> Result<Vec<LoadedModel>, ServeError> {
    let mut models: Vec<LoadedModel> = Vec::new();
    for path in discover_checkpoints(dir)? {
        let m = LoadedModel::load(&path)?;
        if models.iter().any(|o| o.field == m.field && o.family == m.family) {
            log::warn!("{} duplicates field {} and is ignored", path.display(), m.field);
            continue;
        }
        log::info!("loaded {} for field {} ({})", path.display(), m.field, &m.version[..12]);
        models.push(m);
    }
    Ok(models)
}
