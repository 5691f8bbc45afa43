//! On-disk sample store produced from a DoE by the forming oracle.
//!
//! Layout:
//!
//! ```text
//! <out>/dataset.json              manifest, written last
//! <out>/samples/00000/sample.json {sample_id, geometry_id, material_id, cluster, split}
//! <out>/samples/00000/height.f32  H×W float32 LE
//! <out>/samples/00000/mask.bin    packed validity mask
//! <out>/samples/00000/curve.csv
//! <out>/samples/00000/{thinning,major,minor,plastic,displacement}.f32
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::doe::{DoeEntry, Split};
use crate::error::{Error, Result};
use crate::geometry::{geometry_stem, HeightMap};
use crate::grid::{read_json, write_json, Grid, Mask};
use crate::materials::{load_material, read_material_manifest, MaterialFamily, MaterialRecord, StressStrainCurve};
use crate::oracle::{generate_fields, Field, FieldSample, OracleConfig};

pub const DATASET_MANIFEST: &str = "dataset.json";
pub const SAMPLE_META: &str = "sample.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub sample_id: u32,
    pub geometry_id: u32,
    pub material_id: u32,
    pub cluster: u8,
    pub split: Split,
}

impl From<&DoeEntry> for SampleMeta {
    fn from(e: &DoeEntry) -> Self {
        Self {
            sample_id: e.id,
            geometry_id: e.geometry_id,
            material_id: e.material_id,
            cluster: e.cluster,
            split: e.split,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub pitch_mm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<MaterialFamily>,
    pub oracle: OracleConfig,
    pub counts: SplitCounts,
    /// SHA-256 over every sample's files in id order.
    pub content_hash: String,
    pub samples: Vec<SampleMeta>,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> Vec<u32> {
        self.samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| s.sample_id)
            .collect()
    }
}

pub fn sample_dir(root: &Path, sample_id: u32) -> PathBuf {
    root.join("samples").join(format!("{sample_id:05}"))
}

#[derive(Debug, Clone, Copy)]
pub struct MaterializeOptions {
    pub oracle: OracleConfig,
    /// Worker threads; `None` uses the global rayon pool.
    pub threads: Option<usize>,
}

impl Default for MaterializeOptions {
    fn default() -> Self {
        Self {
            oracle: OracleConfig::default(),
            threads: None,
        }
    }
}

const SAMPLE_FILES: [&str; 9] = [
    SAMPLE_META,
    "height.f32",
    "mask.bin",
    "curve.csv",
    "thinning.f32",
    "major.f32",
    "minor.f32",
    "plastic.f32",
    "displacement.f32",
];

/// Writes one sample directory and returns the digest of its files.
pub fn write_sample(root: &Path, meta: &SampleMeta, sample: &FieldSample) -> Result<[u8; 32]> {
    let dir = sample_dir(root, meta.sample_id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_json(&dir.join(SAMPLE_META), meta)?;
    sample.heightmap.heights.write_f32(&dir.join("height.f32"))?;
    sample.heightmap.valid_mask.write_packed(&dir.join("mask.bin"))?;
    sample.curve.write_csv(&dir.join("curve.csv"))?;
    for field in Field::ALL {
        sample.field(field).write_f32(&dir.join(field.file_name()))?;
    }
    hash_sample_dir(&dir)
}

fn hash_sample_dir(dir: &Path) -> Result<[u8; 32]> {
    let mut h = Sha256::new();
    for name in SAMPLE_FILES {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().into())
}

fn combine_hashes(parts: &[[u8; 32]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// Generates and writes every DoE entry, then the manifest (atomically, last).
pub fn materialize_dataset(
    doe: &[DoeEntry],
    geometry_dir: &Path,
    material_dir: &Path,
    out_dir: &Path,
    opts: &MaterializeOptions,
) -> Result<DatasetManifest> {
    if doe.is_empty() {
        return Err(Error::data("DoE is empty"));
    }
    opts.oracle.validate()?;
    let records: BTreeMap<u32, MaterialRecord> = read_material_manifest(material_dir)?
        .into_iter()
        .map(|r| (r.material_id, r))
        .collect();
    let family = records.values().find_map(|r| r.family);

    let mut sorted: Vec<&DoeEntry> = doe.iter().collect();
    sorted.sort_by_key(|e| e.id);

    let work = || -> Result<Vec<([u8; 32], usize, usize, f64)>> {
        sorted
            .par_iter()
            .map(|entry| {
                let record = records.get(&entry.material_id).ok_or_else(|| {
                    Error::data(format!(
                        "DoE entry {}: material_id {} is not in the material manifest",
                        entry.id, entry.material_id
                    ))
                })?;
                let curve = load_material(material_dir, record)
                    .map_err(|e| Error::data(format!("DoE entry {}: {e}", entry.id)))?;
                let stem = geometry_stem(entry.geometry_id);
                if !geometry_dir.join(format!("{stem}.f32")).exists() {
                    return Err(Error::data(format!(
                        "DoE entry {}: height-map for geometry_id {} is missing",
                        entry.id, entry.geometry_id
                    )));
                }
                let (hm, _) = HeightMap::read(geometry_dir, &stem)
                    .map_err(|e| Error::data(format!("DoE entry {}: {e}", entry.id)))?;
                let sample = generate_fields(&hm, &curve, &opts.oracle, entry.id)?;
                let digest = write_sample(out_dir, &SampleMeta::from(*entry), &sample)?;
                Ok((digest, hm.height(), hm.width(), hm.pixel_pitch_mm))
            })
            .collect()
    };
    let results = match opts.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::config(format!("worker pool: {e}")))?
            .install(work)?,
        None => work()?,
    };

    let (_, height, width, pitch_mm) = results[0];
    if results.iter().any(|r| r.1 != height || r.2 != width || r.3 != pitch_mm) {
        return Err(Error::data("height-maps in the DoE do not share one raster"));
    }
    let digests: Vec<[u8; 32]> = results.iter().map(|r| r.0).collect();
    let samples: Vec<SampleMeta> = sorted.iter().map(|e| SampleMeta::from(*e)).collect();
    let count = |s: Split| samples.iter().filter(|m| m.split == s).count();
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        height,
        width,
        pitch_mm,
        family,
        oracle: opts.oracle,
        counts: SplitCounts {
            train: count(Split::Train),
            val: count(Split::Val),
            test: count(Split::Test),
        },
        content_hash: combine_hashes(&digests),
        samples,
    };
    write_json(&out_dir.join(DATASET_MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Read access to a materialized dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(DATASET_MANIFEST);
        if !path.exists() {
            return Err(Error::data(format!("{} has no {DATASET_MANIFEST}", root.display())));
        }
        let manifest: DatasetManifest = read_json(&path)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::data(format!(
                "dataset format version {} is not supported",
                manifest.format_version
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn ids(&self, split: Split) -> Vec<u32> {
        self.manifest.ids(split)
    }

    pub fn meta(&self, sample_id: u32) -> Result<SampleMeta> {
        read_json(&sample_dir(&self.root, sample_id).join(SAMPLE_META))
    }

    pub fn load_mask(&self, sample_id: u32) -> Result<Mask> {
        let m = &self.manifest;
        Mask::read_packed(&sample_dir(&self.root, sample_id).join("mask.bin"), m.height, m.width)
    }

    pub fn load_heightmap(&self, sample_id: u32) -> Result<HeightMap> {
        let m = &self.manifest;
        let dir = sample_dir(&self.root, sample_id);
        let meta = self.meta(sample_id)?;
        Ok(HeightMap {
            heights: Grid::read_f32(&dir.join("height.f32"), m.height, m.width, 1)?,
            valid_mask: self.load_mask(sample_id)?,
            pixel_pitch_mm: m.pitch_mm,
            geometry_id: meta.geometry_id,
        })
    }

    pub fn load_curve(&self, sample_id: u32) -> Result<StressStrainCurve> {
        let meta = self.meta(sample_id)?;
        let mut curve = StressStrainCurve::read_csv(&sample_dir(&self.root, sample_id).join("curve.csv"))?;
        curve.material_id = meta.material_id;
        curve.cluster = meta.cluster;
        Ok(curve)
    }

    pub fn load_field(&self, sample_id: u32, field: Field) -> Result<Grid> {
        let m = &self.manifest;
        Grid::read_f32(
            &sample_dir(&self.root, sample_id).join(field.file_name()),
            m.height,
            m.width,
            field.channels(),
        )
    }

    /// Recomputes the content hash from the files on disk.
    pub fn verify_hash(&self) -> Result<bool> {
        let digests = self
            .manifest
            .samples
            .iter()
            .map(|s| hash_sample_dir(&sample_dir(&self.root, s.sample_id)))
            .collect::<Result<Vec<_>>>()?;
        Ok(combine_hashes(&digests) == self.manifest.content_hash)
    }
}
