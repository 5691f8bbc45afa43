//! Geometry × material design matrix with geometry-disjoint splits.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::materials::{largest_remainder, MaterialRecord};

pub const DEFAULT_SPLIT: [f64; 3] = [0.8, 0.1, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::data(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DoeEntry {
    pub id: u32,
    pub geometry_id: u32,
    pub material_id: u32,
    pub cluster: u8,
    pub split: Split,
}

/// Split sizes by largest-remainder rounding of `n · ratios`.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let c = largest_remainder(n, &ratios);
    Ok([c[0], c[1], c[2]])
}

/// Shuffles the geometries, splits them by `ratios`, and pairs each geometry
/// with one uniformly drawn material from every cluster `1..=n_clusters`.
pub fn build_doe(
    geometry_ids: &[u32],
    materials: &[MaterialRecord],
    ratios: [f64; 3],
    n_clusters: u8,
    rng_seed: u64,
) -> Result<Vec<DoeEntry>> {
    if n_clusters == 0 {
        return Err(Error::config("n_clusters must be at least 1"));
    }
    let counts = split_counts(geometry_ids.len(), ratios)?;
    let mut by_cluster: BTreeMap<u8, Vec<u32>> = BTreeMap::new();
    for m in materials {
        by_cluster.entry(m.cluster).or_default().push(m.material_id);
    }
    for cluster in 1..=n_clusters {
        if by_cluster.get(&cluster).is_none_or(|v| v.is_empty()) {
            return Err(Error::config(format!("cluster {cluster} has no materials")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut order = geometry_ids.to_vec();
    order.shuffle(&mut rng);
    let mut entries = Vec::with_capacity(order.len() * n_clusters as usize);
    for (pos, &geometry_id) in order.iter().enumerate() {
        let split = if pos < counts[0] {
            Split::Train
        } else if pos < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
        for cluster in 1..=n_clusters {
            let pool = &by_cluster[&cluster];
            let material_id = pool[rng.random_range(0..pool.len())];
            entries.push(DoeEntry {
                id: entries.len() as u32,
                geometry_id,
                material_id,
                cluster,
                split,
            });
        }
    }
    Ok(entries)
}

pub fn split_sizes(entries: &[DoeEntry]) -> [usize; 3] {
    let mut c = [0; 3];
    for e in entries {
        c[e.split as usize] += 1;
    }
    c
}

/// Checks the design-matrix invariants: unique ids, unique (geometry,
/// cluster) pairs, and each geometry confined to a single split.
pub fn validate_doe(entries: &[DoeEntry], n_clusters: u8) -> Result<()> {
    let mut ids = std::collections::BTreeSet::new();
    let mut per_geometry: BTreeMap<u32, (Split, Vec<u8>)> = BTreeMap::new();
    for e in entries {
        if !ids.insert(e.id) {
            return Err(Error::data(format!("duplicate DoE id {}", e.id)));
        }
        let slot = per_geometry.entry(e.geometry_id).or_insert((e.split, Vec::new()));
        if slot.0 != e.split {
            return Err(Error::data(format!("geometry {} appears in several splits", e.geometry_id)));
        }
        slot.1.push(e.cluster);
    }
    for (g, (_, mut clusters)) in per_geometry {
        clusters.sort_unstable();
        let want: Vec<u8> = (1..=n_clusters).collect();
        if clusters != want {
            return Err(Error::data(format!(
                "geometry {g} covers clusters {clusters:?}, expected one of each 1..={n_clusters}"
            )));
        }
    }
    Ok(())
}

pub const DOE_FILE: &str = "doe.csv";

pub fn write_doe_csv(path: &Path, entries: &[DoeEntry]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in entries {
        w.serialize(e).map_err(|err| Error::csv(path, err))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|err| Error::io(path, err.into_error()))?;
    crate::grid::write_atomic(path, &bytes)
}

pub fn read_doe_csv(path: &Path) -> Result<Vec<DoeEntry>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<DoeEntry>, _>>()
        .map_err(|e| Error::csv(path, e))
}
