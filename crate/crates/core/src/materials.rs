//! Stress-strain curve synthesis, resampling, augmentation and cluster balancing.
//!
//! Seed curves are synthetic Hollomon curves `σ = K·εⁿ + σ_y`. The parameter
//! ranges below are invented stand-ins for a real material database:
//!
//! | family    | σ_y (MPa) | K (MPa)    | n          | strain range |
//! |-----------|-----------|------------|------------|--------------|
//! | steel     | 200 – 900 | 400 – 1500 | 0.05 – 0.35| 0 – 0.5      |
//! | aluminium | 80 – 350  | 150 – 600  | 0.05 – 0.30| 0 – 0.35     |
//!
//! Each range is split into five grade bands so that seeds form separable
//! families with deliberately unbalanced populations; the balancing stage then
//! equalises them.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of strain levels every curve is resampled to.
pub const CURVE_LEN: usize = 100;
pub const DEFAULT_CLUSTERS: usize = 5;
/// Per-cluster size of the balanced intermediate steel set (5 × 40 = 200).
pub const STEEL_INTERMEDIATE_PER_CLUSTER: usize = 40;
/// Per-cluster size of the final steel set (5 × 120 = 600).
pub const STEEL_FINAL_PER_CLUSTER: usize = 120;
pub const STEEL_SEED_CURVES: usize = 101;
pub const ALUMINIUM_SEED_CURVES: usize = 11;

const GRADE_WEIGHTS: [f64; 5] = [0.37, 0.27, 0.18, 0.12, 0.06];
const JITTER: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaterialFamily {
    Steel,
    Aluminium,
}

impl MaterialFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            MaterialFamily::Steel => "steel",
            MaterialFamily::Aluminium => "aluminium",
        }
    }

    fn ranges(self) -> HollomonRanges {
        match self {
            MaterialFamily::Steel => HollomonRanges {
                yield_mpa: (200.0, 900.0),
                strength_mpa: (400.0, 1500.0),
                exponent: (0.05, 0.35),
                max_strain: 0.5,
            },
            MaterialFamily::Aluminium => HollomonRanges {
                yield_mpa: (80.0, 350.0),
                strength_mpa: (150.0, 600.0),
                exponent: (0.05, 0.30),
                max_strain: 0.35,
            },
        }
    }
}

impl fmt::Display for MaterialFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaterialFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "steel" => Ok(MaterialFamily::Steel),
            "aluminium" | "aluminum" => Ok(MaterialFamily::Aluminium),
            other => Err(Error::config(format!(
                "unknown material family '{other}' (expected steel or aluminium)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct HollomonRanges {
    yield_mpa: (f64, f64),
    strength_mpa: (f64, f64),
    exponent: (f64, f64),
    max_strain: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Seed,
    Scaled,
    Upsampled,
}

/// A material response sampled at [`CURVE_LEN`] strain levels.
///
/// `cluster` is 0 until a clustering stage assigns a label in `1..=k`.
#[derive(Debug, Clone, PartialEq)]
pub struct StressStrainCurve {
    pub strains: Vec<f64>,
    pub stresses: Vec<f64>,
    pub material_id: u32,
    pub cluster: u8,
    pub provenance: Provenance,
}

impl StressStrainCurve {
    pub fn validate(&self) -> Result<()> {
        if self.strains.len() != CURVE_LEN || self.stresses.len() != CURVE_LEN {
            return Err(Error::data(format!(
                "curve {} has {} strains / {} stresses, expected {CURVE_LEN}",
                self.material_id,
                self.strains.len(),
                self.stresses.len()
            )));
        }
        if self.strains[0] != 0.0 {
            return Err(Error::data(format!(
                "curve {} starts at strain {} instead of 0",
                self.material_id, self.strains[0]
            )));
        }
        if self.strains.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::data(format!(
                "curve {} strains are not strictly increasing",
                self.material_id
            )));
        }
        if self.stresses.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::data(format!(
                "curve {} has a non-positive or non-finite stress",
                self.material_id
            )));
        }
        Ok(())
    }

    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.strains.iter().copied().zip(self.stresses.iter().copied())
    }

    fn scaled(&self, factor: f64, provenance: Provenance) -> Self {
        Self {
            strains: self.strains.clone(),
            stresses: self.stresses.iter().map(|s| s * factor).collect(),
            material_id: self.material_id,
            cluster: self.cluster,
            provenance,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(CURVE_LEN * 24);
        out.push_str("strain,stress\n");
        for (e, s) in self.points() {
            out.push_str(&format!("{e},{s}\n"));
        }
        crate::grid::write_atomic(path, out.as_bytes())
    }

    /// Reads a `strain,stress` CSV and resamples it onto the standard grid.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let raw = read_curve_points(path)?;
        resample_curve(&raw)
    }
}

pub fn read_curve_points(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut raw = Vec::new();
    for record in reader.deserialize::<(f64, f64)>() {
        raw.push(record.map_err(|e| Error::csv(path, e))?);
    }
    Ok(raw)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveFamilyConfig {
    pub n_seed_curves: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub scale_step: f64,
    pub n_clusters: usize,
    pub target_per_cluster: usize,
    pub rng_seed: u64,
}

impl CurveFamilyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 {
            return Err(Error::config("n_clusters must be at least 1"));
        }
        scale_factors(self.scale_min, self.scale_max, self.scale_step).map(|_| ())
    }
}

/// Largest-remainder allocation of `n` items over `weights`.
pub fn largest_remainder(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // stable sort keeps earlier entries first on equal remainders
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    for &i in order.iter().take(n - assigned) {
        counts[i] += 1;
    }
    counts
}

pub fn synthesize_seed_curves(
    family: MaterialFamily,
    n: usize,
    rng_seed: u64,
) -> Result<Vec<StressStrainCurve>> {
    if n == 0 {
        return Err(Error::config("at least one seed curve is required"));
    }
    let ranges = family.ranges();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let counts = largest_remainder(n, &GRADE_WEIGHTS);
    let mut grades: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(g, &c)| std::iter::repeat_n(g, c))
        .collect();
    grades.shuffle(&mut rng);

    let bands = GRADE_WEIGHTS.len() as f64;
    // each grade draws from the central 60% of its band; stronger grades harden less
    let band_sample = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64), band: usize| {
        let width = (hi - lo) / bands;
        let start = lo + width * (band as f64 + 0.2);
        start + rng.random::<f64>() * width * 0.6
    };

    let strains: Vec<f64> = uniform_strains(0.0, ranges.max_strain);
    let curves = grades
        .into_iter()
        .enumerate()
        .map(|(id, grade)| {
            let sigma_y = band_sample(&mut rng, ranges.yield_mpa, grade);
            let k = band_sample(&mut rng, ranges.strength_mpa, grade);
            let n_h = band_sample(&mut rng, ranges.exponent, GRADE_WEIGHTS.len() - 1 - grade);
            let stresses = strains.iter().map(|&e| k * e.powf(n_h) + sigma_y).collect();
            StressStrainCurve {
                strains: strains.clone(),
                stresses,
                material_id: id as u32,
                cluster: 0,
                provenance: Provenance::Seed,
            }
        })
        .collect::<Vec<_>>();
    for c in &curves {
        c.validate()?;
    }
    Ok(curves)
}

fn uniform_strains(lo: f64, hi: f64) -> Vec<f64> {
    let last = (CURVE_LEN - 1) as f64;
    let mut strains: Vec<f64> = (0..CURVE_LEN)
        .map(|i| lo + (hi - lo) * (i as f64 / last))
        .collect();
    strains[CURVE_LEN - 1] = hi;
    strains
}

/// Piecewise-linear resampling onto [`CURVE_LEN`] uniform strains spanning the
/// raw range. Raw knots that coincide with output strains are copied exactly.
pub fn resample_curve(raw: &[(f64, f64)]) -> Result<StressStrainCurve> {
    if raw.len() < 2 {
        return Err(Error::data(format!(
            "a curve needs at least 2 points, got {}",
            raw.len()
        )));
    }
    if raw.iter().any(|(e, s)| !e.is_finite() || !s.is_finite()) {
        return Err(Error::data("curve contains non-finite values"));
    }
    if raw.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(Error::data("curve strains must be strictly increasing"));
    }
    let lo = raw[0].0;
    let hi = raw[raw.len() - 1].0;
    let strains = uniform_strains(lo, hi);
    let mut seg = 0;
    let stresses = strains
        .iter()
        .map(|&e| {
            while seg + 2 < raw.len() && e > raw[seg + 1].0 {
                seg += 1;
            }
            let (e0, s0) = raw[seg];
            let (e1, s1) = raw[seg + 1];
            if e == e0 {
                s0
            } else if e == e1 {
                s1
            } else {
                s0 + (s1 - s0) * (e - e0) / (e1 - e0)
            }
        })
        .collect();
    let curve = StressStrainCurve {
        strains,
        stresses,
        material_id: 0,
        cluster: 0,
        provenance: Provenance::Seed,
    };
    curve.validate()?;
    Ok(curve)
}

/// Multiplicative factors `1 + scale_min, 1 + scale_min + step, …, 1 + scale_max`
/// with the identity factor removed.
pub fn scale_factors(scale_min: f64, scale_max: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::config(format!("scale step must be positive, got {step}")));
    }
    if !(scale_max >= scale_min) {
        return Err(Error::config("scale_max must not be below scale_min"));
    }
    let span = (scale_max - scale_min) / step;
    let steps = span.round();
    if (span - steps).abs() > 1e-9 {
        return Err(Error::config(format!(
            "scale step {step} does not divide [{scale_min}, {scale_max}] evenly"
        )));
    }
    let base = 1.0 + scale_min;
    Ok((0..=steps as usize)
        .map(|i| base + i as f64 * step)
        .filter(|f| (f - 1.0).abs() > 1e-12)
        .collect())
}

pub fn scale_augment(
    seeds: &[StressStrainCurve],
    scale_min: f64,
    scale_max: f64,
    step: f64,
) -> Result<Vec<StressStrainCurve>> {
    if seeds.is_empty() {
        return Err(Error::config("scale augmentation needs at least one seed curve"));
    }
    let factors = scale_factors(scale_min, scale_max, step)?;
    Ok(seeds
        .iter()
        .flat_map(|seed| factors.iter().map(move |&f| seed.scaled(f, Provenance::Scaled)))
        .collect())
}

/// Labels each curve with a cluster in `1..=k` using k-means on the stress
/// vectors. Labels are ordered by increasing mean centroid stress so that the
/// numbering does not depend on initialisation.
pub fn assign_clusters(curves: &[StressStrainCurve], k: usize, rng_seed: u64) -> Result<Vec<u8>> {
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    if k > u8::MAX as usize {
        return Err(Error::config(format!("k = {k} exceeds the supported cluster count")));
    }
    if curves.len() < k {
        return Err(Error::config(format!(
            "{} curves cannot form {k} clusters",
            curves.len()
        )));
    }
    let points: Vec<&[f64]> = curves.iter().map(|c| c.stresses.as_slice()).collect();
    let result = kmeans(&points, k, rng_seed);
    let mut order: Vec<usize> = (0..k).collect();
    let level = |c: usize| result.centroids[c].iter().sum::<f64>();
    order.sort_by(|&a, &b| level(a).partial_cmp(&level(b)).unwrap());
    let mut relabel = vec![0u8; k];
    for (rank, &c) in order.iter().enumerate() {
        relabel[c] = (rank + 1) as u8;
    }
    Ok(result.labels.iter().map(|&l| relabel[l]).collect())
}

/// Clusters `curves` and upsamples every cluster to `target_per_cluster` by
/// duplicating random members with a ±1% multiplicative stress jitter.
///
/// Output is ordered by cluster; `material_id` is reassigned to the output
/// position.
pub fn cluster_and_balance(
    curves: &[StressStrainCurve],
    k: usize,
    target_per_cluster: usize,
    rng_seed: u64,
) -> Result<Vec<StressStrainCurve>> {
    let labels = assign_clusters(curves, k, rng_seed)?;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        members[l as usize - 1].push(i);
    }
    let largest = members.iter().map(Vec::len).max().unwrap_or(0);
    if target_per_cluster < largest {
        return Err(Error::config(format!(
            "target of {target_per_cluster} per cluster is smaller than the largest cluster ({largest})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut out = Vec::with_capacity(k * target_per_cluster);
    for (c, idx) in members.iter().enumerate() {
        let label = (c + 1) as u8;
        for &i in idx {
            let mut curve = curves[i].clone();
            curve.cluster = label;
            out.push(curve);
        }
        for _ in idx.len()..target_per_cluster {
            let pick = idx[rng.random_range(0..idx.len())];
            let factor = rng.random_range(1.0 - JITTER..=1.0 + JITTER);
            let mut curve = curves[pick].scaled(factor, Provenance::Upsampled);
            curve.cluster = label;
            out.push(curve);
        }
    }
    for (id, curve) in out.iter_mut().enumerate() {
        curve.material_id = id as u32;
    }
    Ok(out)
}

/// Full material set for one family: steel goes 101 → 200 → 600 through two
/// balancing stages, aluminium goes 11 → 110 through scaling.
pub fn build_family(
    family: MaterialFamily,
    n_seeds: Option<usize>,
    rng_seed: u64,
) -> Result<Vec<StressStrainCurve>> {
    match family {
        MaterialFamily::Steel => {
            let seeds = synthesize_seed_curves(family, n_seeds.unwrap_or(STEEL_SEED_CURVES), rng_seed)?;
            let labels = assign_clusters(&seeds, DEFAULT_CLUSTERS, rng_seed)?;
            let largest = (1..=DEFAULT_CLUSTERS as u8)
                .map(|c| labels.iter().filter(|&&l| l == c).count())
                .max()
                .unwrap_or(0);
            let intermediate_target = STEEL_INTERMEDIATE_PER_CLUSTER.max(largest);
            if intermediate_target != STEEL_INTERMEDIATE_PER_CLUSTER {
                log::warn!(
                    "largest seed cluster has {largest} curves; intermediate target raised from {STEEL_INTERMEDIATE_PER_CLUSTER}"
                );
            }
            let intermediate =
                cluster_and_balance(&seeds, DEFAULT_CLUSTERS, intermediate_target, rng_seed)?;
            cluster_and_balance(
                &intermediate,
                DEFAULT_CLUSTERS,
                STEEL_FINAL_PER_CLUSTER.max(intermediate_target),
                rng_seed.wrapping_add(1),
            )
        }
        MaterialFamily::Aluminium => {
            let seeds = synthesize_seed_curves(family, n_seeds.unwrap_or(ALUMINIUM_SEED_CURVES), rng_seed)?;
            let mut scaled = scale_augment(&seeds, -0.10, 0.10, 0.02)?;
            let labels = assign_clusters(&scaled, DEFAULT_CLUSTERS, rng_seed)?;
            for (curve, label) in scaled.iter_mut().zip(labels) {
                curve.cluster = label;
            }
            // stable: keeps seed order inside each cluster
            scaled.sort_by_key(|c| c.cluster);
            for (id, curve) in scaled.iter_mut().enumerate() {
                curve.material_id = id as u32;
            }
            Ok(scaled)
        }
    }
}

/// One entry of `materials.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialRecord {
    pub material_id: u32,
    pub cluster: u8,
    pub provenance: Provenance,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<MaterialFamily>,
}

pub const MATERIALS_MANIFEST: &str = "materials.json";

pub fn curve_file_name(material_id: u32) -> String {
    format!("material_{material_id:04}.csv")
}

/// Writes one CSV per curve plus the `materials.json` manifest.
pub fn write_material_set(
    dir: &Path,
    family: MaterialFamily,
    curves: &[StressStrainCurve],
) -> Result<Vec<MaterialRecord>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(curves.len());
    for curve in curves {
        let name = curve_file_name(curve.material_id);
        curve.write_csv(&dir.join(&name))?;
        records.push(MaterialRecord {
            material_id: curve.material_id,
            cluster: curve.cluster,
            provenance: curve.provenance,
            path: name,
            family: Some(family),
        });
    }
    crate::grid::write_json(&dir.join(MATERIALS_MANIFEST), &records)?;
    Ok(records)
}

pub fn read_material_manifest(dir: &Path) -> Result<Vec<MaterialRecord>> {
    crate::grid::read_json(&dir.join(MATERIALS_MANIFEST))
}

/// Loads the curve behind a manifest record, restoring its id, cluster and provenance.
pub fn load_material(dir: &Path, record: &MaterialRecord) -> Result<StressStrainCurve> {
    let path = dir.join(&record.path);
    if !path.exists() {
        return Err(Error::data(format!(
            "curve file for material_id {} is missing ({})",
            record.material_id,
            path.display()
        )));
    }
    let mut curve = StressStrainCurve::read_csv(&path)?;
    curve.material_id = record.material_id;
    curve.cluster = record.cluster;
    curve.provenance = record.provenance;
    Ok(curve)
}

struct KMeansResult {
    labels: Vec<usize>,
    centroids: Vec<Vec<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd iterations from k-means++ seeds; the best of several restarts wins.
fn kmeans(points: &[&[f64]], k: usize, rng_seed: u64) -> KMeansResult {
    const RESTARTS: usize = 8;
    const MAX_ITER: usize = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let dim = points[0].len();
    let mut best: Option<(f64, KMeansResult)> = None;

    for _ in 0..RESTARTS {
        let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
        centroids.push(points[rng.random_range(0..points.len())].to_vec());
        let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
        while centroids.len() < k {
            let total: f64 = d2.iter().sum();
            let next = if total > 0.0 {
                let mut target = rng.random::<f64>() * total;
                let mut chosen = points.len() - 1;
                for (i, &d) in d2.iter().enumerate() {
                    if target < d {
                        chosen = i;
                        break;
                    }
                    target -= d;
                }
                chosen
            } else {
                rng.random_range(0..points.len())
            };
            centroids.push(points[next].to_vec());
            for (d, p) in d2.iter_mut().zip(points) {
                *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
            }
        }

        let mut labels = vec![0usize; points.len()];
        for iter in 0..MAX_ITER {
            let mut changed = false;
            for (label, p) in labels.iter_mut().zip(points) {
                let nearest = (0..k)
                    .min_by(|&a, &b| {
                        sq_dist(p, &centroids[a])
                            .partial_cmp(&sq_dist(p, &centroids[b]))
                            .unwrap()
                    })
                    .unwrap();
                if *label != nearest {
                    *label = nearest;
                    changed = true;
                }
            }
            if !changed && iter > 0 {
                break;
            }
            let mut sums = vec![vec![0.0; dim]; k];
            let mut counts = vec![0usize; k];
            for (&l, p) in labels.iter().zip(points) {
                counts[l] += 1;
                for (s, x) in sums[l].iter_mut().zip(p.iter()) {
                    *s += x;
                }
            }
            for c in 0..k {
                if counts[c] > 0 {
                    centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
                } else {
                    // empty cluster: move it onto the point farthest from its centroid
                    let far = (0..points.len())
                        .max_by(|&a, &b| {
                            sq_dist(points[a], &centroids[labels[a]])
                                .partial_cmp(&sq_dist(points[b], &centroids[labels[b]]))
                                .unwrap()
                        })
                        .unwrap();
                    centroids[c] = points[far].to_vec();
                    labels[far] = c;
                }
            }
        }
        let inertia: f64 = labels
            .iter()
            .zip(points)
            .map(|(&l, p)| sq_dist(p, &centroids[l]))
            .sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, KMeansResult { labels, centroids }));
        }
    }
    best.expect("at least one restart").1
}
