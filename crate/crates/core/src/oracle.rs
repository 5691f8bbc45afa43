//! Synthetic forming oracle.
//!
//! A cheap analytic map from (height-map, stress-strain curve) to the five
//! target fields. It stands in for a stamping simulation so the learning
//! pipeline can be trained and tested end to end; the formulas are smooth and
//! monotone in slope and hardening but make no claim of physical fidelity.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::HeightMap;
use crate::grid::{Grid, Mask};
use crate::materials::StressStrainCurve;

/// Offset added to strains before taking logs when fitting the hardening slope.
pub const LOG_STRAIN_OFFSET: f64 = 1e-4;
pub const HARDENING_FIT_POINTS: usize = 80;
pub const N_HAT_RANGE: (f64, f64) = (0.05, 0.5);

const THINNING_LIMIT: f64 = 1.0 - 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Thinning,
    Major,
    Minor,
    Plastic,
    Displacement,
}

impl Field {
    pub const ALL: [Field; 5] = [
        Field::Thinning,
        Field::Major,
        Field::Minor,
        Field::Plastic,
        Field::Displacement,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Field::Thinning => "thinning",
            Field::Major => "major",
            Field::Minor => "minor",
            Field::Plastic => "plastic",
            Field::Displacement => "displacement",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Field::Displacement => 3,
            _ => 1,
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Field::Displacement => "mm",
            _ => "-",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.f32", self.as_str())
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Field {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "thinning" => Ok(Field::Thinning),
            "major" | "major_strain" => Ok(Field::Major),
            "minor" | "minor_strain" => Ok(Field::Minor),
            "plastic" | "plastic_strain" => Ok(Field::Plastic),
            "displacement" => Ok(Field::Displacement),
            other => Err(Error::config(format!(
                "unknown field '{other}' (expected thinning, major, minor, plastic or displacement)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub blank_thickness_mm: f64,
    pub friction: f64,
    pub alpha_t: f64,
    pub beta_m: f64,
    pub nu_eff: f64,
    pub draw_coeff: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            blank_thickness_mm: 1.6,
            friction: 0.12,
            alpha_t: 0.3,
            beta_m: 1.0,
            nu_eff: 0.5,
            draw_coeff: 0.02,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("blank_thickness_mm", self.blank_thickness_mm),
            ("friction", self.friction),
            ("alpha_t", self.alpha_t),
            ("beta_m", self.beta_m),
            ("nu_eff", self.nu_eff),
            ("draw_coeff", self.draw_coeff),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("oracle constant {name} must be positive, got {v}")));
            }
        }
        if self.nu_eff > 0.5 {
            return Err(Error::config(format!("nu_eff must lie in (0, 0.5], got {}", self.nu_eff)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaterialFeatures {
    pub sigma_y: f64,
    pub sigma_u: f64,
    pub n_hat: f64,
}

pub fn material_features(curve: &StressStrainCurve) -> Result<MaterialFeatures> {
    curve.validate()?;
    let sigma_y = curve.stresses[0];
    let sigma_u = curve.stresses.iter().copied().fold(f64::MIN, f64::max);
    let start = curve.strains.len().saturating_sub(HARDENING_FIT_POINTS);
    let xs: Vec<f64> = curve.strains[start..]
        .iter()
        .map(|e| (e + LOG_STRAIN_OFFSET).ln())
        .collect();
    let ys: Vec<f64> = curve.stresses[start..].iter().map(|s| s.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    Ok(MaterialFeatures {
        sigma_y,
        sigma_u,
        n_hat: slope.clamp(N_HAT_RANGE.0, N_HAT_RANGE.1),
    })
}

/// Height-map, curve and the five target fields for one DoE entry.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    pub sample_id: u32,
    pub heightmap: HeightMap,
    pub curve: StressStrainCurve,
    pub thinning: Grid,
    pub major_strain: Grid,
    pub minor_strain: Grid,
    pub plastic_strain: Grid,
    pub displacement: Grid,
}

impl FieldSample {
    pub fn valid_mask(&self) -> &Mask {
        &self.heightmap.valid_mask
    }

    pub fn field(&self, field: Field) -> &Grid {
        match field {
            Field::Thinning => &self.thinning,
            Field::Major => &self.major_strain,
            Field::Minor => &self.minor_strain,
            Field::Plastic => &self.plastic_strain,
            Field::Displacement => &self.displacement,
        }
    }

    /// Checks the sample-level invariants; returns the first violation.
    pub fn check_invariants(&self) -> Result<()> {
        let mask = self.valid_mask();
        for field in Field::ALL {
            let g = self.field(field);
            if g.height() != mask.height() || g.width() != mask.width() || g.channels() != field.channels() {
                return Err(Error::shape(format!("{field} grid does not match the mask")));
            }
            for (px, &valid) in g.as_slice().chunks_exact(g.channels()).zip(mask.cells()) {
                if px.iter().any(|v| !v.is_finite()) {
                    return Err(Error::data(format!("{field} holds a non-finite value")));
                }
                if !valid && px.iter().any(|&v| v != 0.0) {
                    return Err(Error::data(format!("{field} is non-zero outside the mask")));
                }
            }
        }
        for i in 0..mask.cells().len() {
            let t = self.thinning.as_slice()[i];
            if !(t > -1.0 && t < 1.0) {
                return Err(Error::data(format!("thinning {t} outside (-1, 1)")));
            }
            if self.plastic_strain.as_slice()[i] < 0.0 {
                return Err(Error::data("negative plastic strain"));
            }
            if self.major_strain.as_slice()[i] < self.minor_strain.as_slice()[i] {
                return Err(Error::data("major strain below minor strain"));
            }
        }
        Ok(())
    }
}

pub fn generate_fields(hm: &HeightMap, curve: &StressStrainCurve, cfg: &OracleConfig, sample_id: u32) -> Result<FieldSample> {
    cfg.validate()?;
    let mask = &hm.valid_mask;
    let n_valid = mask.count();
    if n_valid == 0 {
        return Err(Error::data(format!(
            "geometry {} has an empty valid mask",
            hm.geometry_id
        )));
    }
    let feats = material_features(curve)?;
    let (h, w) = (hm.height(), hm.width());
    let slope = hm.slope();
    let lap = hm.laplacian();
    let pitch = hm.pixel_pitch_mm;

    let mut xc = 0.0;
    let mut yc = 0.0;
    let mut s_sum = 0.0;
    for row in 0..h {
        for col in 0..w {
            if mask.get(row, col) {
                xc += (col as f64 + 0.5) * pitch;
                yc += (row as f64 + 0.5) * pitch;
                s_sum += slope.get(row, col, 0);
            }
        }
    }
    let nv = n_valid as f64;
    let (xc, yc, s_bar) = (xc / nv, yc / nv, s_sum / nv);
    let draw = cfg.draw_coeff * s_bar * (feats.sigma_y / feats.sigma_u);

    let mut thinning = Grid::zeros(h, w, 1);
    let mut major = Grid::zeros(h, w, 1);
    let mut minor = Grid::zeros(h, w, 1);
    let mut plastic = Grid::zeros(h, w, 1);
    let mut disp = Grid::zeros(h, w, 3);
    for row in 0..h {
        for col in 0..w {
            if !mask.get(row, col) {
                continue;
            }
            let s = slope.get(row, col, 0);
            let k = lap.get(row, col, 0).abs();
            let t = (cfg.alpha_t * s / (1.0 + s) * (1.0 - feats.n_hat) * (1.0 + k / (1.0 + k)) / 2.0)
                .clamp(-THINNING_LIMIT, THINNING_LIMIT);
            let ma = cfg.beta_m * t / (1.0 - t);
            let mi = -cfg.nu_eff * ma;
            let pe = ((2.0 / 3.0) * (ma * ma + mi * mi + (ma + mi) * (ma + mi))).sqrt();
            thinning.set(row, col, 0, t);
            major.set(row, col, 0, ma);
            minor.set(row, col, 0, mi);
            plastic.set(row, col, 0, pe);
            let x = (col as f64 + 0.5) * pitch;
            let y = (row as f64 + 0.5) * pitch;
            disp.set(row, col, 0, -draw * (x - xc));
            disp.set(row, col, 1, -draw * (y - yc));
            disp.set(row, col, 2, -hm.heights.get(row, col, 0));
        }
    }
    Ok(FieldSample {
        sample_id,
        heightmap: hm.clone(),
        curve: curve.clone(),
        thinning,
        major_strain: major,
        minor_strain: minor,
        plastic_strain: plastic,
        displacement: disp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rasterize_panel, GeometryParams, RasterSpec};
    use crate::materials::{Provenance, CURVE_LEN};

    fn curve_from(f: impl Fn(f64) -> f64, eps_max: f64) -> StressStrainCurve {
        let strains: Vec<f64> = (0..CURVE_LEN).map(|i| eps_max * i as f64 / (CURVE_LEN - 1) as f64).collect();
        let stresses = strains.iter().map(|&e| f(e)).collect();
        StressStrainCurve {
            strains,
            stresses,
            material_id: 0,
            cluster: 1,
            provenance: Provenance::Seed,
        }
    }

    #[test]
    fn constant_curve_clips_to_floor() {
        let f = material_features(&curve_from(|_| 300.0, 0.5)).unwrap();
        assert_eq!(f.sigma_y, 300.0);
        assert_eq!(f.sigma_u, 300.0);
        assert_eq!(f.n_hat, 0.05);
    }

    #[test]
    fn power_law_slope() {
        // pure power law vanishes at zero strain; shift the start slightly
        let c = curve_from(|e| 500.0 * (e + 1e-4).powf(0.2), 0.5);
        let f = material_features(&c).unwrap();
        assert!((f.n_hat - 0.2).abs() < 0.01, "{}", f.n_hat);
    }

    #[test]
    fn stress_scaling_keeps_slope() {
        let c = curve_from(|e| 300.0 + 600.0 * e.powf(0.25), 0.5);
        let mut scaled = c.clone();
        scaled.stresses.iter_mut().for_each(|s| *s *= 1.1);
        let (a, b) = (material_features(&c).unwrap(), material_features(&scaled).unwrap());
        assert!((a.n_hat - b.n_hat).abs() < 1e-12);
        assert!((b.sigma_y - 1.1 * a.sigma_y).abs() < 1e-9);
        assert!((b.sigma_u - 1.1 * a.sigma_u).abs() < 1e-9);
    }

    #[test]
    fn flat_plate_gives_zero_fields() {
        let mut hm = rasterize_panel(&GeometryParams::midpoint(0), &RasterSpec::desk()).unwrap();
        hm.heights.as_mut_slice().fill(0.0);
        let s = generate_fields(&hm, &curve_from(|e| 300.0 + 500.0 * e, 0.5), &OracleConfig::default(), 0).unwrap();
        for field in Field::ALL {
            assert!(s.field(field).as_slice().iter().all(|&v| v == 0.0), "{field}");
        }
    }

    #[test]
    fn softer_hardening_thins_more() {
        let hm = rasterize_panel(&GeometryParams::midpoint(0), &RasterSpec::desk()).unwrap();
        let cfg = OracleConfig::default();
        let lo = curve_from(|e| 300.0 * (e + 1e-4).powf(0.1), 0.5);
        let hi = curve_from(|e| 300.0 * (e + 1e-4).powf(0.3), 0.5);
        let max = |c: &StressStrainCurve| {
            let s = generate_fields(&hm, c, &cfg, 0).unwrap();
            s.thinning.as_slice().iter().copied().fold(f64::MIN, f64::max)
        };
        assert!(max(&lo) > max(&hi));
    }

    #[test]
    fn minor_tracks_major_and_invariants_hold() {
        let hm = rasterize_panel(&GeometryParams::midpoint(3), &RasterSpec::desk()).unwrap();
        let cfg = OracleConfig::default();
        let s = generate_fields(&hm, &curve_from(|e| 250.0 + 700.0 * e.powf(0.2), 0.5), &cfg, 9).unwrap();
        for (ma, mi) in s.major_strain.as_slice().iter().zip(s.minor_strain.as_slice()) {
            assert_eq!(*mi, -cfg.nu_eff * ma);
        }
        s.check_invariants().unwrap();
        assert!(s.thinning.as_slice().iter().any(|&t| t > 0.0));
    }

    #[test]
    fn empty_mask_is_an_error() {
        let mut hm = rasterize_panel(&GeometryParams::midpoint(0), &RasterSpec::desk()).unwrap();
        hm.valid_mask = Mask::empty(hm.height(), hm.width());
        assert!(generate_fields(&hm, &curve_from(|_| 300.0, 0.5), &OracleConfig::default(), 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(OracleConfig::default().validate().is_ok());
        let bad = OracleConfig {
            nu_eff: 0.6,
            ..Default::default()
        };
        assert!(bad.validate().unwrap_err().is_config());
    }

    #[test]
    fn field_names_round_trip() {
        for f in Field::ALL {
            assert_eq!(f.as_str().parse::<Field>().unwrap(), f);
        }
        assert!("stress".parse::<Field>().is_err());
    }
}
