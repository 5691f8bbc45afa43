use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stamp_core::geometry::{lhs_sample, rasterize_panel, design_bounds, RasterSpec};
use stamp_core::materials::{build_family, synthesize_seed_curves, MaterialFamily};
use stamp_core::metrics::{mse, representative_max, top_value_overlap};
use stamp_core::oracle::{generate_fields, Field, OracleConfig};
use stamp_core::{Grid, Mask};

fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Grid {
    Grid::from_vec(h, w, c, (0..h * w * c).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Mask {
    Mask::new(h, w, (0..h * w).map(|_| rng.random_bool(p)).collect()).unwrap()
}

fn sort_oracle(field: &Grid, mask: &Mask) -> f64 {
    let mut v: Vec<f64> = field
        .as_slice()
        .iter()
        .zip(mask.cells())
        .filter(|(_, &m)| m)
        .map(|(&x, _)| x)
        .collect();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k = ((v.len() as f64 * 0.001).floor() as usize).max(1);
    v[..k].iter().sum::<f64>() / k as f64
}

#[test]
fn representative_max_matches_sort_on_random_grids() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for i in 0..1000 {
        let (h, w) = if i % 2 == 0 { (64, 64) } else { (rng.random_range(1..80), rng.random_range(1..80)) };
        let g = random_grid(&mut rng, h, w, 1);
        let mut m = random_mask(&mut rng, h, w, 0.7);
        m.set(0, 0, true);
        assert_eq!(representative_max(&g, &m).unwrap(), sort_oracle(&g, &m));
    }
}

#[test]
fn overlap_categories_match_set_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let gt = random_grid(&mut rng, 40, 40, 1);
        let pd = random_grid(&mut rng, 40, 40, 1);
        let mask = random_mask(&mut rng, 40, 40, 0.9);
        let o = top_value_overlap(&gt, &pd, &mask, 0.01).unwrap();
        let k = (mask.count() as f64 * 0.01).floor() as usize;
        let top = |g: &Grid| -> std::collections::BTreeSet<usize> {
            let mut idx: Vec<usize> = (0..1600).filter(|&i| mask.cells()[i]).collect();
            idx.sort_by(|&a, &b| g.as_slice()[b].partial_cmp(&g.as_slice()[a]).unwrap().then(a.cmp(&b)));
            idx[..k].iter().copied().collect()
        };
        let (a, b) = (top(&gt), top(&pd));
        assert_eq!(o.overlap, a.intersection(&b).copied().collect::<Vec<_>>());
        assert_eq!(o.gt_only, a.difference(&b).copied().collect::<Vec<_>>());
        assert_eq!(o.pd_only, b.difference(&a).copied().collect::<Vec<_>>());
        let union = a.union(&b).count();
        assert_eq!(o.overlap.len() + o.gt_only.len() + o.pd_only.len(), union);
        assert_eq!(o.iou, a.intersection(&b).count() as f64 / union as f64);
    }
}

#[test]
fn mse_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_grid(&mut rng, 17, 23, 3);
    let b = random_grid(&mut rng, 17, 23, 3);
    let mut s = 0.0;
    for r in 0..17 {
        for c in 0..23 {
            for k in 0..3 {
                s += (a.get(r, c, k) - b.get(r, c, k)).powi(2);
            }
        }
    }
    assert!((mse(&a, &b).unwrap() - s / (17.0 * 23.0 * 3.0)).abs() < 1e-10);
}

#[test]
fn oracle_invariants_and_sensitivity() {
    let spec = RasterSpec::desk();
    let geoms: Vec<_> = lhs_sample(40, &design_bounds(), 4)
        .unwrap()
        .iter()
        .map(|g| rasterize_panel(g, &spec).unwrap())
        .collect();
    let curves = build_family(MaterialFamily::Aluminium, None, 4).unwrap();
    let cfg = OracleConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..1000 {
        let hm = &geoms[rng.random_range(0..geoms.len())];
        let curve = &curves[rng.random_range(0..curves.len())];
        let s = generate_fields(hm, curve, &cfg, i).unwrap();
        s.check_invariants().unwrap();
        if i < 5 {
            assert_eq!(s, generate_fields(hm, curve, &cfg, i).unwrap());
        }
    }
    // every geometry separates curves from different clusters
    let by_cluster: Vec<_> = (1..=5u8).map(|c| curves.iter().find(|m| m.cluster == c).unwrap()).collect();
    for hm in &geoms {
        for w in by_cluster.windows(2) {
            let a = generate_fields(hm, w[0], &cfg, 0).unwrap();
            let b = generate_fields(hm, w[1], &cfg, 0).unwrap();
            for f in Field::ALL {
                if f == Field::Displacement {
                    continue;
                }
                let d = a.field(f).as_slice().iter().zip(b.field(f).as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                assert!(d > 0.0, "{f} ignores material on geometry {}", hm.geometry_id);
            }
        }
    }
    // every curve separates distinct geometries
    for curve in curves.iter().step_by(11) {
        let a = generate_fields(&geoms[0], curve, &cfg, 0).unwrap();
        let b = generate_fields(&geoms[1], curve, &cfg, 0).unwrap();
        for f in Field::ALL {
            assert_ne!(a.field(f), b.field(f));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn seed_curves_satisfy_invariants(seed in any::<u64>(), n in 1usize..30, steel in any::<bool>()) {
        let family = if steel { MaterialFamily::Steel } else { MaterialFamily::Aluminium };
        for c in synthesize_seed_curves(family, n, seed).unwrap() {
            prop_assert!(c.validate().is_ok());
        }
    }

    #[test]
    fn representative_max_is_permutation_invariant_and_monotone(
        values in prop::collection::vec(-100.0f64..100.0, 1..3000),
        bump in prop::collection::vec(0.0f64..10.0, 3000),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let n = values.len();
        let g = Grid::from_vec(1, n, 1, values.clone()).unwrap();
        let mask = Mask::full(1, n);
        let base = representative_max(&g, &mask).unwrap();
        let mut shuffled = values.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let gs = Grid::from_vec(1, n, 1, shuffled).unwrap();
        prop_assert_eq!(representative_max(&gs, &mask).unwrap(), base);
        let raised: Vec<f64> = values.iter().zip(&bump).map(|(v, b)| v + b).collect();
        let gr = Grid::from_vec(1, n, 1, raised).unwrap();
        prop_assert!(representative_max(&gr, &mask).unwrap() >= base);
    }

    #[test]
    fn equal_maxima_give_equal_relative_error(scale in 0.5f64..2.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_grid(&mut rng, 10, 10, 1);
        let mask = Mask::full(10, 10);
        // two predictions sharing the top cell but differing elsewhere
        let mut pd1 = gt.clone();
        let top = representative_max(&gt, &mask).unwrap();
        for v in pd1.as_mut_slice() { if *v < top { *v *= scale.min(1.0); } }
        let mut pd2 = gt.clone();
        for v in pd2.as_mut_slice() { if *v < top { *v = top - 10.0; } }
        let a = stamp_core::metrics::relative_error(&gt, &pd1, &mask).unwrap();
        let b = stamp_core::metrics::relative_error(&gt, &pd2, &mask).unwrap();
        prop_assert_eq!(a.rel_err_pct, b.rel_err_pct);
    }
}
