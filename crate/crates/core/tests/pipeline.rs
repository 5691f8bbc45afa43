use std::collections::BTreeSet;
use std::path::Path;

use stamp_core::dataset::{materialize_dataset, Dataset, MaterializeOptions};
use stamp_core::doe::{build_doe, read_doe_csv, split_sizes, validate_doe, write_doe_csv, Split, DEFAULT_SPLIT};
use stamp_core::geometry::{lhs_sample, design_bounds, write_geometry_set, RasterSpec};
use stamp_core::materials::{build_family, curve_file_name, read_material_manifest, write_material_set, MaterialFamily};
use stamp_core::oracle::Field;
use stamp_core::Error;

fn build_assets(root: &Path, n_geometries: usize, seed: u64) -> Vec<stamp_core::doe::DoeEntry> {
    let curves = build_family(MaterialFamily::Aluminium, None, seed).unwrap();
    write_material_set(&root.join("materials"), MaterialFamily::Aluminium, &curves).unwrap();
    let geoms = lhs_sample(n_geometries, &design_bounds(), seed).unwrap();
    write_geometry_set(&root.join("geometries"), &geoms, &RasterSpec::new(32, 32, 2.0)).unwrap();
    let records = read_material_manifest(&root.join("materials")).unwrap();
    let ids: Vec<u32> = geoms.iter().map(|g| g.geometry_id).collect();
    build_doe(&ids, &records, DEFAULT_SPLIT, 5, seed).unwrap()
}

#[test]
fn toy_dataset_is_complete_and_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let doe_a = build_assets(a.path(), 20, 5);
    let doe_b = build_assets(b.path(), 20, 5);
    assert_eq!(doe_a, doe_b);
    validate_doe(&doe_a, 5).unwrap();
    assert_eq!(split_sizes(&doe_a), [80, 10, 10]);

    write_doe_csv(&a.path().join("doe.csv"), &doe_a).unwrap();
    write_doe_csv(&b.path().join("doe.csv"), &doe_b).unwrap();
    assert_eq!(
        std::fs::read(a.path().join("doe.csv")).unwrap(),
        std::fs::read(b.path().join("doe.csv")).unwrap()
    );
    assert_eq!(read_doe_csv(&a.path().join("doe.csv")).unwrap(), doe_a);

    let opts = MaterializeOptions {
        threads: Some(2),
        ..Default::default()
    };
    let ma = materialize_dataset(&doe_a, &a.path().join("geometries"), &a.path().join("materials"), &a.path().join("data"), &opts).unwrap();
    let mb = materialize_dataset(&doe_b, &b.path().join("geometries"), &b.path().join("materials"), &b.path().join("data"), &MaterializeOptions::default()).unwrap();
    assert_eq!(ma.samples.len(), 100);
    assert_eq!((ma.counts.train, ma.counts.val, ma.counts.test), (80, 10, 10));
    assert_eq!(ma.content_hash, mb.content_hash);

    let ds = Dataset::open(&a.path().join("data")).unwrap();
    assert!(ds.verify_hash().unwrap());
    let geoms = |s: Split| -> BTreeSet<u32> {
        ds.manifest.samples.iter().filter(|m| m.split == s).map(|m| m.geometry_id).collect()
    };
    assert!(geoms(Split::Train).is_disjoint(&geoms(Split::Val)));
    assert!(geoms(Split::Train).is_disjoint(&geoms(Split::Test)));
    assert!(geoms(Split::Val).is_disjoint(&geoms(Split::Test)));

    let id = ds.ids(Split::Test)[0];
    let hm = ds.load_heightmap(id).unwrap();
    let disp = ds.load_field(id, Field::Displacement).unwrap();
    assert_eq!((disp.height(), disp.width(), disp.channels()), (32, 32, 3));
    for (d, h) in disp.as_slice().chunks_exact(3).zip(hm.heights.as_slice()) {
        assert_eq!(d[2] as f32, -(*h as f32));
    }
    assert_eq!(ds.load_curve(id).unwrap().strains.len(), 100);
}

#[test]
fn missing_curve_file_names_material() {
    let dir = tempfile::tempdir().unwrap();
    let doe = build_assets(dir.path(), 4, 8);
    let victim = doe[2].material_id;
    std::fs::remove_file(dir.path().join("materials").join(curve_file_name(victim))).unwrap();
    let err = materialize_dataset(
        &doe,
        &dir.path().join("geometries"),
        &dir.path().join("materials"),
        &dir.path().join("data"),
        &MaterializeOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert!(err.to_string().contains(&format!("material_id {victim}")), "{err}");
    assert!(!dir.path().join("data").join("dataset.json").exists());
}

#[test]
fn missing_geometry_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let doe = build_assets(dir.path(), 4, 9);
    let gid = doe[0].geometry_id;
    std::fs::remove_file(dir.path().join("geometries").join(format!("geom_{gid:04}.f32"))).unwrap();
    let err = materialize_dataset(
        &doe,
        &dir.path().join("geometries"),
        &dir.path().join("materials"),
        &dir.path().join("data"),
        &MaterializeOptions::default(),
    )
    .unwrap_err();
    assert!(err.to_string().contains(&format!("geometry_id {gid}")), "{err}");
}
