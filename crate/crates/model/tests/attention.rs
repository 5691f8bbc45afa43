//! Windowed attention against the per-token reference.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stamp_model::layers::{window_partition, window_reverse, SwinBlock};
use stamp_model::reference::{reference_block, values};
use stamp_model::params::ParamStore;

fn randomised_block(
    resolution: (usize, usize),
    dim: usize,
    heads: usize,
    window: usize,
    shifted: bool,
    seed: u64,
) -> SwinBlock {
    let mut ps = ParamStore::new(seed, DType::F64, Device::Cpu);
    let block = SwinBlock::new(&mut ps, "blk", dim, heads, resolution, window, shifted, 2.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for (name, dims, data) in ps.export().unwrap() {
        let scale = if name.ends_with("gamma") { 1.0 } else { 0.0 };
        let v: Vec<f64> = data.iter().map(|_| scale + rng.random_range(-0.5..0.5)).collect();
        ps.assign(&name, &dims, &v).unwrap();
    }
    block
}

fn compare(block: &SwinBlock, h: usize, w: usize, c: usize, batch: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..batch * h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let t = Tensor::from_vec(x.clone(), (batch, h, w, c), &Device::Cpu).unwrap();
    let got = values(&block.forward(&t).unwrap());
    let mut worst: f64 = 0.0;
    for (b, chunk) in x.chunks(h * w * c).enumerate() {
        let want = reference_block(block, chunk, h, w, c);
        for (g, r) in got[b * h * w * c..(b + 1) * h * w * c].iter().zip(&want) {
            worst = worst.max((g - r).abs());
        }
    }
    worst
}

#[test]
fn window_covering_grid_matches_global_attention() {
    let block = randomised_block((4, 4), 8, 2, 4, true, 3);
    assert_eq!(block.window, (4, 4));
    assert_eq!(block.shift, (0, 0));
    let err = compare(&block, 4, 4, 8, 2, 11);
    assert!(err < 1e-5, "max deviation {err:e}");
}

#[test]
fn shifted_windows_match_reference() {
    let block = randomised_block((4, 4), 8, 2, 2, true, 5);
    assert_eq!(block.window, (2, 2));
    assert_eq!(block.shift, (1, 1));
    let err = compare(&block, 4, 4, 8, 2, 13);
    assert!(err < 1e-5, "max deviation {err:e}");
}

#[test]
fn unshifted_windows_match_reference() {
    let block = randomised_block((8, 4), 4, 1, 2, false, 7);
    assert_eq!(block.shift, (0, 0));
    let err = compare(&block, 8, 4, 4, 1, 17);
    assert!(err < 1e-5, "max deviation {err:e}");
}

#[test]
fn partition_and_reverse_are_inverse() {
    let x = Tensor::arange(0f64, (2 * 4 * 6 * 3) as f64, &Device::Cpu)
        .unwrap()
        .reshape((2, 4, 6, 3))
        .unwrap();
    let win = window_partition(&x, 2, 3).unwrap();
    assert_eq!(win.dims(), &[8, 6, 3]);
    let back = window_reverse(&win, 2, 3, 2, 4, 6).unwrap();
    assert_eq!(values(&back), values(&x));
}
