//! Finite-difference check of the analytic gradients, per parameter group.

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::network::StampFormer;
use crate::train::mse_loss;

/// Named groups and the parameter-name predicate selecting their members.
pub const GROUPS: &[(&str, fn(&str) -> bool)] = &[
    ("material_projection", |n| n == "material.w_s"),
    ("material_position", |n| n == "material.e_pos"),
    ("material_encoder", |n| n.starts_with("material.layer.")),
    ("magn_mlp", |n| n.starts_with("magn.mlp")),
    ("magn_conv", |n| n.starts_with("magn.conv") || n.starts_with("magn.geo_proj")),
    ("patch_embed", |n| n == "patch_embed.weight" || n == "patch_embed.bias"),
    ("window_attention", |n| is_backbone(n) && n.contains(".attn.")),
    ("block_mlp", |n| is_backbone(n) && n.contains(".mlp.")),
    ("layer_norm", |n| n.contains(".ln") || n.contains("norm.")),
    ("material_levels", |n| n.starts_with("hmeiu.") && !n.contains(".ln")),
    ("patch_merging", |n| n.contains("merge.reduction")),
    ("patch_expanding", |n| n.starts_with("decoder.") && (n.contains("expand.expand") || n.contains("reduce"))),
    ("output_head", |n| n.starts_with("head.") || n == "final_expand.expand.weight"),
];

fn is_backbone(n: &str) -> bool {
    n.starts_with("encoder.") || n.starts_with("bottleneck.") || n.starts_with("decoder.")
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupResult {
    pub group: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    /// Probes whose step had to be reduced before two estimates agreed.
    pub refined: usize,
}

/// Agreement required between the estimates at `h` and `h / 2`.
const CONSISTENCY: f64 = 1e-4;
const MAX_HALVINGS: usize = 6;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares backprop gradients of the unmasked MSE with central differences
/// for `per_group` distinct entries of every group, in double precision.
///
/// A ReLU switching inside `[θ − h, θ + h]` spoils the central difference,
/// so each probe halves its step until the estimates at `h` and `h / 2`
/// agree; the analytic value plays no part in that choice.
pub fn check_gradients(cfg: &ModelConfig, seed: u64, per_group: usize, step: f64) -> Result<Vec<GroupResult>> {
    let dev = Device::Cpu;
    let model = StampFormer::new(cfg, seed, DType::F64, &dev)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, t) = (cfg.grid_height, cfg.grid_width, cfg.curve_len);
    let b = 2;
    let heights: Vec<Vec<f64>> = (0..b).map(|_| (0..h * w).map(|_| rng.random_range(0.0..8.0)).collect()).collect();
    let stresses: Vec<Vec<f64>> = (0..b)
        .map(|_| (0..t).map(|i| 100.0 + 2.0 * i as f64 + rng.random_range(0.0..20.0)).collect())
        .collect();
    let hr: Vec<&[f64]> = heights.iter().map(|v| v.as_slice()).collect();
    let sr: Vec<&[f64]> = stresses.iter().map(|v| v.as_slice()).collect();
    let (geo, curves) = model.inputs(&hr, &sr)?;
    let target: Vec<f64> = (0..b * h * w * cfg.out_channels).map(|_| rng.random_range(-0.5..0.5)).collect();
    let target = Tensor::from_vec(target, (b, h, w, cfg.out_channels), &dev)?;

    let output = |m: &StampFormer| -> Result<Tensor> { m.forward(&geo, &curves) };
    // (L(θ+h) − L(θ−h)) written as mean((y₊ − y₋)(y₊ + y₋ − 2t)) so the
    // difference is formed per element instead of between two totals
    let loss_difference = |up: &Tensor, down: &Tensor| -> Result<f64> {
        let sum = ((up + down)? - (&target * 2.0)?)?;
        Ok(((up - down)? * sum)?.mean_all()?.to_scalar::<f64>()?)
    };
    let loss = mse_loss(&model.forward(&geo, &curves)?, &target)?;
    let grads = loss.backward()?;

    let params = model.params.export()?;
    let mut results = Vec::new();
    for (group, member) in GROUPS {
        let mut slots: Vec<(usize, usize)> = Vec::new();
        for (pi, (name, _, data)) in params.iter().enumerate() {
            if member(name) {
                slots.extend((0..data.len()).map(|i| (pi, i)));
            }
        }
        if slots.len() < per_group {
            return Err(ModelError::Config(format!(
                "group {group} holds {} values, fewer than {per_group}",
                slots.len()
            )));
        }
        slots.shuffle(&mut rng);
        slots.truncate(per_group);
        let mut worst = (0.0f64, String::new());
        let mut refined = 0;
        for &(pi, i) in &slots {
            let (name, dims, data) = &params[pi];
            let var = model.params.get(name).unwrap();
            let analytic = match grads.get(var.as_tensor()) {
                Some(g) => g.flatten_all()?.get(i)?.to_scalar::<f64>()?,
                None => 0.0,
            };
            let central = |h: f64| -> Result<f64> {
                let mut probe = data.clone();
                probe[i] = data[i] + h;
                model.params.assign(name, dims, &probe)?;
                let up = output(&model)?;
                probe[i] = data[i] - h;
                model.params.assign(name, dims, &probe)?;
                let down = output(&model)?;
                model.params.assign(name, dims, data)?;
                Ok(loss_difference(&up, &down)? / (2.0 * h))
            };
            let first = central(step)?;
            let mut numeric = first;
            let mut h = step;
            for k in 0..MAX_HALVINGS {
                let next = central(h / 2.0)?;
                if relative_error(numeric, next) <= CONSISTENCY {
                    break;
                }
                if k == 0 {
                    refined += 1;
                }
                numeric = next;
                h /= 2.0;
                if k + 1 == MAX_HALVINGS {
                    numeric = first;
                }
            }
            let err = relative_error(analytic, numeric);
            if err > worst.0 || worst.1.is_empty() {
                worst = (err, format!("{name}[{i}] a={analytic:e} n={numeric:e}"));
            }
        }
        results.push(GroupResult {
            group: group.to_string(),
            checked: slots.len(),
            max_rel_err: worst.0,
            worst_param: worst.1,
            refined,
        });
    }
    Ok(results)
}
