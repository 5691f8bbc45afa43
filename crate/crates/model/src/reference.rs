//! Plain-loop reference implementations used as test oracles.

use candle_core::Tensor;

use crate::layers::{Linear, SwinBlock, LN_EPS};

/// Flattened values of an f64 tensor.
pub fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn linear(x: &[f64], l: &Linear) -> Vec<f64> {
    let (d_in, d_out) = l.w.dims2().unwrap();
    let w = values(&l.w);
    let b = l.b.as_ref().map(values).unwrap_or_else(|| vec![0.0; d_out]);
    (0..d_out)
        .map(|o| b[o] + (0..d_in).map(|i| x[i] * w[i * d_out + o]).sum::<f64>())
        .collect()
}

fn layer_norm(x: &[f64], gamma: &Tensor, beta: &Tensor) -> Vec<f64> {
    let (g, b) = (values(gamma), values(beta));
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + LN_EPS).sqrt() * g[i] + b[i])
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// One block on a single `(H, W, C)` grid, token by token: a query sees
/// the keys in its window of the cyclically shifted grid that were
/// contiguous with it before the shift.
pub fn reference_block(block: &SwinBlock, x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let (wh, ww) = block.window;
    let (sh, sw) = block.shift;
    let heads = block.attn.heads;
    let hd = c / heads;
    let table = values(&block.rel_table);
    let tokens: Vec<&[f64]> = x.chunks(c).collect();
    let normed: Vec<Vec<f64>> = tokens.iter().map(|t| layer_norm(t, &block.ln1.gamma, &block.ln1.beta)).collect();
    let qkv: Vec<Vec<f64>> = normed.iter().map(|t| linear(t, &block.attn.qkv)).collect();
    // position in the shifted grid, plus whether the shift wrapped it
    let place = |p: usize| {
        let (r, col) = ((p / w + h - sh) % h, (p % w + w - sw) % w);
        (r, col, (sh > 0 && r >= h - sh), (sw > 0 && col >= w - sw))
    };
    let mut out = Vec::with_capacity(x.len());
    for p in 0..h * w {
        let (rp, cp, wrp, wcp) = place(p);
        let keys: Vec<usize> = (0..h * w)
            .filter(|&q| {
                let (rq, cq, wrq, wcq) = place(q);
                rq / wh == rp / wh && cq / ww == cp / ww && wrq == wrp && wcq == wcp
            })
            .collect();
        let mut attended = vec![0.0; c];
        for head in 0..heads {
            let q = &qkv[p][head * hd..(head + 1) * hd];
            let logits: Vec<f64> = keys
                .iter()
                .map(|&k| {
                    let (rk, ck, _, _) = place(k);
                    let key = &qkv[k][c + head * hd..c + (head + 1) * hd];
                    let dot: f64 = q.iter().zip(key).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt();
                    let dr = (rp % wh) as isize - (rk % wh) as isize + wh as isize - 1;
                    let dc = (cp % ww) as isize - (ck % ww) as isize + ww as isize - 1;
                    dot + table[(dr as usize * (2 * ww - 1) + dc as usize) * heads + head]
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, &k) in keys.iter().enumerate() {
                let v = &qkv[k][2 * c + head * hd..2 * c + (head + 1) * hd];
                for d in 0..hd {
                    attended[head * hd + d] += e[j] / z * v[d];
                }
            }
        }
        let y: Vec<f64> = linear(&attended, &block.attn.proj).iter().zip(tokens[p]).map(|(a, b)| a + b).collect();
        let hidden: Vec<f64> = linear(&layer_norm(&y, &block.ln2.gamma, &block.ln2.beta), &block.mlp.fc1)
            .into_iter()
            .map(gelu)
            .collect();
        out.extend(linear(&hidden, &block.mlp.fc2).iter().zip(&y).map(|(a, b)| a + b));
    }
    out
}

/// Mean over samples of the per-sample mean squared error, summed cell by
/// cell and channel by channel; inputs are `(B, H, W, C)` row-major.
pub fn reference_mse(pred: &[f64], target: &[f64], dims: [usize; 4]) -> f64 {
    let [b, h, w, c] = dims;
    let mut total = 0.0;
    for s in 0..b {
        let mut sum = 0.0;
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    let idx = ((s * h + i) * w + j) * c + k;
                    sum += (pred[idx] - target[idx]).powi(2);
                }
            }
        }
        total += sum / (h * w * c) as f64;
    }
    total / b as f64
}
