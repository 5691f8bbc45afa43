//! Adam and the step learning-rate schedule.

use candle_core::{backprop::GradStore, DType, Tensor, Var};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// `lr0 · gamma^⌊epoch / step_epochs⌋`.
pub fn lr_schedule(epoch: usize, lr0: f64, gamma: f64, step_epochs: usize) -> f64 {
    lr0 * gamma.powi((epoch / step_epochs.max(1)) as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam update of `theta` in place; `t` is the 1-based step count.
pub fn adam_update<F: Float>(theta: &mut [F], grad: &[F], m: &mut [F], v: &mut [F], t: u64, lr: F, p: &AdamParams) {
    let one = F::one();
    let b1 = F::from(p.beta1).unwrap();
    let b2 = F::from(p.beta2).unwrap();
    let eps = F::from(p.epsilon).unwrap();
    let c1 = one - b1.powi(t as i32);
    let c2 = one - b2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] = theta[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Adam over a list of variables, with single-precision moment buffers.
pub struct Adam {
    pub params: AdamParams,
    pub vars: Vec<Var>,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

impl Adam {
    pub fn new(vars: Vec<Var>, params: AdamParams) -> Self {
        let m = vars.iter().map(|v| vec![0.0; v.elem_count()]).collect();
        let v = vars.iter().map(|v| vec![0.0; v.elem_count()]).collect();
        Self {
            params,
            vars,
            m,
            v,
            step: 0,
        }
    }

    /// Gradients as flat f32 vectors (zeros where a variable got none).
    pub fn collect_grads(&self, grads: &GradStore) -> Result<Vec<Vec<f32>>> {
        self.vars
            .iter()
            .map(|var| match grads.get(var.as_tensor()) {
                Some(g) => Ok(g.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?),
                None => Ok(vec![0.0; var.elem_count()]),
            })
            .collect()
    }

    pub fn step(&mut self, grads: &[Vec<f32>], lr: f64) -> Result<()> {
        self.step += 1;
        for (i, var) in self.vars.iter().enumerate() {
            let t = var.as_tensor();
            let dtype = t.dtype();
            let mut theta = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            adam_update(&mut theta, &grads[i], &mut self.m[i], &mut self.v[i], self.step, lr as f32, &self.params);
            var.set(&Tensor::from_vec(theta, t.dims(), t.device())?.to_dtype(dtype)?)?;
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}
