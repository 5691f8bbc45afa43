//! Building blocks. Token grids are `(B, H, W, C)`; token sequences are
//! `(B, N, C)`; images entering convolutions are `(B, C, H, W)`.

use candle_core::{DType, Tensor, D};

use crate::error::{ModelError, Result};
use crate::params::{Init, ParamStore, INIT_STD};

pub const LN_EPS: f64 = 1e-5;
/// Logit offset for token pairs from different regions of a shifted window.
pub const MASK_NEG: f64 = -100.0;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let w = ps.create(&format!("{name}.weight"), &[d_in, d_out], Init::TruncNormal(INIT_STD))?;
        let b = if bias {
            Some(ps.create(&format!("{name}.bias"), &[d_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().expect("non-scalar input");
        let d_out = self.w.dim(1)?;
        let rows = x.elem_count() / d_in;
        let mut y = x.reshape((rows, d_in))?.matmul(&self.w)?;
        if let Some(b) = &self.b {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = d_out;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.create(&format!("{name}.gamma"), &[dim], Init::Ones)?,
            beta: ps.create(&format!("{name}.beta"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centred = x.broadcast_sub(&mean)?;
        let var = centred.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centred.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Tensor,
    pub b: Tensor,
    pub padding: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let w = ps.create(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            Init::HeUniform {
                fan_in: c_in * kernel * kernel,
            },
        )?;
        let b = ps.create(&format!("{name}.bias"), &[c_out], Init::Zeros)?;
        Ok(Self { w, b, padding, stride })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.w, self.padding, self.stride, 1, 1)?;
        let c = self.b.dim(0)?;
        Ok(y.broadcast_add(&self.b.reshape((1, c, 1, 1))?)?)
    }
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, hidden, true)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

/// Multi-head self-attention over `(B, N, C)` with optional additive logit
/// terms: `bias` `(heads, N, N)` shared by all batch rows and `mask`
/// `(nW, N, N)` cycling over groups of `nW` consecutive rows.
#[derive(Debug, Clone)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(ModelError::Config(format!("{name}: width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            qkv: Linear::new(ps, &format!("{name}.qkv"), dim, 3 * dim, true)?,
            proj: Linear::new(ps, &format!("{name}.proj"), dim, dim, true)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = (qkv.get(0)?.contiguous()? * (1.0 / (hd as f64).sqrt()))?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let mut attn = q.matmul(&k.t()?.contiguous()?)?;
        if let Some(bias) = bias {
            attn = attn.broadcast_add(&bias.unsqueeze(0)?)?;
        }
        if let Some(mask) = mask {
            let nw = mask.dim(0)?;
            attn = attn
                .reshape((b / nw, nw, self.heads, n, n))?
                .broadcast_add(&mask.unsqueeze(1)?.unsqueeze(0)?)?
                .reshape((b, self.heads, n, n))?;
        }
        let out = softmax_last(&attn)?.matmul(&v)?;
        let out = out.transpose(1, 2)?.contiguous()?.reshape((b, n, c))?;
        self.proj.forward(&out)
    }
}

/// Pre-norm encoder layer: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerLayer {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, mlp_ratio: f64) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim)?,
            attn: Attention::new(ps, &format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), dim, hidden_width(dim, mlp_ratio))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?, None, None)?)?;
        Ok((&x + self.mlp.forward(&self.ln2.forward(&x)?)?)?)
    }
}

pub fn hidden_width(dim: usize, ratio: f64) -> usize {
    ((dim as f64 * ratio).round() as usize).max(1)
}

/// `(B, H, W, C)` → `(B·nW, wh·ww, C)`, windows in row-major order.
pub fn window_partition(x: &Tensor, wh: usize, ww: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x.reshape(&[b, h / wh, wh, w / ww, ww, c][..])?
        .permute(&[0usize, 1, 3, 2, 4, 5][..])?
        .contiguous()?
        .reshape((b * (h / wh) * (w / ww), wh * ww, c))?)
}

pub fn window_reverse(windows: &Tensor, wh: usize, ww: usize, b: usize, h: usize, w: usize) -> Result<Tensor> {
    let c = windows.dim(2)?;
    Ok(windows
        .reshape(&[b, h / wh, w / ww, wh, ww, c][..])?
        .permute(&[0usize, 1, 3, 2, 4, 5][..])?
        .contiguous()?
        .reshape((b, h, w, c))?)
}

/// Index into the `(2wh−1)(2ww−1)` relative-offset table for each token pair.
pub fn relative_position_index(wh: usize, ww: usize) -> Vec<u32> {
    let n = wh * ww;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (ri, ci) = ((i / ww) as isize, (i % ww) as isize);
        for j in 0..n {
            let (rj, cj) = ((j / ww) as isize, (j % ww) as isize);
            let dr = (ri - rj + wh as isize - 1) as usize;
            let dc = (ci - cj + ww as isize - 1) as usize;
            idx.push((dr * (2 * ww - 1) + dc) as u32);
        }
    }
    idx
}

/// Additive mask `(nW, N, N)` separating the regions that a cyclic shift
/// brings into one window.
pub fn shift_mask(h: usize, w: usize, wh: usize, ww: usize, sh: usize, sw: usize) -> Vec<f64> {
    let region = |i: usize, n: usize, win: usize, s: usize| -> usize {
        if i < n - win {
            0
        } else if i < n - s {
            1
        } else {
            2
        }
    };
    let mut label = vec![0usize; h * w];
    for r in 0..h {
        for c in 0..w {
            label[r * w + c] = region(r, h, wh, sh) * 3 + region(c, w, ww, sw);
        }
    }
    let n = wh * ww;
    let mut mask = Vec::with_capacity((h / wh) * (w / ww) * n * n);
    for wr in 0..h / wh {
        for wc in 0..w / ww {
            let cell = |t: usize| label[(wr * wh + t / ww) * w + wc * ww + t % ww];
            for i in 0..n {
                for j in 0..n {
                    mask.push(if cell(i) == cell(j) { 0.0 } else { MASK_NEG });
                }
            }
        }
    }
    mask
}

#[derive(Debug, Clone)]
pub struct SwinBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub rel_table: Tensor,
    rel_index: Tensor,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub window: (usize, usize),
    pub shift: (usize, usize),
    mask: Option<Tensor>,
    pub resolution: (usize, usize),
}

impl SwinBlock {
    /// Windows of `window_size²` when the grid divides evenly and is larger
    /// than one window; otherwise a single window covering the grid. A
    /// shift of `window_size / 2` applies only in the first case.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        resolution: (usize, usize),
        window_size: usize,
        shifted: bool,
        mlp_ratio: f64,
    ) -> Result<Self> {
        let (h, w) = resolution;
        let windowed = h % window_size == 0 && w % window_size == 0 && h.min(w) > window_size;
        let window = if windowed { (window_size, window_size) } else { (h, w) };
        let shift = if windowed && shifted && window_size > 1 {
            (window_size / 2, window_size / 2)
        } else {
            (0, 0)
        };
        let table_len = (2 * window.0 - 1) * (2 * window.1 - 1);
        let rel_table = ps.create(&format!("{name}.attn.rel_bias"), &[table_len, heads], Init::TruncNormal(INIT_STD))?;
        let device = ps.device().clone();
        let rel_index = Tensor::from_vec(relative_position_index(window.0, window.1), window.0 * window.1 * window.0 * window.1, &device)?;
        let mask = if shift != (0, 0) {
            let n = window.0 * window.1;
            let nw = (h / window.0) * (w / window.1);
            Some(Tensor::from_vec(shift_mask(h, w, window.0, window.1, shift.0, shift.1), (nw, n, n), &device)?.to_dtype(ps.dtype())?)
        } else {
            None
        };
        Ok(Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim)?,
            attn: Attention::new(ps, &format!("{name}.attn"), dim, heads)?,
            rel_table,
            rel_index,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), dim, hidden_width(dim, mlp_ratio))?,
            window,
            shift,
            mask,
            resolution,
        })
    }

    fn bias(&self) -> Result<Tensor> {
        let n = self.window.0 * self.window.1;
        Ok(self
            .rel_table
            .index_select(&self.rel_index, 0)?
            .reshape((n, n, self.attn.heads))?
            .permute((2, 0, 1))?
            .contiguous()?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        if (h, w) != self.resolution {
            return Err(ModelError::Shape(format!(
                "block built for {:?} received {h}x{w}",
                self.resolution
            )));
        }
        let (wh, ww) = self.window;
        let (sh, sw) = self.shift;
        let mut y = self.ln1.forward(x)?;
        if sh > 0 {
            y = y.roll(-(sh as i32), 1)?.roll(-(sw as i32), 2)?;
        }
        let windows = window_partition(&y, wh, ww)?;
        let attended = self.attn.forward(&windows, Some(&self.bias()?), self.mask.as_ref())?;
        let mut y = window_reverse(&attended, wh, ww, b, h, w)?;
        if sh > 0 {
            y = y.roll(sh as i32, 1)?.roll(sw as i32, 2)?;
        }
        let x = (x + y)?;
        let out = (&x + self.mlp.forward(&self.ln2.forward(&x)?)?)?;
        debug_assert_eq!(out.dims4()?, (b, h, w, c));
        Ok(out)
    }
}

/// `(B, H, W, C)` → `(B, H/2, W/2, 4C)` → LN → linear to `c_out`.
#[derive(Debug, Clone)]
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerging {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(ps, &format!("{name}.norm"), 4 * c_in)?,
            reduction: Linear::new(ps, &format!("{name}.reduction"), 4 * c_in, c_out, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let merged = x
            .reshape(&[b, h / 2, 2, w / 2, 2, c][..])?
            .permute(&[0usize, 1, 3, 2, 4, 5][..])?
            .contiguous()?
            .reshape((b, h / 2, w / 2, 4 * c))?;
        self.reduction.forward(&self.norm.forward(&merged)?)
    }
}

/// `(B, H, W, r²·C)` → `(B, rH, rW, C)`.
pub fn pixel_rearrange(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let co = c / (r * r);
    Ok(x.reshape(&[b, h, w, r, r, co][..])?
        .permute(&[0usize, 1, 3, 2, 4, 5][..])?
        .contiguous()?
        .reshape((b, h * r, w * r, co))?)
}

/// Linear to `r²·c_out` channels, pixel rearrangement by `r`, LN.
#[derive(Debug, Clone)]
pub struct PatchExpand {
    pub expand: Linear,
    pub norm: LayerNorm,
    pub factor: usize,
}

impl PatchExpand {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, factor: usize) -> Result<Self> {
        Ok(Self {
            expand: Linear::new(ps, &format!("{name}.expand"), c_in, factor * factor * c_out, false)?,
            norm: LayerNorm::new(ps, &format!("{name}.norm"), c_out)?,
            factor,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.norm.forward(&pixel_rearrange(&self.expand.forward(x)?, self.factor)?)
    }
}

pub fn to_dtype_f64(x: &Tensor) -> Result<Vec<f64>> {
    Ok(x.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}
