//! The surrogate network.
//!
//! Material branch: stress tokens `S·W_S + E_pos` pass one transformer layer
//! and are mean-pooled to `E_mat`. Fusion: `ConvLayers(Conv1x1(I_geo) +
//! broadcast(MLP(E_mat)))`, concatenated with `I_geo` and integrated by two
//! more convolutions into `X0`. Backbone: patch embedding, `L` encoder stages
//! (two Swin blocks, patch merging, then `+ 1·E_mat^(l)ᵀ`), a bottleneck
//! pair, and a mirrored decoder with skip connections. The material tower
//! feeds each stage: level `l` projects the previous level's tokens to `C_l`,
//! applies a transformer layer and mean-pools to `E_mat^(l)`.

use candle_core::{DType, Device, Tensor};

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::layers::{Conv2d, LayerNorm, Linear, PatchExpand, PatchMerging, SwinBlock, TransformerLayer};
use crate::params::{Init, ParamStore, INIT_STD};

pub struct MaterialEncoder {
    pub w_s: Tensor,
    pub e_pos: Tensor,
    pub layer: TransformerLayer,
}

impl MaterialEncoder {
    /// `curves` `(B, T)` → (`E_mat` `(B, d_mat)`, tokens `(B, T, d_mat)`).
    pub fn forward(&self, curves: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, t) = curves.dims2()?;
        let (tt, d) = self.e_pos.dims2()?;
        if t != tt {
            return Err(ModelError::Shape(format!("curve length {t}, model expects {tt}")));
        }
        let tokens = curves
            .reshape((b, t, 1))?
            .broadcast_mul(&self.w_s.reshape((1, 1, d))?)?
            .broadcast_add(&self.e_pos.unsqueeze(0)?)?;
        let tokens = self.layer.forward(&tokens)?;
        Ok((tokens.mean(1)?, tokens))
    }
}

pub struct Magn {
    pub geo_proj: Conv2d,
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub conv_layers: [Conv2d; 2],
    pub conv_int: [Conv2d; 2],
}

impl Magn {
    /// `geo` `(B, 1, H, W)`, `e_mat` `(B, d_mat)` → `X0` `(B, C, H, W)`.
    pub fn forward(&self, geo: &Tensor, e_mat: &Tensor) -> Result<Tensor> {
        let (b, _, _, _) = geo.dims4()?;
        let m = self.mlp2.forward(&self.mlp1.forward(e_mat)?.relu()?)?;
        let c = m.dim(1)?;
        let mut f = self.geo_proj.forward(geo)?.broadcast_add(&m.reshape((b, c, 1, 1))?)?;
        for conv in &self.conv_layers {
            f = conv.forward(&f)?.relu()?;
        }
        let mut x = Tensor::cat(&[geo, &f], 1)?;
        for conv in &self.conv_int {
            x = conv.forward(&x)?.relu()?;
        }
        Ok(x)
    }
}

pub struct MaterialLevel {
    pub proj: Linear,
    pub layer: TransformerLayer,
}

impl MaterialLevel {
    pub fn forward(&self, tokens: &Tensor) -> Result<(Tensor, Tensor)> {
        let t = self.layer.forward(&self.proj.forward(tokens)?)?;
        Ok((t.mean(1)?, t))
    }
}

pub struct EncoderStage {
    pub blocks: Vec<SwinBlock>,
    pub merge: PatchMerging,
}

pub struct DecoderStage {
    pub expand: PatchExpand,
    pub reduce: Linear,
    pub blocks: Vec<SwinBlock>,
}

/// Inference-time interventions and capture switches.
#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Zero `E_mat` and every `E_mat^(l)`.
    pub zero_material: bool,
    /// Replace `E_mat^(l)` (index `l − 1`) with the given `(B, C_l)` tensor.
    pub stage_embeddings: Vec<Option<Tensor>>,
    pub capture: bool,
}

/// Intermediates recorded when [`ForwardOptions::capture`] is set.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub e_mat: Option<Tensor>,
    pub x0: Option<Tensor>,
    pub stage_embeddings: Vec<Tensor>,
    /// `F^(l)`: after patch merging, before injection.
    pub merged: Vec<Tensor>,
    /// `X^(l) = F^(l) + 1·E_mat^(l)ᵀ`.
    pub injected: Vec<Tensor>,
    pub bottleneck: Option<Tensor>,
}

pub struct StampFormer {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub material: MaterialEncoder,
    pub magn: Magn,
    pub patch_embed: Conv2d,
    pub embed_norm: LayerNorm,
    pub levels: Vec<MaterialLevel>,
    pub encoder: Vec<EncoderStage>,
    pub bottleneck: Vec<SwinBlock>,
    pub decoder: Vec<DecoderStage>,
    pub final_expand: PatchExpand,
    pub head: Linear,
}

impl StampFormer {
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let mut ps = ParamStore::new(seed, dtype, device.clone());
        let d = cfg.d_mat;
        let c = cfg.magn_channels;
        let widths = cfg.widths();
        let l_count = cfg.num_stages();

        let material = MaterialEncoder {
            w_s: ps.create("material.w_s", &[1, d], Init::TruncNormal(INIT_STD))?,
            e_pos: ps.create("material.e_pos", &[cfg.curve_len, d], Init::Zeros)?,
            layer: TransformerLayer::new(&mut ps, "material.layer", d, ModelConfig::heads_for_width(d), cfg.mlp_ratio)?,
        };
        let magn = Magn {
            geo_proj: Conv2d::new(&mut ps, "magn.geo_proj", 1, c, 1, 1, 0)?,
            mlp1: Linear::new(&mut ps, "magn.mlp1", d, c, true)?,
            mlp2: Linear::new(&mut ps, "magn.mlp2", c, c, true)?,
            conv_layers: [
                Conv2d::new(&mut ps, "magn.conv_layers.0", c, c, 3, 1, 1)?,
                Conv2d::new(&mut ps, "magn.conv_layers.1", c, c, 3, 1, 1)?,
            ],
            conv_int: [
                Conv2d::new(&mut ps, "magn.conv_int.0", c + 1, c, 3, 1, 1)?,
                Conv2d::new(&mut ps, "magn.conv_int.1", c, c, 3, 1, 1)?,
            ],
        };
        let p = cfg.patch_size;
        let patch_embed = Conv2d::new(&mut ps, "patch_embed", c, widths[0], p, p, 0)?;
        let embed_norm = LayerNorm::new(&mut ps, "patch_embed.norm", widths[0])?;

        let blocks = |ps: &mut ParamStore, prefix: &str, level: usize| -> Result<Vec<SwinBlock>> {
            (0..cfg.depth)
                .map(|i| {
                    SwinBlock::new(
                        ps,
                        &format!("{prefix}.block{i}"),
                        widths[level],
                        cfg.heads(level),
                        cfg.resolution(level),
                        cfg.window_size,
                        cfg.shifted_windows && i % 2 == 1,
                        cfg.mlp_ratio,
                    )
                })
                .collect()
        };

        let mut levels = Vec::with_capacity(l_count);
        let mut encoder = Vec::with_capacity(l_count);
        for l in 1..=l_count {
            let d_prev = if l == 1 { d } else { widths[l - 1] };
            levels.push(MaterialLevel {
                proj: Linear::new(&mut ps, &format!("hmeiu.{l}.proj"), d_prev, widths[l], true)?,
                layer: TransformerLayer::new(&mut ps, &format!("hmeiu.{l}.layer"), widths[l], cfg.heads(l), cfg.mlp_ratio)?,
            });
            encoder.push(EncoderStage {
                blocks: blocks(&mut ps, &format!("encoder.{l}"), l - 1)?,
                merge: PatchMerging::new(&mut ps, &format!("encoder.{l}.merge"), widths[l - 1], widths[l])?,
            });
        }
        let bottleneck = blocks(&mut ps, "bottleneck", l_count)?;
        let mut decoder = Vec::with_capacity(l_count);
        for l in (1..=l_count).rev() {
            decoder.push(DecoderStage {
                expand: PatchExpand::new(&mut ps, &format!("decoder.{l}.expand"), widths[l], widths[l - 1], 2)?,
                reduce: Linear::new(&mut ps, &format!("decoder.{l}.reduce"), 2 * widths[l - 1], widths[l - 1], true)?,
                blocks: blocks(&mut ps, &format!("decoder.{l}"), l - 1)?,
            });
        }
        let final_expand = PatchExpand::new(&mut ps, "final_expand", widths[0], widths[0], p)?;
        let head = Linear::new(&mut ps, "head", widths[0], cfg.out_channels, true)?;
        Ok(Self {
            config: cfg,
            params: ps,
            material,
            magn,
            patch_embed,
            embed_norm,
            levels,
            encoder,
            bottleneck,
            decoder,
            final_expand,
            head,
        })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    /// Builds `(B, 1, H, W)` heights and `(B, T)` stresses from raw f64
    /// inputs, applying the configured input scales.
    pub fn inputs(&self, heights: &[&[f64]], stresses: &[&[f64]]) -> Result<(Tensor, Tensor)> {
        let cfg = &self.config;
        let b = heights.len();
        if stresses.len() != b {
            return Err(ModelError::Shape("one curve per height-map is required".into()));
        }
        let hw = cfg.grid_height * cfg.grid_width;
        let mut geo = Vec::with_capacity(b * hw);
        for h in heights {
            if h.len() != hw {
                return Err(ModelError::Shape(format!(
                    "height-map has {} cells, model expects {}x{}",
                    h.len(),
                    cfg.grid_height,
                    cfg.grid_width
                )));
            }
            geo.extend(h.iter().map(|v| v * cfg.height_scale));
        }
        let mut s = Vec::with_capacity(b * cfg.curve_len);
        for c in stresses {
            if c.len() != cfg.curve_len {
                return Err(ModelError::Shape(format!(
                    "curve has {} points, model expects {}",
                    c.len(),
                    cfg.curve_len
                )));
            }
            s.extend(c.iter().map(|v| v * cfg.stress_scale));
        }
        let dev = self.device();
        let geo = Tensor::from_vec(geo, (b, 1, cfg.grid_height, cfg.grid_width), dev)?.to_dtype(self.dtype())?;
        let s = Tensor::from_vec(s, (b, cfg.curve_len), dev)?.to_dtype(self.dtype())?;
        Ok((geo, s))
    }

    pub fn forward(&self, geo: &Tensor, curves: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with(geo, curves, &ForwardOptions::default())?.0)
    }

    /// `geo` `(B, 1, H, W)`, `curves` `(B, T)` → `(B, H, W, out_channels)`.
    pub fn forward_with(&self, geo: &Tensor, curves: &Tensor, opts: &ForwardOptions) -> Result<(Tensor, Trace)> {
        let cfg = &self.config;
        let (b, ch, h, w) = geo.dims4()?;
        if ch != 1 || h != cfg.grid_height || w != cfg.grid_width {
            return Err(ModelError::Shape(format!(
                "height input {b}x{ch}x{h}x{w}, model expects Bx1x{}x{}",
                cfg.grid_height, cfg.grid_width
            )));
        }
        if curves.dim(0)? != b {
            return Err(ModelError::Shape("batch sizes of height-maps and curves differ".into()));
        }
        let mut trace = Trace::default();
        let (mut e_mat, mut tokens) = self.material.forward(curves)?;
        if opts.zero_material {
            e_mat = e_mat.zeros_like()?;
        }
        let x0 = self.magn.forward(geo, &e_mat)?;
        if opts.capture {
            trace.e_mat = Some(e_mat.clone());
            trace.x0 = Some(x0.clone());
        }
        let x = self.patch_embed.forward(&x0)?.permute((0, 2, 3, 1))?.contiguous()?;
        let mut x = self.embed_norm.forward(&x)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (i, (stage, level)) in self.encoder.iter().zip(&self.levels).enumerate() {
            let (e_l, t_l) = level.forward(&tokens)?;
            tokens = t_l;
            let e_l = match opts.stage_embeddings.get(i).and_then(|o| o.as_ref()) {
                Some(e) => e.clone(),
                None if opts.zero_material => e_l.zeros_like()?,
                None => e_l,
            };
            for block in &stage.blocks {
                x = block.forward(&x)?;
            }
            skips.push(x.clone());
            let f = stage.merge.forward(&x)?;
            let c_l = f.dim(3)?;
            x = f.broadcast_add(&e_l.reshape((b, 1, 1, c_l))?)?;
            if opts.capture {
                trace.merged.push(f);
                trace.injected.push(x.clone());
                trace.stage_embeddings.push(e_l);
            }
        }
        for block in &self.bottleneck {
            x = block.forward(&x)?;
        }
        if opts.capture {
            trace.bottleneck = Some(x.clone());
        }
        for (stage, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            let up = stage.expand.forward(&x)?;
            x = stage.reduce.forward(&Tensor::cat(&[&up, skip], 3)?)?;
            for block in &stage.blocks {
                x = block.forward(&x)?;
            }
        }
        let y = self.head.forward(&self.final_expand.forward(&x)?)?;
        Ok((y, trace))
    }
}
