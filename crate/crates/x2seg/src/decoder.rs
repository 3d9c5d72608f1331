//! Query-based mask decoder. Learnable queries cross-attend to one pyramid
//! level per layer (round-robin 16 -> 8 -> 4), SEG-token embeddings write
//! residuals into the image features through a zero-initialized
//! token-to-image attention, and final masks are dot products between query
//! embeddings and the projected stride-4 feature map.
//!
//! Learnable queries never attend to SEG-conditioned queries, so at a
//! zero-initialized token-to-image state the generic output is exactly
//! independent of the conditions.

use candle_core::{DType, Device, IndexOp, Tensor};
use candle_nn::{linear, Linear, Module, VarBuilder};

use crate::backbones::MultiScaleFeatures;
use crate::error::{Result, X2Error};
use crate::nn::{ln, Ln, Mha, Mlp};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DecoderConfig {
    pub n_queries: usize,
    pub layers: usize,
    pub d_dec: usize,
    pub n_heads: usize,
    /// Real classes; the class head emits n_cls + 1 scores, last = no-object.
    pub n_cls: usize,
    /// Zero-initialize the token-to-image output projection (the stable
    /// warm-start variant); false gives the random-init ablation arm.
    pub t2i_zero_init: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { n_queries: 16, layers: 3, d_dec: 64, n_heads: 4, n_cls: 3, t2i_zero_init: true }
    }
}

/// Name fragment of the parameters that must start at zero for the warm
/// start; consumed by the seeded initializer.
pub const T2I_ZERO_PATTERN: &str = ".t2i.wo.";

pub struct DecoderOutput {
    /// (N_q, H4, W4) pre-sigmoid.
    pub mask_logits: Tensor,
    /// (N_q, n_cls + 1), last column is no-object.
    pub class_logits: Tensor,
    /// One (H4, W4) map per input SEG embedding, in input order.
    pub seg_mask_logits: Vec<Tensor>,
    /// Final (N_q, D_dec) query embeddings (probing and memory encoding).
    pub query_embeds: Tensor,
}

struct DecoderLayer {
    t2i: Mha,
    t2i_ln: Ln,
    q2i: Mha,
    q2i_ln: Ln,
    self_attn: Mha,
    self_ln: Ln,
    ffn: Mlp,
    ffn_ln: Ln,
}

impl DecoderLayer {
    fn new(d: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            t2i: Mha::new(d, heads, vb.pp("t2i"))?,
            t2i_ln: ln(d, vb.pp("t2i_ln"))?,
            q2i: Mha::new(d, heads, vb.pp("q2i"))?,
            q2i_ln: ln(d, vb.pp("q2i_ln"))?,
            self_attn: Mha::new(d, heads, vb.pp("self_attn"))?,
            self_ln: ln(d, vb.pp("self_ln"))?,
            ffn: Mlp::new(d, d * 4, d, vb.pp("ffn"))?,
            ffn_ln: ln(d, vb.pp("ffn_ln"))?,
        })
    }
}

pub struct MaskDecoder {
    pub cfg: DecoderConfig,
    queries: Tensor,
    layers: Vec<DecoderLayer>,
    input_proj: [Linear; 3],
    level_embed: Tensor,
    mask_feat_proj: Linear,
    mask_embed: Mlp,
    class_head: Linear,
    out_ln: Ln,
}

/// 2D sine-cosine positional encoding, (h*w, d), deterministic.
fn sine_pos_2d(h: usize, w: usize, d: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    assert_eq!(d % 4, 0);
    let q = d / 4;
    let mut data = Vec::with_capacity(h * w * d);
    for y in 0..h {
        for x in 0..w {
            for k in 0..q {
                let div = 10_000f64.powf(2.0 * k as f64 / (d / 2) as f64);
                data.push((y as f64 / div).sin());
                data.push((y as f64 / div).cos());
            }
            for k in 0..q {
                let div = 10_000f64.powf(2.0 * k as f64 / (d / 2) as f64);
                data.push((x as f64 / div).sin());
                data.push((x as f64 / div).cos());
            }
        }
    }
    Ok(Tensor::from_vec(data, (h * w, d), dev)?.to_dtype(dtype)?)
}

impl MaskDecoder {
    pub fn new(cfg: DecoderConfig, c_m: usize, vb: VarBuilder) -> Result<Self> {
        let d = cfg.d_dec;
        let layers = (0..cfg.layers)
            .map(|i| DecoderLayer::new(d, cfg.n_heads, vb.pp(format!("layer{i}"))))
            .collect::<Result<Vec<_>>>()?;
        let queries = vb.get_with_hints(
            (cfg.n_queries, d),
            "queries",
            candle_nn::init::DEFAULT_KAIMING_NORMAL,
        )?;
        let input_proj = [
            linear(c_m, d, vb.pp("in_proj16"))?,
            linear(c_m, d, vb.pp("in_proj8"))?,
            linear(c_m, d, vb.pp("in_proj4"))?,
        ];
        let level_embed =
            vb.get_with_hints((3, d), "level_embed", candle_nn::init::DEFAULT_KAIMING_NORMAL)?;
        Ok(Self {
            queries,
            layers,
            input_proj,
            level_embed,
            mask_feat_proj: linear(c_m, d, vb.pp("mask_feat_proj"))?,
            mask_embed: Mlp::new(d, d, d, vb.pp("mask_embed"))?,
            class_head: linear(d, cfg.n_cls + 1, vb.pp("class_head"))?,
            out_ln: ln(d, vb.pp("out_ln"))?,
            cfg,
        })
    }

    /// Self-attention mask over the concatenated (queries ++ segs) stream:
    /// learnable queries see only each other, seg queries see everything.
    fn stream_mask(&self, n_seg: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
        let nq = self.cfg.n_queries;
        let n = nq + n_seg;
        let data: Vec<f32> = (0..n)
            .flat_map(|i| {
                (0..n).map(move |j| {
                    if i < nq && j >= nq {
                        f32::NEG_INFINITY
                    } else {
                        0.0
                    }
                })
            })
            .collect();
        Ok(Tensor::from_vec(data, (n, n), dev)?.to_dtype(dtype)?)
    }

    /// Decode one frame's (possibly memory-refined) pyramid under zero or
    /// more SEG conditions.
    pub fn decode(&self, features: &MultiScaleFeatures, segs: &[Tensor]) -> Result<DecoderOutput> {
        let d = self.cfg.d_dec;
        let dtype = features.s4.dtype();
        let dev = features.s4.device().clone();
        for (i, s) in segs.iter().enumerate() {
            if s.dims() != [d] {
                return Err(X2Error::Shape(format!(
                    "seg embedding {i} has shape {:?}, expected [{d}]",
                    s.dims()
                )));
            }
        }

        // flatten pyramid levels to (HW, D) with level + position encodings
        let levels_raw = [&features.s16, &features.s8, &features.s4];
        let mut levels = Vec::with_capacity(3);
        for (li, lvl) in levels_raw.iter().enumerate() {
            let (c, h, w) = lvl.dims3()?;
            let flat = lvl.reshape((c, h * w))?.t()?; // (HW, C)
            let proj = self.input_proj[li].forward(&flat)?;
            let pos = sine_pos_2d(h, w, d, dtype, &dev)?;
            let le = self.level_embed.i(li)?.unsqueeze(0)?;
            levels.push(proj.broadcast_add(&le)?.broadcast_add(&pos)?);
        }

        let seg_stack = if segs.is_empty() {
            None
        } else {
            Some(Tensor::stack(segs, 0)?)
        };
        let mut x = match &seg_stack {
            Some(s) => Tensor::cat(&[&self.queries, s], 0)?,
            None => self.queries.clone(),
        };
        let smask = self.stream_mask(segs.len(), dtype, &dev)?;

        for (l, layer) in self.layers.iter().enumerate() {
            let li = l % 3;
            // token-to-image: condition residuals into this layer's level
            if let Some(s) = &seg_stack {
                let f = &levels[li];
                let res = layer.t2i.forward(&layer.t2i_ln.forward(f)?, s, None)?;
                levels[li] = (f + res)?;
            }
            let f = &levels[li];
            x = (&x + layer.q2i.forward(&layer.q2i_ln.forward(&x)?, f, None)?)?;
            let h = layer.self_ln.forward(&x)?;
            x = (&x + layer.self_attn.forward(&h, &h, Some(&smask))?)?;
            x = (&x + layer.ffn.forward(&layer.ffn_ln.forward(&x)?)?)?;
        }

        let x = self.out_ln.forward(&x)?;
        let (_, h4, w4) = features.s4.dims3()?;
        let c4 = features.s4.dim(0)?;
        // position added so the dot-product head can separate objects with
        // similar local appearance
        let mask_feat = self
            .mask_feat_proj
            .forward(&features.s4.reshape((c4, h4 * w4))?.t()?)?
            .broadcast_add(&sine_pos_2d(h4, w4, d, dtype, &dev)?)?; // (HW, D)
        let embed = self.mask_embed.forward(&x)?; // (N, D)
        let logits = embed.matmul(&mask_feat.t()?)?; // (N, HW)
        let nq = self.cfg.n_queries;
        let mask_logits = logits.i(..nq)?.reshape((nq, h4, w4))?;
        let mut seg_mask_logits = Vec::with_capacity(segs.len());
        for k in 0..segs.len() {
            seg_mask_logits.push(logits.i(nq + k)?.reshape((h4, w4))?);
        }
        let query_embeds = x.i(..nq)?;
        let class_logits = self.class_head.forward(&query_embeds)?;
        Ok(DecoderOutput { mask_logits, class_logits, seg_mask_logits, query_embeds })
    }

    /// Standalone token-to-image residual of the first layer, for probing
    /// the zero-init contract.
    pub fn t2i_residual(&self, image_features: &Tensor, segs: &[Tensor]) -> Result<Tensor> {
        if segs.is_empty() {
            return Ok(Tensor::zeros_like(image_features)?);
        }
        let s = Tensor::stack(segs, 0)?;
        let layer = &self.layers[0];
        self.layers
            .first()
            .map(|_| layer.t2i.forward(&layer.t2i_ln.forward(image_features)?, &s, None))
            .expect("decoder has at least one layer")
    }
}
