//! Toy stand-ins for the large backbones: a patch-embedding vision encoder
//! producing global tokens, a 3-stage convolutional mask encoder producing a
//! stride {4, 8, 16} pyramid, a 2-layer causal transformer language model,
//! and the two MLP projectors.

use candle_core::{Device, IndexOp, Tensor};
use candle_nn::{conv2d, embedding, Conv2d, Conv2dConfig, Embedding, Module, VarBuilder};

use crate::error::{Result, X2Error};
use crate::nn::{causal_mask, ln, Ln, Mha, Mlp};

/// Model width configuration shared by all backbones.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    pub patch: usize,
    pub d_v: usize,
    pub d_llm: usize,
    pub llm_layers: usize,
    pub llm_heads: usize,
    pub c_m: usize,
    pub d_dec: usize,
    pub vocab: usize,
    pub max_ctx: usize,
    pub max_frames: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            d_v: 64,
            d_llm: 128,
            llm_layers: 2,
            llm_heads: 4,
            c_m: 64,
            d_dec: 64,
            vocab: 512,
            max_ctx: 768,
            max_frames: 16,
        }
    }
}

/// Per-frame global vision tokens, `per_frame` tokens for each of T frames.
pub struct GlobalVisionTokens {
    /// (T * per_frame, D_v)
    pub tokens: Tensor,
    pub per_frame: usize,
    pub t: usize,
}

/// Patch embedding plus learned position and frame-index embeddings. The
/// patch projection carries no bias and the additive embeddings start at
/// zero, so a zero frame maps to zero tokens at a zero-initialized state.
pub struct VisionEncoder {
    patch_proj: Conv2d,
    pos: Embedding,
    frame: Embedding,
    patch: usize,
}

impl VisionEncoder {
    pub fn new(cfg: &BackboneConfig, vb: VarBuilder) -> Result<Self> {
        let conv_cfg = Conv2dConfig { stride: cfg.patch, ..Default::default() };
        let vb_pp = vb.pp("patch_proj");
        let ws = vb_pp.get_with_hints(
            (cfg.d_v, 3, cfg.patch, cfg.patch),
            "weight",
            candle_nn::init::DEFAULT_KAIMING_NORMAL,
        )?;
        let patch_proj = Conv2d::new(ws, None, conv_cfg);
        let max_grid = cfg.max_ctx; // generous; indexed row-major per frame
        Ok(Self {
            patch_proj,
            pos: embedding(max_grid, cfg.d_v, vb.pp("pos_embed"))?,
            frame: embedding(cfg.max_frames, cfg.d_v, vb.pp("frame_embed"))?,
            patch: cfg.patch,
        })
    }

    /// `frames`: (T, 3, H, W) with H, W divisible by the patch size.
    pub fn forward(&self, frames: &Tensor) -> Result<GlobalVisionTokens> {
        let (t, _, h, w) = frames.dims4()?;
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(X2Error::Shape(format!(
                "frame {h}x{w} not divisible by patch {}",
                self.patch
            )));
        }
        let (gh, gw) = (h / self.patch, w / self.patch);
        let per_frame = gh * gw;
        let z = self.patch_proj.forward(frames)?; // (T, D_v, gh, gw)
        let d_v = z.dim(1)?;
        let z = z.reshape((t, d_v, per_frame))?.transpose(1, 2)?; // (T, N, D_v)
        let dev = frames.device();
        let pos_ids = Tensor::from_vec(
            (0..per_frame as u32).collect::<Vec<u32>>(),
            per_frame,
            dev,
        )?;
        let pos = self.pos.forward(&pos_ids)?.unsqueeze(0)?; // (1, N, D_v)
        let frame_ids = Tensor::from_vec((0..t as u32).collect::<Vec<u32>>(), t, dev)?;
        let fr = self.frame.forward(&frame_ids)?.unsqueeze(1)?; // (T, 1, D_v)
        let z = z.broadcast_add(&pos)?.broadcast_add(&fr)?;
        Ok(GlobalVisionTokens {
            tokens: z.reshape((t * per_frame, d_v))?,
            per_frame,
            t,
        })
    }
}

/// Stride {4, 8, 16} feature pyramid of one frame, each level (C_m, h, w).
#[derive(Clone)]
pub struct MultiScaleFeatures {
    pub s4: Tensor,
    pub s8: Tensor,
    pub s16: Tensor,
}

impl MultiScaleFeatures {
    pub fn check_widths(&self, c_m: usize) -> Result<()> {
        for (name, t) in [("s4", &self.s4), ("s8", &self.s8), ("s16", &self.s16)] {
            if t.dim(0)? != c_m {
                return Err(X2Error::Shape(format!(
                    "{name} has {} channels, expected {c_m}",
                    t.dim(0)?
                )));
            }
        }
        Ok(())
    }
}

struct ConvBlock {
    conv: Conv2d,
}

impl ConvBlock {
    fn new(c_in: usize, c_out: usize, vb: VarBuilder) -> Result<Self> {
        let cfg = Conv2dConfig { stride: 2, padding: 1, ..Default::default() };
        Ok(Self { conv: conv2d(c_in, c_out, 3, cfg, vb.pp("conv"))? })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.conv.forward(x)?.gelu_erf()?)
    }
}

/// Four stride-2 stages give the stride-4 level after two, then stride-8 and
/// stride-16; spatial dims follow ceil division throughout.
pub struct MaskEncoder {
    stem0: ConvBlock,
    stem1: ConvBlock,
    down8: ConvBlock,
    down16: ConvBlock,
}

impl MaskEncoder {
    pub fn new(cfg: &BackboneConfig, vb: VarBuilder) -> Result<Self> {
        let c = cfg.c_m;
        Ok(Self {
            stem0: ConvBlock::new(3, c / 2, vb.pp("stem0"))?,
            stem1: ConvBlock::new(c / 2, c, vb.pp("stem1"))?,
            down8: ConvBlock::new(c, c, vb.pp("down8"))?,
            down16: ConvBlock::new(c, c, vb.pp("down16"))?,
        })
    }

    /// `frame`: (3, H, W) for a single frame.
    pub fn forward(&self, frame: &Tensor) -> Result<MultiScaleFeatures> {
        let x = frame.unsqueeze(0)?;
        let s4 = self.stem1.forward(&self.stem0.forward(&x)?)?;
        let s8 = self.down8.forward(&s4)?;
        let s16 = self.down16.forward(&s8)?;
        Ok(MultiScaleFeatures {
            s4: s4.squeeze(0)?,
            s8: s8.squeeze(0)?,
            s16: s16.squeeze(0)?,
        })
    }
}

struct LlmBlock {
    ln1: Ln,
    attn: Mha,
    ln2: Ln,
    mlp: Mlp,
}

impl LlmBlock {
    fn new(dim: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            ln1: ln(dim, vb.pp("ln1"))?,
            attn: Mha::new(dim, heads, vb.pp("attn"))?,
            ln2: ln(dim, vb.pp("ln2"))?,
            mlp: Mlp::new(dim, dim * 4, dim, vb.pp("mlp"))?,
        })
    }

    fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, Some(mask))?)?;
        let h = self.ln2.forward(&x)?;
        Ok((&x + self.mlp.forward(&h)?)?)
    }
}

/// Tiny causal transformer. Inputs are pre-assembled embeddings, so vision
/// and region tokens slot in transparently; position embeddings are added
/// here.
pub struct ToyLlm {
    pub embed: Embedding,
    pos: Embedding,
    blocks: Vec<LlmBlock>,
    ln_f: Ln,
    lm_head: candle_nn::Linear,
    max_ctx: usize,
}

impl ToyLlm {
    pub fn new(cfg: &BackboneConfig, vb: VarBuilder) -> Result<Self> {
        let blocks = (0..cfg.llm_layers)
            .map(|i| LlmBlock::new(cfg.d_llm, cfg.llm_heads, vb.pp(format!("block{i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embed: embedding(cfg.vocab, cfg.d_llm, vb.pp("tok_embed"))?,
            pos: embedding(cfg.max_ctx, cfg.d_llm, vb.pp("pos_embed"))?,
            blocks,
            ln_f: ln(cfg.d_llm, vb.pp("ln_f"))?,
            lm_head: candle_nn::linear(cfg.d_llm, cfg.vocab, vb.pp("lm_head"))?,
            max_ctx: cfg.max_ctx,
        })
    }

    pub fn embed_ids(&self, ids: &[u32], dev: &Device) -> Result<Tensor> {
        let t = Tensor::from_vec(ids.to_vec(), ids.len(), dev)?;
        Ok(self.embed.forward(&t)?)
    }

    /// `embeds`: (L, D_llm). Returns (next-token logits (L, V), hidden (L, D_llm)).
    pub fn forward(&self, embeds: &Tensor) -> Result<(Tensor, Tensor)> {
        let (l, _) = embeds.dims2()?;
        if l > self.max_ctx {
            return Err(X2Error::Shape(format!(
                "sequence length {l} exceeds context {}",
                self.max_ctx
            )));
        }
        let dev = embeds.device();
        let pos_ids = Tensor::from_vec((0..l as u32).collect::<Vec<u32>>(), l, dev)?;
        let mut x = (embeds + self.pos.forward(&pos_ids)?)?;
        let mask = causal_mask(l, embeds.dtype(), dev)?;
        for b in &self.blocks {
            x = b.forward(&x, &mask)?;
        }
        let hidden = self.ln_f.forward(&x)?;
        let logits = self.lm_head.forward(&hidden)?;
        Ok((logits, hidden))
    }
}

/// 2-layer projector with a nonlinearity; used for vision -> LLM, region ->
/// LLM, and SEG hidden state -> decoder condition.
pub struct Projector {
    mlp: Mlp,
}

impl Projector {
    pub fn new(d_in: usize, d_out: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self { mlp: Mlp::new(d_in, d_out, d_out, vb)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.mlp.forward(x)
    }
}

/// One SEG-token condition embedding (D_dec) per `<SEG>` position, in
/// position order.
pub fn extract_and_project_seg(
    hidden: &Tensor,
    seg_positions: &[usize],
    proj: &Projector,
) -> Result<Vec<Tensor>> {
    let (l, _) = hidden.dims2()?;
    let mut out = Vec::with_capacity(seg_positions.len());
    for &p in seg_positions {
        if p >= l {
            return Err(X2Error::Shape(format!("seg position {p} out of range {l}")));
        }
        let h = hidden.i(p)?.unsqueeze(0)?;
        out.push(proj.forward(&h)?.squeeze(0)?);
    }
    Ok(out)
}

/// Role of a slot in the assembled LLM input sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotRole {
    Text(u32),
    Vision,
    Region,
}

/// Assembled LLM input: embeddings plus per-slot roles. Text slots keep
/// their token id for auto-regressive supervision; vision and region slots
/// are never supervised.
pub struct TokenEmbeddingSequence {
    /// (L, D_llm)
    pub embeds: Tensor,
    pub roles: Vec<SlotRole>,
}

impl TokenEmbeddingSequence {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }
}
