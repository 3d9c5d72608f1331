//! Temporal mask memory: a FIFO bank of guided features from recent frames,
//! cross-attention that refines the current frame's pyramid against the
//! bank, and the guided-feature encoder that fuses features with the
//! frame's mask logits and an optional class embedding.

use std::collections::VecDeque;

use candle_core::Tensor;
use candle_nn::{conv2d, embedding, linear, Conv2d, Conv2dConfig, Embedding, Linear, Module, VarBuilder};

use crate::backbones::MultiScaleFeatures;
use crate::error::{Result, X2Error};
use crate::nn::{ln, upsample_bilinear, Ln, Mha};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MemoryConfig {
    /// Bank capacity K (8 in the ablation grid, 6 in the final setting).
    pub capacity: usize,
    pub enabled: bool,
    /// Fuse current mask logits into the guided feature.
    pub mask_guide: bool,
    /// Add a class embedding to the guided feature.
    pub class_guide: bool,
    /// Inject the refinement residual into the stride-8/4 levels too.
    pub multi_scale: bool,
    pub attn_layers: usize,
    pub n_heads: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            capacity: 6,
            enabled: true,
            mask_guide: true,
            class_guide: true,
            multi_scale: true,
            attn_layers: 2,
            n_heads: 4,
        }
    }
}

/// Guided feature of one processed frame, stored at stride 16.
#[derive(Clone)]
pub struct GuidedFeature {
    /// (C_mem, H16, W16)
    pub map: Tensor,
    pub frame_index: usize,
}

/// FIFO cache of guided features, oldest first.
pub struct MemoryBank {
    entries: VecDeque<GuidedFeature>,
    capacity: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "capacity must be >= 1");
        Self { entries: VecDeque::new(), capacity }
    }

    pub fn push(&mut self, g: GuidedFeature) -> Result<()> {
        if let Some(last) = self.entries.back() {
            if g.frame_index <= last.frame_index {
                return Err(X2Error::Data(format!(
                    "bank push with non-increasing frame index {} after {}",
                    g.frame_index, last.frame_index
                )));
            }
        }
        self.entries.push_back(g);
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.entries.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> impl Iterator<Item = &GuidedFeature> {
        self.entries.iter()
    }
}

struct AttnLayer {
    norm: Ln,
    attn: Mha,
}

/// Init patterns zeroing the attention output projections, so a fresh
/// module refines nothing and the video path starts identical to the
/// per-frame path. The contribution of the bank is then learned.
pub fn mem_zero_patterns(cfg: &MemoryConfig, prefix: &str) -> Vec<String> {
    (0..cfg.attn_layers).map(|i| format!("{prefix}.layer{i}.attn.wo.")).collect()
}

pub struct MemoryModule {
    pub cfg: MemoryConfig,
    layers: Vec<AttnLayer>,
    /// Indexed by min(current - entry, capacity); slot 0 unused.
    recency: Embedding,
    fuse1: Conv2d,
    fuse2: Conv2d,
    /// Per-position channel norm keeping bank entries at unit scale, so
    /// re-encoding refined features cannot amplify frame over frame.
    out_norm: Ln,
    class_proj: Linear,
}

impl MemoryModule {
    pub fn new(cfg: MemoryConfig, c_m: usize, n_cls: usize, vb: VarBuilder) -> Result<Self> {
        let layers = (0..cfg.attn_layers)
            .map(|i| -> Result<AttnLayer> {
                let lvb = vb.pp(format!("layer{i}"));
                Ok(AttnLayer {
                    norm: ln(c_m, lvb.pp("norm"))?,
                    attn: Mha::new(c_m, cfg.n_heads, lvb.pp("attn"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let conv_cfg = Conv2dConfig { padding: 1, ..Default::default() };
        Ok(Self {
            layers,
            recency: embedding(cfg.capacity + 1, c_m, vb.pp("recency_embed"))?,
            fuse1: conv2d(c_m + 1, c_m, 3, conv_cfg, vb.pp("fuse1"))?,
            fuse2: conv2d(c_m, c_m, 3, conv_cfg, vb.pp("fuse2"))?,
            out_norm: ln(c_m, vb.pp("out_norm"))?,
            class_proj: linear(n_cls + 1, c_m, vb.pp("class_proj"))?,
            cfg,
        })
    }

    /// Refine the current frame's pyramid against the bank. An empty bank
    /// (or a disabled module) returns the input unchanged, bit for bit.
    pub fn attend(
        &self,
        current: &MultiScaleFeatures,
        bank: &MemoryBank,
        frame_index: usize,
    ) -> Result<MultiScaleFeatures> {
        if !self.cfg.enabled || bank.is_empty() {
            return Ok(current.clone());
        }
        let (c, h16, w16) = current.s16.dims3()?;
        let dev = current.s16.device();
        let q0 = current.s16.reshape((c, h16 * w16))?.t()?; // (HW, C)

        let mut keys = Vec::new();
        for e in bank.entries() {
            let (ec, eh, ew) = e.map.dims3()?;
            if (ec, eh, ew) != (c, h16, w16) {
                return Err(X2Error::Shape(format!(
                    "bank entry {}x{}x{} mismatches current {}x{}x{}",
                    ec, eh, ew, c, h16, w16
                )));
            }
            if e.frame_index >= frame_index {
                return Err(X2Error::Data(format!(
                    "bank entry frame {} is not older than current {frame_index}",
                    e.frame_index
                )));
            }
            let age = (frame_index - e.frame_index).min(self.cfg.capacity) as u32;
            let age_id = Tensor::from_vec(vec![age], 1, dev)?;
            let rec = self.recency.forward(&age_id)?.to_dtype(e.map.dtype())?; // (1, C)
            let flat = e.map.reshape((c, h16 * w16))?.t()?; // (HW, C)
            keys.push(flat.broadcast_add(&rec)?);
        }
        let kv = Tensor::cat(&keys, 0)?;

        let mut x = q0.clone();
        for l in &self.layers {
            x = (&x + l.attn.forward(&l.norm.forward(&x)?, &kv, None)?)?;
        }
        let residual = (&x - &q0)?; // (HW, C)
        let res16 = residual.t()?.reshape((c, h16, w16))?;
        let s16 = (&current.s16 + &res16)?;
        if !self.cfg.multi_scale {
            return Ok(MultiScaleFeatures { s4: current.s4.clone(), s8: current.s8.clone(), s16 });
        }
        let (_, h8, w8) = current.s8.dims3()?;
        let (_, h4, w4) = current.s4.dims3()?;
        let s8 = (&current.s8 + upsample_bilinear(&res16, h8, w8)?)?;
        let s4 = (&current.s4 + upsample_bilinear(&res16, h4, w4)?)?;
        Ok(MultiScaleFeatures { s4, s8, s16 })
    }

    /// Build the guided feature of the current frame: stride-16 features
    /// fused with the downsampled per-pixel max of sigmoid mask logits, plus
    /// an optional broadcast class embedding.
    pub fn encode(
        &self,
        refined: &MultiScaleFeatures,
        mask_logits: &Tensor,
        class_embedding: Option<&Tensor>,
        frame_index: usize,
    ) -> Result<GuidedFeature> {
        let (c, h16, w16) = refined.s16.dims3()?;
        let guide = if self.cfg.mask_guide {
            let agg = mask_logits.max(0)?; // (H4, W4)
            let (h4, w4) = agg.dims2()?;
            if h4 % h16 != 0 || w4 % w16 != 0 {
                return Err(X2Error::Shape(format!(
                    "mask logits {h4}x{w4} not an integer multiple of stride-16 {h16}x{w16}"
                )));
            }
            let probs = candle_nn::ops::sigmoid(&agg)?.reshape((1, 1, h4, w4))?;
            probs.avg_pool2d(h4 / h16)?.reshape((1, h16, w16))?
        } else {
            Tensor::zeros((1, h16, w16), refined.s16.dtype(), refined.s16.device())?
        };
        let stacked = Tensor::cat(&[&refined.s16, &guide], 0)?.unsqueeze(0)?;
        let fused = self.fuse2.forward(&self.fuse1.forward(&stacked)?.gelu_erf()?)?;
        let fused = fused.squeeze(0)?.reshape((c, h16 * w16))?.t()?; // (HW, C)
        let mut map = self.out_norm.forward(&fused)?.t()?.reshape((c, h16, w16))?;
        if self.cfg.class_guide {
            if let Some(e) = class_embedding {
                if e.dims() != [c] {
                    return Err(X2Error::Shape(format!(
                        "class embedding shape {:?}, expected [{c}]",
                        e.dims()
                    )));
                }
                map = map.broadcast_add(&e.reshape((c, 1, 1))?)?;
            }
        }
        Ok(GuidedFeature { map, frame_index })
    }

    /// Class embedding source: softmax class logits averaged over queries,
    /// mapped through a small table.
    pub fn class_embedding(&self, class_logits: &Tensor) -> Result<Tensor> {
        let probs = candle_nn::ops::softmax(class_logits, 1)?; // (N_q, n_cls+1)
        let mean = probs.mean(0)?.unsqueeze(0)?; // (1, n_cls+1)
        Ok(self.class_proj.forward(&mean)?.squeeze(0)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use candle_nn::{VarBuilder, VarMap};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::nn::seeded_init;

    fn module(cfg: MemoryConfig) -> MemoryModule {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
        let m = MemoryModule::new(cfg, 64, 3, vb.pp("mem")).unwrap();
        seeded_init(&varmap, 9, &[]).unwrap();
        m
    }

    fn rand_t(seed: u64, shape: (usize, usize, usize)) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2;
        let v: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn features(seed: u64) -> MultiScaleFeatures {
        MultiScaleFeatures {
            s4: rand_t(seed, (64, 16, 16)),
            s8: rand_t(seed + 1, (64, 8, 8)),
            s16: rand_t(seed + 2, (64, 4, 4)),
        }
    }

    fn guided(seed: u64, frame_index: usize) -> GuidedFeature {
        GuidedFeature { map: rand_t(seed, (64, 4, 4)), frame_index }
    }

    fn flat(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
    }

    #[test]
    fn fifo_law_exhaustive() {
        for k in [1usize, 2, 4, 6, 8] {
            for n in 0..=20usize {
                let mut bank = MemoryBank::new(k);
                for i in 0..n {
                    bank.push(guided(i as u64, i)).unwrap();
                }
                assert_eq!(bank.len(), n.min(k));
                let expect: Vec<usize> = (n.saturating_sub(k)..n).collect();
                let got: Vec<usize> = bank.entries().map(|g| g.frame_index).collect();
                assert_eq!(got, expect, "k={k} n={n}");
            }
        }
    }

    #[test]
    fn non_increasing_push_rejected() {
        let mut bank = MemoryBank::new(4);
        bank.push(guided(0, 3)).unwrap();
        assert!(bank.push(guided(1, 3)).is_err());
        assert!(bank.push(guided(2, 1)).is_err());
        assert_eq!(bank.len(), 1);
    }

    #[test]
    fn reset_is_idempotent() {
        let mut bank = MemoryBank::new(2);
        bank.push(guided(0, 0)).unwrap();
        bank.reset();
        assert_eq!(bank.len(), 0);
        bank.reset();
        assert_eq!(bank.len(), 0);
    }

    #[test]
    fn empty_bank_attend_is_identity() {
        let m = module(MemoryConfig::default());
        let f = features(0);
        let bank = MemoryBank::new(6);
        let out = m.attend(&f, &bank, 5).unwrap();
        assert_eq!(flat(&f.s4), flat(&out.s4));
        assert_eq!(flat(&f.s8), flat(&out.s8));
        assert_eq!(flat(&f.s16), flat(&out.s16));
    }

    #[test]
    fn disabled_module_is_identity_even_with_entries() {
        let m = module(MemoryConfig { enabled: false, ..Default::default() });
        let f = features(0);
        let mut bank = MemoryBank::new(6);
        bank.push(guided(7, 0)).unwrap();
        let out = m.attend(&f, &bank, 1).unwrap();
        assert_eq!(flat(&f.s16), flat(&out.s16));
    }

    #[test]
    fn single_vs_multi_scale_differ_only_below_stride_16() {
        let multi = module(MemoryConfig::default());
        let single = module(MemoryConfig { multi_scale: false, ..Default::default() });
        let f = features(3);
        let mut bank = MemoryBank::new(6);
        bank.push(guided(11, 0)).unwrap();
        bank.push(guided(12, 1)).unwrap();
        let a = multi.attend(&f, &bank, 2).unwrap();
        let b = single.attend(&f, &bank, 2).unwrap();
        assert_eq!(flat(&a.s16), flat(&b.s16));
        assert_ne!(flat(&a.s8), flat(&b.s8));
        assert_ne!(flat(&a.s4), flat(&b.s4));
        assert_eq!(flat(&b.s8), flat(&f.s8), "single-scale leaves stride 8 untouched");
        for v in flat(&a.s4) {
            assert!(v.is_finite());
        }
    }

    #[test]
    fn mismatched_entry_dims_rejected() {
        let m = module(MemoryConfig::default());
        let f = features(0);
        let mut bank = MemoryBank::new(6);
        bank.push(GuidedFeature { map: rand_t(0, (64, 8, 8)), frame_index: 0 }).unwrap();
        assert!(m.attend(&f, &bank, 1).is_err());
    }

    #[test]
    fn guided_map_is_stride_16() {
        let m = module(MemoryConfig::default());
        let f = features(1);
        let logits = rand_t(5, (16, 16, 16)); // N_q x H4 x W4 for a 64x64 frame
        let g = m.encode(&f, &logits, None, 0).unwrap();
        assert_eq!(g.map.dims(), &[64, 4, 4]);
    }

    #[test]
    fn mask_guide_disabled_ignores_logits() {
        let m = module(MemoryConfig { mask_guide: false, ..Default::default() });
        let f = features(1);
        let a = m.encode(&f, &rand_t(5, (16, 16, 16)), None, 0).unwrap();
        let b = m.encode(&f, &rand_t(6, (16, 16, 16)), None, 0).unwrap();
        assert_eq!(flat(&a.map), flat(&b.map));
        let with = module(MemoryConfig::default());
        let a = with.encode(&f, &rand_t(5, (16, 16, 16)), None, 0).unwrap();
        let b = with.encode(&f, &rand_t(6, (16, 16, 16)), None, 0).unwrap();
        assert_ne!(flat(&a.map), flat(&b.map));
    }

    #[test]
    fn class_guide_shift_is_spatially_constant() {
        let m = module(MemoryConfig::default());
        let f = features(2);
        let logits = rand_t(7, (16, 16, 16));
        let e1 = rand_t(20, (64, 1, 1)).reshape(64).unwrap();
        let e2 = rand_t(21, (64, 1, 1)).reshape(64).unwrap();
        let a = m.encode(&f, &logits, Some(&e1), 0).unwrap();
        let b = m.encode(&f, &logits, Some(&e2), 0).unwrap();
        let delta = (e1 - e2).unwrap().to_vec1::<f32>().unwrap();
        let da = a.map.to_vec3::<f32>().unwrap();
        let db = b.map.to_vec3::<f32>().unwrap();
        for (c, &d) in delta.iter().enumerate() {
            for y in 0..4 {
                for x in 0..4 {
                    let got = da[c][y][x] - db[c][y][x];
                    assert!((got - d).abs() < 1e-5, "channel {c} at ({y},{x}): {got} vs {d}");
                }
            }
        }
    }

    #[test]
    fn class_embedding_shape() {
        let m = module(MemoryConfig::default());
        let logits = Tensor::randn(0f32, 1., (16, 4), &Device::Cpu).unwrap();
        let e = m.class_embedding(&logits).unwrap();
        assert_eq!(e.dims(), &[64]);
    }

    #[test]
    fn identical_entries_smoke() {
        let m = module(MemoryConfig::default());
        let f = features(4);
        let mut bank = MemoryBank::new(8);
        for i in 0..8 {
            bank.push(GuidedFeature { map: f.s16.clone(), frame_index: i }).unwrap();
        }
        let out = m.attend(&f, &bank, 8).unwrap();
        for v in flat(&out.s16) {
            assert!(v.is_finite());
        }
    }
}
