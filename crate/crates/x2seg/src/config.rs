//! Run configuration: one YAML file with {model, data, schedule, losses,
//! memory} sections, every default written out explicitly. A run is
//! reproducible from (config, seed); `X2SEG_SEED` overrides the file seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbones::BackboneConfig;
use crate::decoder::DecoderConfig;
use crate::error::{Result, X2Error};
use crate::losses::LossWeights;
use crate::memory::MemoryConfig;
use crate::model::ModelConfig;
use crate::region::KernelSize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Agnostic,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
    /// Region pooling kernel width; 0 selects global pooling.
    pub region_kernel: usize,
    pub region_fallback: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            decoder: DecoderConfig::default(),
            region_kernel: 4,
            region_fallback: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    /// Training dataset manifest directory.
    pub train_manifest: String,
    /// Held-out dataset manifest directory for evaluation probes.
    pub eval_manifest: Option<String>,
    pub seed: u64,
    /// Run directory receiving config.yaml, checkpoints/, metrics.jsonl.
    pub out_dir: String,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_manifest: "data/train".into(),
            eval_manifest: None,
            seed: 0,
            out_dir: "runs/default".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSection {
    pub phase: Phase,
    pub lr: f64,
    /// Mask-encoder group rate relative to the base rate.
    pub lr_scale_mask_encoder: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    /// Global gradient-norm clip (0.01 agnostic phase, 1.0 joint phase).
    pub max_norm: f64,
    pub total_steps: usize,
    /// Per-device batch B; images use B x image_multiplier samples.
    pub batch: usize,
    pub image_multiplier: usize,
    pub video_accum_steps: usize,
    pub temperature: f64,
    pub eval_every: usize,
    pub probe_size: usize,
    /// Checkpoint write cadence in optimizer steps.
    pub checkpoint_every: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            phase: Phase::Joint,
            lr: 1e-4,
            lr_scale_mask_encoder: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            warmup_ratio: 0.03,
            max_norm: 1.0,
            total_steps: 1000,
            batch: 1,
            image_multiplier: 4,
            video_accum_steps: 4,
            temperature: 0.1,
            eval_every: 200,
            probe_size: 32,
            checkpoint_every: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub schedule: ScheduleSection,
    pub losses: LossWeights,
    pub memory: MemoryConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSection::default(),
            data: DataSection::default(),
            schedule: ScheduleSection::default(),
            losses: LossWeights::default(),
            memory: MemoryConfig::default(),
        }
    }
}

fn cfg_err(key: &str, msg: impl Into<String>) -> X2Error {
    X2Error::Config { key: key.into(), msg: msg.into() }
}

impl RunConfig {
    pub fn from_yaml(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_yaml::from_str(text)
            .map_err(|e| cfg_err(&yaml_key(&e), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err("(file)", format!("{}: {e}", path.display())))?;
        Self::from_yaml(&text)
    }

    pub fn to_yaml(&self) -> Result<String> {
        serde_yaml::to_string(self).map_err(|e| cfg_err("(serialize)", e.to_string()))
    }

    /// Replace the config seed with `X2SEG_SEED` when the variable is set.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("X2SEG_SEED") {
            let seed: u64 = v
                .parse()
                .map_err(|_| cfg_err("data.seed", format!("X2SEG_SEED not a u64: {v:?}")))?;
            self.data.seed = seed;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if s.lr <= 0.0 {
            return Err(cfg_err("schedule.lr", "must be > 0"));
        }
        if s.temperature <= 0.0 {
            return Err(cfg_err("schedule.temperature", "must be > 0"));
        }
        if s.image_multiplier < 1 {
            return Err(cfg_err("schedule.image_multiplier", "must be >= 1"));
        }
        if s.video_accum_steps < 1 {
            return Err(cfg_err("schedule.video_accum_steps", "must be >= 1"));
        }
        if s.batch < 1 {
            return Err(cfg_err("schedule.batch", "must be >= 1"));
        }
        if s.total_steps < 1 {
            return Err(cfg_err("schedule.total_steps", "must be >= 1"));
        }
        if s.max_norm <= 0.0 {
            return Err(cfg_err("schedule.max_norm", "must be > 0"));
        }
        if !(0.0..1.0).contains(&s.warmup_ratio) {
            return Err(cfg_err("schedule.warmup_ratio", "must be in [0, 1)"));
        }
        let b = &self.model.backbone;
        if b.patch == 0 || b.d_v == 0 || b.d_llm == 0 || b.d_dec == 0 {
            return Err(cfg_err("model.backbone", "dimensions must be nonzero"));
        }
        if b.d_llm % self.model.backbone.llm_heads != 0 {
            return Err(cfg_err("model.backbone.llm_heads", "must divide d_llm"));
        }
        if self.memory.capacity == 0 {
            return Err(cfg_err("memory.capacity", "must be >= 1"));
        }
        if self.losses.lambda_bce < 0.0 || self.losses.lambda_dice < 0.0 {
            return Err(cfg_err("losses", "weights must be >= 0"));
        }
        Ok(())
    }

    /// The assembled model configuration (model + memory sections).
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.model.backbone,
            decoder: self.model.decoder,
            memory: self.memory,
            kernel: if self.model.region_kernel == 0 {
                KernelSize::Global
            } else {
                KernelSize::Fixed(self.model.region_kernel)
            },
            region_fallback: self.model.region_fallback,
        }
    }

    pub fn optim_config(&self) -> crate::optim::OptimConfig {
        let s = &self.schedule;
        crate::optim::OptimConfig {
            lr: s.lr,
            beta1: s.beta1,
            beta2: s.beta2,
            eps: s.eps,
            weight_decay: s.weight_decay,
            max_norm: s.max_norm,
            warmup_ratio: s.warmup_ratio,
            total_steps: s.total_steps,
        }
    }

    /// Digest binding checkpoints to the model-shaping sections
    /// (model + memory + losses); data paths and schedule may differ
    /// between the phases that share one checkpoint.
    pub fn digest(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        #[derive(Serialize)]
        struct Shaping<'a> {
            model: &'a ModelSection,
            losses: &'a LossWeights,
            memory: &'a MemoryConfig,
        }
        let text = serde_yaml::to_string(&Shaping {
            model: &self.model,
            losses: &self.losses,
            memory: &self.memory,
        })
        .map_err(|e| cfg_err("(digest)", e.to_string()))?;
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        Ok(format!("{:x}", h.finalize()))
    }
}

fn yaml_key(err: &serde_yaml::Error) -> String {
    match err.location() {
        Some(loc) => format!("line {} column {}", loc.line(), loc.column()),
        None => "(root)".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_with_all_keys_explicit() {
        let cfg = RunConfig::default();
        let y = cfg.to_yaml().unwrap();
        for key in [
            "image_multiplier: 4",
            "video_accum_steps: 4",
            "temperature: 0.1",
            "lr_scale_mask_encoder: 0.1",
            "warmup_ratio: 0.03",
            "weight_decay: 0.05",
            "lambda_bce: 5.0",
            "lambda_dice: 5.0",
            "lambda_cls: 2.0",
            "focal_gamma: 2.0",
            "focal_alpha: 0.25",
            "capacity: 6",
            "eval_every: 200",
            "probe_size: 32",
        ] {
            assert!(y.contains(key), "missing {key} in\n{y}");
        }
        let back = RunConfig::from_yaml(&y).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn malformed_and_invalid_configs_are_config_errors() {
        let err = RunConfig::from_yaml("model: 3").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let mut cfg = RunConfig::default();
        cfg.schedule.temperature = 0.0;
        let y = cfg.to_yaml().unwrap();
        let err = RunConfig::from_yaml(&y).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(format!("{err}").contains("schedule.temperature"));
    }

    #[test]
    fn digest_tracks_model_sections_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.data.out_dir = "elsewhere".into();
        b.schedule.total_steps = 7;
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        let mut c = a.clone();
        c.memory.capacity = 8;
        assert_ne!(a.digest().unwrap(), c.digest().unwrap());
    }

    #[test]
    fn env_seed_overrides_file_seed() {
        let mut cfg = RunConfig::default();
        std::env::set_var("X2SEG_SEED", "123");
        cfg.apply_env_seed().unwrap();
        std::env::remove_var("X2SEG_SEED");
        assert_eq!(cfg.data.seed, 123);
        std::env::set_var("X2SEG_SEED", "nope");
        let err = cfg.apply_env_seed().unwrap_err();
        std::env::remove_var("X2SEG_SEED");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn kernel_zero_selects_global_pooling() {
        let mut cfg = RunConfig::default();
        cfg.model.region_kernel = 0;
        assert_eq!(cfg.model_config().kernel, KernelSize::Global);
    }
}
