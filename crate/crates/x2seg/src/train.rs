//! Two-phase training: class-agnostic decoder pretraining, then unified
//! joint training with the frame-major forward, modality-aware gradient
//! accumulation, and per-group learning rates.

use candle_core::{DType, Tensor};
use rand::RngCore;

use crate::data::{sample_training_prompt, SyntheticClip, TaskAnnotation};
use crate::error::{Result, X2Error};
use crate::losses::{
    ar_loss, focal_loss, hungarian_match, joint_loss, mask_loss, mask_to_tensor, match_costs,
    JointComponents, LossWeights, SampleKind,
};
use crate::mask::BitMask;
use crate::model::{SegModel, GROUP_DECODER, GROUP_MASK_ENCODER};
use crate::optim::{accumulate_grads, AdamW, GradMap, ParamGroup};
use crate::prompt::{render_prompt, render_target, PromptRecord};
use crate::region::VisualPrompt;
use crate::sampler::Modality;

/// One realized training sample: a clip, its task annotation, the rendered
/// prompt/response pair, and one chosen visual prompt per region slot.
#[derive(Clone)]
pub struct TrainSample {
    pub clip: SyntheticClip,
    pub ann: TaskAnnotation,
    pub record: PromptRecord,
    pub prompts: Vec<VisualPrompt>,
    pub response: String,
}

impl TrainSample {
    pub fn modality(&self) -> Modality {
        if self.clip.t > 1 { Modality::Video } else { Modality::Image }
    }
}

/// Render prompt and target for one annotation, choosing one visual prompt
/// per region slot when the task carries prompt sets.
pub fn build_sample<R: RngCore>(
    clip: &SyntheticClip,
    ann: &TaskAnnotation,
    rng: &mut R,
) -> Result<TrainSample> {
    let record = render_prompt(ann.task, &ann.conditions)?;
    let response = render_target(ann.task, &ann.conditions, &ann.phrases)?;
    let prompts = ann
        .prompts
        .iter()
        .map(|set| sample_training_prompt(set, rng).clone())
        .collect();
    Ok(TrainSample { clip: clip.clone(), ann: ann.clone(), record, prompts, response })
}

/// Majority-vote downsampling of a binary mask by an integer stride.
pub fn downsample_mask(m: &BitMask, stride: usize) -> Result<BitMask> {
    if stride == 0 || m.h % stride != 0 || m.w % stride != 0 {
        return Err(X2Error::Shape(format!(
            "stride {stride} does not divide mask {}x{}",
            m.h, m.w
        )));
    }
    let (h, w) = (m.h / stride, m.w / stride);
    Ok(BitMask::from_fn(h, w, |y, x| {
        let mut on = 0usize;
        for dy in 0..stride {
            for dx in 0..stride {
                if m.get(y * stride + dy, x * stride + dx) {
                    on += 1;
                }
            }
        }
        on * 2 >= stride * stride
    }))
}

/// Class index used for "no object" rows: one past the real categories.
fn no_object(n_cls: usize) -> usize {
    n_cls
}

/// Query classification loss for one frame: match the learnable queries to
/// the visible ground-truth instances, then focal loss with matched labels
/// and no-object everywhere else.
fn query_class_loss(
    model: &SegModel,
    mask_logits: &Tensor,
    class_logits: &Tensor,
    gt_s4: &[Tensor],
    labels: &[usize],
    w: &LossWeights,
) -> Result<Tensor> {
    let n_cls = model.cfg.decoder.n_cls;
    let nq = mask_logits.dim(0)?;
    let mut targets = vec![no_object(n_cls); nq];
    if !gt_s4.is_empty() {
        let cost = match_costs(mask_logits, class_logits, gt_s4, labels, w)?;
        let assign = hungarian_match(&cost)?;
        for (g, &q) in assign.iter().enumerate() {
            targets[q] = labels[g];
        }
    }
    focal_loss(class_logits, &targets, w.focal_gamma, w.focal_alpha)
}

/// Per-sample loss parts as scalars, for logging.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: f64,
    pub ar: f64,
    pub mask: f64,
    pub cls: f64,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Joint-phase loss for one segmentation sample: auto-regressive loss over
/// the response, SEG-aligned mask loss at full resolution, and the matched
/// query classification loss, averaged over frames.
pub fn joint_sample_loss(
    model: &SegModel,
    sample: &TrainSample,
    w: &LossWeights,
) -> Result<(Tensor, LossParts)> {
    let clip = &sample.clip;
    let frames = model.frames_to_tensor(&clip.frames, clip.h, clip.w)?;
    let pass = model.llm_pass(&frames, &sample.record, &sample.prompts, &sample.response)?;
    let (tgt, sup) = pass.ar_targets();
    let ar = ar_loss(&pass.logits, &tgt, &sup)?;
    let segs = model.seg_embeddings(&pass)?;
    let targets = &sample.ann.target_instances;
    if segs.len() != targets.len() {
        return Err(X2Error::Data(format!(
            "{} SEG positions for {} targets",
            segs.len(),
            targets.len()
        )));
    }
    let outs = model.decode_clip(&frames, &segs)?;
    let dtype = frames.dtype();
    let dev = frames.device();
    let mut mask_terms: Vec<Tensor> = Vec::new();
    let mut cls_terms: Vec<Tensor> = Vec::new();
    for (k, out) in outs.iter().enumerate() {
        for (i, &inst) in targets.iter().enumerate() {
            let gt = mask_to_tensor(&clip.instances[inst].track[k], dtype, dev)?;
            let pred = model.full_res(&out.seg_mask_logits[i].unsqueeze(0)?, clip.h, clip.w)?
                .squeeze(0)?;
            mask_terms.push(mask_loss(&pred, &gt, w)?);
        }
        // frame-visible instances supervise the learnable query class head
        let mut gt_s4 = Vec::new();
        let mut labels = Vec::new();
        for inst in &clip.instances {
            if inst.visibility[k] {
                let m4 = downsample_mask(&inst.track[k], 4)?;
                gt_s4.push(mask_to_tensor(&m4, dtype, dev)?);
                labels.push(inst.kind.category_id());
            }
        }
        cls_terms.push(query_class_loss(
            model,
            &out.mask_logits,
            &out.class_logits,
            &gt_s4,
            &labels,
            w,
        )?);
    }
    let mean = |ts: &[Tensor]| -> Result<Tensor> {
        let mut s = ts[0].clone();
        for t in &ts[1..] {
            s = (s + t)?;
        }
        Ok((s / ts.len() as f64)?)
    };
    let mask = mean(&mask_terms)?;
    let cls = (mean(&cls_terms)? * w.lambda_cls)?;
    let parts_ar = scalar(&ar)?;
    let parts_mask = scalar(&mask)?;
    let parts_cls = scalar(&cls)?;
    let total = joint_loss(
        SampleKind::Segmentation,
        JointComponents { ar, mask: Some(mask), cls: Some(cls) },
    )?;
    let parts =
        LossParts { total: scalar(&total)?, ar: parts_ar, mask: parts_mask, cls: parts_cls };
    Ok((total, parts))
}

/// Agnostic-phase loss for one image: learnable queries matched to all
/// instances with class-free mask supervision; the class head is trained
/// as object vs no-object.
pub fn agnostic_sample_loss(
    model: &SegModel,
    clip: &SyntheticClip,
    w: &LossWeights,
) -> Result<(Tensor, LossParts)> {
    if clip.t != 1 {
        return Err(X2Error::Data("agnostic pretraining takes single-frame samples".into()));
    }
    let frames = model.frames_to_tensor(&clip.frames, clip.h, clip.w)?;
    let out = &model.decode_clip(&frames, &[])?[0];
    let dtype = frames.dtype();
    let dev = frames.device();
    let mut gt_s4 = Vec::new();
    let mut gt_full = Vec::new();
    for inst in &clip.instances {
        if inst.visibility[0] {
            gt_s4.push(mask_to_tensor(&downsample_mask(&inst.track[0], 4)?, dtype, dev)?);
            gt_full.push(mask_to_tensor(&inst.track[0], dtype, dev)?);
        }
    }
    // class-agnostic targets: every instance is "object" (label 0)
    let labels = vec![0usize; gt_s4.len()];
    let nq = out.mask_logits.dim(0)?;
    let mut targets = vec![no_object(model.cfg.decoder.n_cls); nq];
    let mut mask_terms: Vec<Tensor> = Vec::new();
    if !gt_s4.is_empty() {
        let cost = match_costs(&out.mask_logits, &out.class_logits, &gt_s4, &labels, w)?;
        let assign = hungarian_match(&cost)?;
        for (g, &q) in assign.iter().enumerate() {
            targets[q] = 0;
            let pred = model
                .full_res(&out.mask_logits.narrow(0, q, 1)?, clip.h, clip.w)?
                .squeeze(0)?;
            mask_terms.push(mask_loss(&pred, &gt_full[g], w)?);
        }
    }
    let cls = (focal_loss(&out.class_logits, &targets, w.focal_gamma, w.focal_alpha)?
        * w.lambda_cls)?;
    let mask = if mask_terms.is_empty() {
        Tensor::zeros((), dtype, dev)?
    } else {
        let mut s = mask_terms[0].clone();
        for t in &mask_terms[1..] {
            s = (s + t)?;
        }
        (s / mask_terms.len() as f64)?
    };
    let parts_mask = scalar(&mask)?;
    let parts_cls = scalar(&cls)?;
    let total = (mask + cls)?;
    let parts = LossParts { total: scalar(&total)?, ar: 0.0, mask: parts_mask, cls: parts_cls };
    Ok((total, parts))
}

/// Clip-level tube assignment for LLM-free video training: per-frame
/// matching costs are summed over the clip (invisible frames contribute an
/// empty target) before one Hungarian pass, so each instance keeps a single
/// query identity across frames.
pub fn tube_assignment(
    outs: &[crate::decoder::DecoderOutput],
    clip: &SyntheticClip,
    w: &LossWeights,
) -> Result<Vec<usize>> {
    let first = &outs[0].mask_logits;
    let (dtype, dev) = (first.dtype(), first.device().clone());
    let nq = first.dim(0)?;
    let mut total = vec![vec![0.0f64; nq]; clip.instances.len()];
    for (k, out) in outs.iter().enumerate() {
        let mut gt = Vec::new();
        for inst in &clip.instances {
            gt.push(mask_to_tensor(&downsample_mask(&inst.track[k], 4)?, dtype, &dev)?);
        }
        let labels = vec![0usize; gt.len()];
        let cost = match_costs(&out.mask_logits, &out.class_logits, &gt, &labels, w)?;
        for (g, row) in cost.iter().enumerate() {
            for (q, c) in row.iter().enumerate() {
                total[g][q] += c;
            }
        }
    }
    hungarian_match(&total)
}

/// LLM-free video loss for the memory ablation: learnable queries are
/// tube-matched to instances, then supervised per frame at full resolution
/// (empty targets while occluded) with object/no-object class supervision on
/// frames where the instance is visible.
pub fn video_agnostic_sample_loss(
    model: &SegModel,
    clip: &SyntheticClip,
    w: &LossWeights,
) -> Result<(Tensor, LossParts)> {
    let frames = model.frames_to_tensor(&clip.frames, clip.h, clip.w)?;
    let outs = model.decode_clip(&frames, &[])?;
    let assign = tube_assignment(&outs, clip, w)?;
    let dtype = frames.dtype();
    let dev = frames.device();
    let nq = outs[0].mask_logits.dim(0)?;
    let mut mask_terms: Vec<Tensor> = Vec::new();
    let mut cls_terms: Vec<Tensor> = Vec::new();
    for (k, out) in outs.iter().enumerate() {
        for (g, &q) in assign.iter().enumerate() {
            let gt = mask_to_tensor(&clip.instances[g].track[k], dtype, dev)?;
            let pred = model
                .full_res(&out.mask_logits.narrow(0, q, 1)?, clip.h, clip.w)?
                .squeeze(0)?;
            mask_terms.push(mask_loss(&pred, &gt, w)?);
        }
        let mut targets = vec![no_object(model.cfg.decoder.n_cls); nq];
        for (g, &q) in assign.iter().enumerate() {
            if clip.instances[g].visibility[k] {
                targets[q] = 0;
            }
        }
        cls_terms.push(focal_loss(&out.class_logits, &targets, w.focal_gamma, w.focal_alpha)?);
    }
    let mean = |ts: &[Tensor]| -> Result<Tensor> {
        let mut s = ts[0].clone();
        for t in &ts[1..] {
            s = (s + t)?;
        }
        Ok((s / ts.len() as f64)?)
    };
    let mask = mean(&mask_terms)?;
    let cls = (mean(&cls_terms)? * w.lambda_cls)?;
    let parts_mask = scalar(&mask)?;
    let parts_cls = scalar(&cls)?;
    let total = (mask + cls)?;
    let parts = LossParts { total: scalar(&total)?, ar: 0.0, mask: parts_mask, cls: parts_cls };
    Ok((total, parts))
}

/// Decoder plus memory parameter groups for LLM-free video training.
pub fn video_agnostic_groups(model: &SegModel) -> Vec<ParamGroup> {
    vec![
        ParamGroup { name: "dec".into(), vars: model.named_vars(GROUP_DECODER), lr_scale: 1.0 },
        ParamGroup { name: "mem".into(), vars: model.named_vars("mem."), lr_scale: 1.0 },
    ]
}

/// Decoder-only parameter group for the agnostic phase.
pub fn agnostic_groups(model: &SegModel) -> Vec<ParamGroup> {
    vec![ParamGroup { name: "dec".into(), vars: model.named_vars(GROUP_DECODER), lr_scale: 1.0 }]
}

/// Joint-phase groups: everything trains, mask encoder at a scaled rate.
pub fn joint_groups(model: &SegModel, menc_scale: f64) -> Vec<ParamGroup> {
    let menc = model.named_vars(GROUP_MASK_ENCODER);
    let base: Vec<(String, candle_core::Var)> = model
        .named_vars("")
        .into_iter()
        .filter(|(n, _)| !n.starts_with(GROUP_MASK_ENCODER))
        .collect();
    vec![
        ParamGroup { name: "base".into(), vars: base, lr_scale: 1.0 },
        ParamGroup { name: "menc".into(), vars: menc, lr_scale: menc_scale },
    ]
}

/// Modality-aware stepper: image micro-batches step immediately, video
/// micro-batches accumulate mean-scaled gradients over `accum` rounds.
pub struct Trainer {
    pub opt: AdamW,
    pub accum: usize,
    acc: GradMap,
    micro_vid: usize,
    pub steps_img: usize,
    pub steps_vid: usize,
}

impl Trainer {
    pub fn new(opt: AdamW, accum: usize) -> Self {
        Self { opt, accum: accum.max(1), acc: GradMap::new(), micro_vid: 0, steps_img: 0, steps_vid: 0 }
    }

    /// Backpropagate one micro-batch loss and step when due. Returns the
    /// clipped gradient norm when an optimizer step fired.
    pub fn micro_step(&mut self, loss: &Tensor, modality: Modality) -> Result<Option<f64>> {
        let grads = loss.backward()?;
        match modality {
            Modality::Image => {
                let mut acc = GradMap::new();
                accumulate_grads(&mut acc, &grads, self.opt.groups(), 1.0)?;
                let norm = self.opt.step(&acc)?;
                self.steps_img += 1;
                Ok(Some(norm))
            }
            Modality::Video => {
                accumulate_grads(&mut self.acc, &grads, self.opt.groups(), 1.0 / self.accum as f64)?;
                self.micro_vid += 1;
                if self.micro_vid % self.accum == 0 {
                    let acc = std::mem::take(&mut self.acc);
                    let norm = self.opt.step(&acc)?;
                    self.steps_vid += 1;
                    Ok(Some(norm))
                } else {
                    Ok(None)
                }
            }
        }
    }

    pub fn total_steps(&self) -> usize {
        self.steps_img + self.steps_vid
    }
}

/// Result of one training phase.
#[derive(Debug, Clone, Copy)]
pub struct PhaseOutcome {
    /// Optimizer steps taken.
    pub steps: usize,
    /// Whether the early-stop target was reached.
    pub reached: bool,
    /// Last probe value (mask IoU for agnostic, gIoU for joint).
    pub probe: f64,
    /// Last secondary probe value (J&F for joint, 0 for agnostic).
    pub probe2: f64,
}

use std::path::Path;

use crate::config::RunConfig;
use crate::sampler::{DatasetSpec, Sampler};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn emit(
    out_dir: Option<&Path>,
    model: &SegModel,
    cfg: &RunConfig,
    phase: &str,
    step: usize,
    values: std::collections::BTreeMap<String, f64>,
    checkpoint_due: bool,
) -> Result<()> {
    let Some(dir) = out_dir else { return Ok(()) };
    crate::eval::append_event(
        &dir.join("metrics.jsonl"),
        &crate::eval::MetricsEvent {
            step,
            phase: phase.to_string(),
            kind: "eval".to_string(),
            values,
        },
    )?;
    if checkpoint_due {
        let path = dir.join("checkpoints").join(format!("step_{step}.bin"));
        crate::checkpoint::save(&path, &cfg.digest()?, step, model)?;
    }
    Ok(())
}

fn guard_finite(loss: &LossParts, batch_index: usize) -> Result<()> {
    if !loss.total.is_finite() {
        return Err(X2Error::Numeric(format!(
            "non-finite loss {} at micro-batch {batch_index}",
            loss.total
        )));
    }
    Ok(())
}

/// Agnostic pretraining loop: decoder-only updates on single-frame clips,
/// probing matched-query mask IoU at the eval cadence. Stops early when
/// `target_iou` is reached.
pub fn run_agnostic(
    model: &SegModel,
    cfg: &RunConfig,
    clips: &[SyntheticClip],
    out_dir: Option<&Path>,
    target_iou: Option<f64>,
    start_step: usize,
) -> Result<PhaseOutcome> {
    if clips.is_empty() {
        return Err(X2Error::Data("no single-frame samples for agnostic pretraining".into()));
    }
    if clips.iter().any(|c| c.t != 1) {
        return Err(X2Error::Data("agnostic pretraining takes single-frame samples".into()));
    }
    let w = cfg.losses;
    let sched = cfg.schedule;
    let mut opt = AdamW::new(cfg.optim_config(), agnostic_groups(model));
    opt.set_step(start_step);
    let mut trainer = Trainer::new(opt, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data.seed);
    let probe_set = &clips[..clips.len().min(sched.probe_size)];
    let encoder_digest = model.param_digest(crate::model::GROUP_MASK_ENCODER)?;
    let batch = sched.batch * sched.image_multiplier;
    let mut probe = 0.0;
    let mut reached = false;
    for step in start_step..sched.total_steps {
        let mut losses = Vec::with_capacity(batch);
        for _ in 0..batch {
            let clip = &clips[(rng.next_u32() as usize) % clips.len()];
            let (loss, parts) = agnostic_sample_loss(model, clip, &w)?;
            guard_finite(&parts, step)?;
            losses.push(loss);
        }
        let mut sum = losses[0].clone();
        for l in &losses[1..] {
            sum = (sum + l)?;
        }
        let mean = (sum / losses.len() as f64)?;
        trainer.micro_step(&mean, Modality::Image)?;
        let done = step + 1 == sched.total_steps;
        if (step + 1) % sched.eval_every == 0 || done {
            probe = crate::eval::agnostic_probe_iou(model, probe_set, &w)?;
            let mut values = std::collections::BTreeMap::new();
            values.insert("mask_iou".to_string(), probe);
            let ckpt_due = (step + 1) % sched.checkpoint_every == 0 || done;
            emit(out_dir, model, cfg, "agnostic", step + 1, values, ckpt_due)?;
            if let Some(t) = target_iou {
                if probe >= t {
                    reached = true;
                    break;
                }
            }
        }
    }
    debug_assert_eq!(
        model.param_digest(crate::model::GROUP_MASK_ENCODER)?,
        encoder_digest,
        "mask encoder moved during the frozen phase"
    );
    Ok(PhaseOutcome { steps: start_step + trainer.total_steps(), reached, probe, probe2: 0.0 })
}

/// Joint targets for early stopping.
#[derive(Debug, Clone, Copy)]
pub struct JointTargets {
    pub giou: f64,
    pub jf: f64,
}

/// Joint training loop over pre-built samples with temperature resampling
/// across (modality, T) groups, the image batch multiplier, and video
/// gradient accumulation.
pub fn run_joint(
    model: &SegModel,
    cfg: &RunConfig,
    samples: &[TrainSample],
    out_dir: Option<&Path>,
    targets: Option<JointTargets>,
    start_step: usize,
) -> Result<PhaseOutcome> {
    if samples.is_empty() {
        return Err(X2Error::Data("no samples for joint training".into()));
    }
    let w = cfg.losses;
    let sched = cfg.schedule;
    // group by (modality, T) so every video batch is length-homogeneous
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(s.clip.t).or_default().push(i);
    }
    let mut specs = Vec::new();
    let mut index: Vec<Vec<usize>> = Vec::new();
    for (t, idxs) in &groups {
        specs.push(DatasetSpec {
            name: format!("t{t}"),
            size: idxs.len(),
            modality: if *t > 1 { Modality::Video } else { Modality::Image },
            t: *t,
        });
        index.push(idxs.clone());
    }
    let sampler = Sampler::new(
        specs,
        sched.temperature,
        sched.batch * sched.image_multiplier,
        sched.batch,
    )?;
    let mut opt = AdamW::new(cfg.optim_config(), joint_groups(model, sched.lr_scale_mask_encoder));
    opt.set_step(start_step);
    let mut trainer = Trainer::new(opt, sched.video_accum_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data.seed.wrapping_add(1));
    let probe_set = &samples[..samples.len().min(sched.probe_size)];
    let mut probe = 0.0;
    let mut probe2 = 0.0;
    let mut reached = false;
    let mut micro = 0usize;
    while start_step + trainer.total_steps() < sched.total_steps {
        let batch = sampler.next_batch(&mut rng);
        let mut losses = Vec::with_capacity(batch.samples.len());
        for &j in &batch.samples {
            let sample = &samples[index[batch.dataset][j]];
            let (loss, parts) = joint_sample_loss(model, sample, &w)?;
            guard_finite(&parts, micro)?;
            losses.push(loss);
        }
        let mut sum = losses[0].clone();
        for l in &losses[1..] {
            sum = (sum + l)?;
        }
        let mean = (sum / losses.len() as f64)?;
        let stepped = trainer.micro_step(&mean, batch.modality)?.is_some();
        micro += 1;
        let step = start_step + trainer.total_steps();
        let done = step >= sched.total_steps;
        if stepped && (step % sched.eval_every == 0 || done) {
            let r = crate::eval::evaluate(model, probe_set)?;
            probe = r.giou;
            probe2 = r.jf;
            let ckpt_due = step % sched.checkpoint_every == 0 || done;
            emit(out_dir, model, cfg, "joint", step, r.values(), ckpt_due)?;
            if let Some(t) = targets {
                if probe >= t.giou && probe2 >= t.jf {
                    reached = true;
                    break;
                }
            }
        }
    }
    Ok(PhaseOutcome { steps: start_step + trainer.total_steps(), reached, probe, probe2 })
}
