//! Teacher-forced evaluation: threshold the decoded SEG masks, score them
//! with the full metric suite per task, and emit one JSON event per probe.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use candle_core::Tensor;
use serde::Serialize;

use crate::data::{SyntheticClip, TaskAnnotation};
use crate::error::{Result, X2Error};
use crate::mask::BitMask;
use crate::metrics::{
    ciou, giou, j_f, mask_ap, miou, mvc, pq, vpq, ApReport, GtInstance, InstancePrediction,
    PanopticSegment, SemanticFrame, VPQ_WINDOWS,
};
use crate::model::SegModel;
use crate::train::TrainSample;

/// Predicted mask tracks, `tracks[i][k]` for target i at frame k.
pub struct SamplePrediction {
    pub tracks: Vec<Vec<BitMask>>,
    /// Per-target confidence: mean foreground probability inside the
    /// predicted region (0 when the region is empty).
    pub scores: Vec<f64>,
}

fn threshold(logits: &Tensor) -> Result<(BitMask, f64)> {
    let (h, w) = logits.dims2()?;
    let v = logits.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let m = BitMask::from_fn(h, w, |y, x| v[y * w + x] > 0.0);
    let mut prob_sum = 0f64;
    let mut n = 0usize;
    for &x in &v {
        if x > 0.0 {
            prob_sum += 1.0 / (1.0 + (-x as f64).exp());
            n += 1;
        }
    }
    let score = if n == 0 { 0.0 } else { prob_sum / n as f64 };
    Ok((m, score))
}

/// Teacher-forced prediction: run the LLM on the ground-truth response,
/// harvest SEG embeddings, decode every frame, threshold at logit zero.
pub fn predict(model: &SegModel, sample: &TrainSample) -> Result<SamplePrediction> {
    let clip = &sample.clip;
    let frames = model.frames_to_tensor(&clip.frames, clip.h, clip.w)?;
    let pass = model.llm_pass(&frames, &sample.record, &sample.prompts, &sample.response)?;
    let segs = model.seg_embeddings(&pass)?;
    if segs.len() != sample.ann.target_instances.len() {
        return Err(X2Error::Data(format!(
            "{} SEG positions for {} targets",
            segs.len(),
            sample.ann.target_instances.len()
        )));
    }
    let outs = model.decode_clip(&frames, &segs)?;
    let mut tracks = vec![Vec::with_capacity(clip.t); segs.len()];
    let mut score_sums = vec![0f64; segs.len()];
    for out in &outs {
        for i in 0..segs.len() {
            let full = model
                .full_res(&out.seg_mask_logits[i].unsqueeze(0)?, clip.h, clip.w)?
                .squeeze(0)?;
            let (m, s) = threshold(&full)?;
            tracks[i].push(m);
            score_sums[i] += s;
        }
    }
    let scores = score_sums.iter().map(|s| s / clip.t as f64).collect();
    Ok(SamplePrediction { tracks, scores })
}

/// Class-agnostic track predictions for one clip, aligned with its
/// instances: decode every frame without conditions, tube-match the
/// learnable queries, threshold at logit zero.
pub fn tube_matched_tracks(
    model: &SegModel,
    clip: &SyntheticClip,
    w: &crate::losses::LossWeights,
) -> Result<Vec<Vec<BitMask>>> {
    let frames = model.frames_to_tensor(&clip.frames, clip.h, clip.w)?;
    let outs = model.decode_clip(&frames, &[])?;
    let assign = crate::train::tube_assignment(&outs, clip, w)?;
    let mut tracks = vec![Vec::with_capacity(clip.t); assign.len()];
    for out in &outs {
        for (g, &q) in assign.iter().enumerate() {
            let full = model
                .full_res(&out.mask_logits.narrow(0, q, 1)?, clip.h, clip.w)?
                .squeeze(0)?;
            tracks[g].push(threshold(&full)?.0);
        }
    }
    Ok(tracks)
}

/// Ground-truth tracks for a sample's targets (identity predictions).
pub fn gt_tracks(sample: &TrainSample) -> Vec<Vec<BitMask>> {
    sample
        .ann
        .target_instances
        .iter()
        .map(|&i| sample.clip.instances[i].track.clone())
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub giou: f64,
    pub ciou: f64,
    pub miou: f64,
    pub j: f64,
    pub f: f64,
    pub jf: f64,
    pub pq: f64,
    pub vpq_mean: f64,
    pub vpq_per_window: Vec<(usize, f64)>,
    pub mvc8: f64,
}

/// Score predicted tracks against the annotation targets. Feeding the
/// ground-truth tracks back in yields 1.0 everywhere.
pub fn report(samples: &[TrainSample], preds: &[Vec<Vec<BitMask>>]) -> Result<EvalReport> {
    if samples.len() != preds.len() {
        return Err(X2Error::Shape("samples/predictions length mismatch".into()));
    }
    let mut pairs: Vec<(BitMask, BitMask)> = Vec::new();
    let mut miou_entries: Vec<(usize, BitMask, BitMask)> = Vec::new();
    let mut js = Vec::new();
    let mut fs = Vec::new();
    let mut jfs = Vec::new();
    let mut pqs = Vec::new();
    let mut vpq_means = Vec::new();
    let mut vpq_windows: Vec<Vec<f64>> = vec![Vec::new(); VPQ_WINDOWS.len()];
    let mut mvcs = Vec::new();
    for (sample, tracks) in samples.iter().zip(preds.iter()) {
        let clip = &sample.clip;
        let targets = &sample.ann.target_instances;
        if tracks.len() != targets.len() {
            return Err(X2Error::Shape("prediction/target count mismatch".into()));
        }
        let mut pred_seg = Vec::new();
        let mut gt_seg = Vec::new();
        // disjoint panoptic prediction: earlier targets claim pixels first
        let mut claimed: Vec<BitMask> =
            (0..clip.t).map(|_| BitMask::zeros(clip.h, clip.w)).collect();
        for (i, &inst_idx) in targets.iter().enumerate() {
            let inst = &clip.instances[inst_idx];
            for k in 0..clip.t {
                pairs.push((tracks[i][k].clone(), inst.track[k].clone()));
                miou_entries.push((
                    inst.kind.category_id(),
                    tracks[i][k].clone(),
                    inst.track[k].clone(),
                ));
            }
            let (jm, fm, jfm) = j_f(&tracks[i], &inst.track)?;
            js.push(jm);
            fs.push(fm);
            jfs.push(jfm);
            let disjoint: Vec<BitMask> = (0..clip.t)
                .map(|k| {
                    let mut m = tracks[i][k].clone();
                    for y in 0..clip.h {
                        for x in 0..clip.w {
                            if claimed[k].get(y, x) && m.get(y, x) {
                                m.set(y, x, false);
                            }
                            if m.get(y, x) {
                                claimed[k].set(y, x, true);
                            }
                        }
                    }
                    m
                })
                .collect();
            pred_seg.push(PanopticSegment {
                id: i,
                category: inst.kind.category_id(),
                track: disjoint,
            });
            gt_seg.push(PanopticSegment {
                id: i,
                category: inst.kind.category_id(),
                track: inst.track.clone(),
            });
        }
        pqs.push(pq(&pred_seg, &gt_seg)?.pq);
        let v = vpq(&pred_seg, &gt_seg, &VPQ_WINDOWS)?;
        vpq_means.push(v.mean);
        for (slot, (_, val)) in v.per_window.iter().enumerate() {
            vpq_windows[slot].push(*val);
        }
        let sem = |segs: &[PanopticSegment]| -> Vec<SemanticFrame> {
            (0..clip.t)
                .map(|k| {
                    let mut f = SemanticFrame::new();
                    for s in segs {
                        let m = f
                            .entry(s.category)
                            .or_insert_with(|| BitMask::zeros(clip.h, clip.w));
                        for y in 0..clip.h {
                            for x in 0..clip.w {
                                if s.track[k].get(y, x) {
                                    m.set(y, x, true);
                                }
                            }
                        }
                    }
                    f
                })
                .collect()
        };
        mvcs.push(mvc(&sem(&pred_seg), &sem(&gt_seg), 8)?);
    }
    let mean = |v: &[f64]| if v.is_empty() { 1.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(EvalReport {
        n_samples: samples.len(),
        giou: giou(&pairs)?,
        ciou: ciou(&pairs)?,
        miou: miou(&miou_entries)?,
        j: mean(&js),
        f: mean(&fs),
        jf: mean(&jfs),
        pq: mean(&pqs),
        vpq_mean: mean(&vpq_means),
        vpq_per_window: VPQ_WINDOWS
            .iter()
            .zip(vpq_windows.iter())
            .map(|(&w, v)| (w, mean(v)))
            .collect(),
        mvc8: mean(&mvcs),
    })
}

/// Run teacher-forced prediction over samples and score them.
pub fn evaluate(model: &SegModel, samples: &[TrainSample]) -> Result<EvalReport> {
    let mut preds = Vec::with_capacity(samples.len());
    for s in samples {
        preds.push(predict(model, s)?.tracks);
    }
    report(samples, &preds)
}

/// AP over visual-grounded samples where every target uses the prompt at
/// `prompt_index` in its prompt set (0 point, 1 box, 2 scribble, 3 mask).
pub fn vgd_ap(
    model: &SegModel,
    items: &[(SyntheticClip, TaskAnnotation)],
    prompt_index: usize,
) -> Result<ApReport> {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for (clip, ann) in items {
        let record = crate::prompt::render_prompt(ann.task, &ann.conditions)?;
        let response = crate::prompt::render_target(ann.task, &ann.conditions, &ann.phrases)?;
        let prompts: Vec<_> = ann
            .prompts
            .iter()
            .map(|set| {
                set.get(prompt_index)
                    .cloned()
                    .ok_or_else(|| X2Error::Prompt(format!("no prompt at index {prompt_index}")))
            })
            .collect::<Result<_>>()?;
        let sample = TrainSample {
            clip: clip.clone(),
            ann: ann.clone(),
            record,
            prompts,
            response,
        };
        let p = predict(model, &sample)?;
        for (i, &inst_idx) in ann.target_instances.iter().enumerate() {
            let inst = &clip.instances[inst_idx];
            preds.push(InstancePrediction {
                track: p.tracks[i].clone(),
                category: inst.kind.category_id(),
                score: p.scores[i],
            });
            gts.push(GtInstance { track: inst.track.clone(), category: inst.kind.category_id() });
        }
    }
    mask_ap(&preds, &gts)
}

/// One metrics.jsonl line.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsEvent {
    pub step: usize,
    pub phase: String,
    pub kind: String,
    pub values: BTreeMap<String, f64>,
}

pub fn append_event(path: &Path, event: &MetricsEvent) -> Result<()> {
    let line = serde_json::to_string(event)
        .map_err(|e| X2Error::Data(format!("metrics event: {e}")))?;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| X2Error::Data(format!("metrics {}: {e}", path.display())))?;
    writeln!(f, "{line}").map_err(|e| X2Error::Data(format!("metrics {}: {e}", path.display())))?;
    Ok(())
}

impl EvalReport {
    pub fn values(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("giou".into(), self.giou);
        m.insert("ciou".into(), self.ciou);
        m.insert("miou".into(), self.miou);
        m.insert("j".into(), self.j);
        m.insert("f".into(), self.f);
        m.insert("jf".into(), self.jf);
        m.insert("pq".into(), self.pq);
        m.insert("vpq".into(), self.vpq_mean);
        for (w, v) in &self.vpq_per_window {
            m.insert(format!("vpq{w}"), *v);
        }
        m.insert("mvc8".into(), self.mvc8);
        m
    }
}

/// Matched-query mask IoU for the agnostic phase probe: queries are matched
/// to instances by the training cost, then scored by full-resolution IoU.
pub fn agnostic_probe_iou(
    model: &SegModel,
    clips: &[SyntheticClip],
    w: &crate::losses::LossWeights,
) -> Result<f64> {
    use crate::losses::{hungarian_match, mask_to_tensor, match_costs};
    use crate::train::downsample_mask;
    let mut ious = Vec::new();
    for clip in clips {
        let frames = model.frames_to_tensor(&clip.frames, clip.h, clip.w)?;
        let out = &model.decode_clip(&frames, &[])?[0];
        let dtype = frames.dtype();
        let dev = frames.device();
        let mut gt_s4 = Vec::new();
        let mut gt_full = Vec::new();
        for inst in &clip.instances {
            if inst.visibility[0] {
                gt_s4.push(mask_to_tensor(&downsample_mask(&inst.track[0], 4)?, dtype, dev)?);
                gt_full.push(&inst.track[0]);
            }
        }
        if gt_s4.is_empty() {
            continue;
        }
        let labels = vec![0usize; gt_s4.len()];
        let cost = match_costs(&out.mask_logits, &out.class_logits, &gt_s4, &labels, w)?;
        let assign = hungarian_match(&cost)?;
        for (g, &q) in assign.iter().enumerate() {
            let full = model
                .full_res(&out.mask_logits.narrow(0, q, 1)?, clip.h, clip.w)?
                .squeeze(0)?;
            let (m, _) = threshold(&full)?;
            ious.push(crate::metrics::iou(&m, gt_full[g])?);
        }
    }
    if ious.is_empty() {
        return Ok(0.0);
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}
