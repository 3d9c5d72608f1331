//! Mask-quality metrics: IoU reducers (mIoU/cIoU/gIoU), track J/F, instance
//! AP, panoptic quality and its video variant, and mean video consistency.
//!
//! Conventions fixed here:
//! - `iou(empty, empty) = 1`.
//! - Boundary tolerance for F is `round(0.008 * image diagonal)` pixels.
//! - cIoU pools intersections/unions over the dataset; gIoU is the mean of
//!   per-sample IoU.
//! - PQ matches segments of equal category at tube IoU > 0.5; segments with
//!   empty tracks are ignored on both sides.
//! - VPQ^k averages window PQ over every window of k consecutive frames and
//!   VPQ is the mean over the window set {1, 2, 4, 6}.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Result, X2Error};
use crate::mask::BitMask;

/// A mask track; length 1 for images. Frames may be empty.
pub type Track = Vec<BitMask>;

#[derive(Debug, Clone)]
pub struct InstancePrediction {
    pub track: Track,
    pub category: usize,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct GtInstance {
    pub track: Track,
    pub category: usize,
}

/// Per-pixel (segment id, category) labeling with disjoint segments.
#[derive(Debug, Clone)]
pub struct PanopticSegment {
    pub id: usize,
    pub category: usize,
    pub track: Track,
}

pub fn iou(a: &BitMask, b: &BitMask) -> Result<f64> {
    if a.h != b.h || a.w != b.w {
        return Err(X2Error::Shape(format!(
            "iou shape mismatch: {}x{} vs {}x{}",
            a.h, a.w, b.h, b.w
        )));
    }
    let u = a.union_count(b);
    if u == 0 {
        return Ok(1.0);
    }
    Ok(a.intersection_count(b) as f64 / u as f64)
}

/// Tube IoU over a track: sum of intersections over sum of unions.
pub fn track_iou(a: &[BitMask], b: &[BitMask]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(X2Error::Shape(format!(
            "track length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.iter().zip(b.iter()) {
        if x.h != y.h || x.w != y.w {
            return Err(X2Error::Shape("track frame shape mismatch".into()));
        }
        inter += x.intersection_count(y);
        union += x.union_count(y);
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Cumulative IoU: dataset-pooled intersections over unions.
pub fn ciou(samples: &[(BitMask, BitMask)]) -> Result<f64> {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, g) in samples {
        if p.h != g.h || p.w != g.w {
            return Err(X2Error::Shape("ciou shape mismatch".into()));
        }
        inter += p.intersection_count(g);
        union += p.union_count(g);
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Generalized IoU: mean of per-sample IoU.
pub fn giou(samples: &[(BitMask, BitMask)]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(1.0);
    }
    let mut s = 0.0;
    for (p, g) in samples {
        s += iou(p, g)?;
    }
    Ok(s / samples.len() as f64)
}

/// Mean IoU over classes: per class, intersections and unions are pooled over
/// all entries of that class; the mean runs over classes present in any entry.
pub fn miou(entries: &[(usize, BitMask, BitMask)]) -> Result<f64> {
    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (class, p, g) in entries {
        if p.h != g.h || p.w != g.w {
            return Err(X2Error::Shape("miou shape mismatch".into()));
        }
        let e = per_class.entry(*class).or_insert((0, 0));
        e.0 += p.intersection_count(g);
        e.1 += p.union_count(g);
    }
    if per_class.is_empty() {
        return Ok(1.0);
    }
    let mut s = 0.0;
    for (inter, union) in per_class.values() {
        s += if *union == 0 { 1.0 } else { *inter as f64 / *union as f64 };
    }
    Ok(s / per_class.len() as f64)
}

/// Boundary pixels: set pixels with a 4-neighbor outside the mask (pixels on
/// the image border count as boundary).
pub fn boundary_pixels(m: &BitMask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..m.h {
        for x in 0..m.w {
            if !m.get(y, x) {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == m.h
                || x + 1 == m.w
                || !m.get(y - 1, x)
                || !m.get(y + 1, x)
                || !m.get(y, x - 1)
                || !m.get(y, x + 1);
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

pub fn boundary_tolerance(h: usize, w: usize) -> usize {
    let diag = ((h * h + w * w) as f64).sqrt();
    (0.008 * diag).round() as usize
}

/// Boundary F-measure with dilated-contour matching at `tol` pixels.
pub fn boundary_f(pred: &BitMask, gt: &BitMask, tol: usize) -> Result<f64> {
    if pred.h != gt.h || pred.w != gt.w {
        return Err(X2Error::Shape("boundary_f shape mismatch".into()));
    }
    let pb = boundary_pixels(pred);
    let gb = boundary_pixels(gt);
    match (pb.is_empty(), gb.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let gd = dilate_points(&gb, pred.h, pred.w, tol);
    let pd = dilate_points(&pb, pred.h, pred.w, tol);
    let tp_p = pb.iter().filter(|&&(y, x)| gd.get(y, x)).count();
    let tp_g = gb.iter().filter(|&&(y, x)| pd.get(y, x)).count();
    let precision = tp_p as f64 / pb.len() as f64;
    let recall = tp_g as f64 / gb.len() as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

fn dilate_points(points: &[(usize, usize)], h: usize, w: usize, tol: usize) -> BitMask {
    let mut out = BitMask::zeros(h, w);
    let t = tol as isize;
    let t2 = (tol * tol) as isize;
    for &(y, x) in points {
        for dy in -t..=t {
            for dx in -t..=t {
                if dy * dy + dx * dx > t2 {
                    continue;
                }
                let ny = y as isize + dy;
                let nx = x as isize + dx;
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                    out.set(ny as usize, nx as usize, true);
                }
            }
        }
    }
    out
}

/// Track-level region similarity J, boundary measure F, and their mean.
pub fn j_f(pred: &[BitMask], gt: &[BitMask]) -> Result<(f64, f64, f64)> {
    if pred.len() != gt.len() {
        return Err(X2Error::Shape(format!(
            "j_f track length mismatch: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Ok((1.0, 1.0, 1.0));
    }
    let mut j = 0.0;
    let mut f = 0.0;
    for (p, g) in pred.iter().zip(gt.iter()) {
        j += iou(p, g)?;
        f += boundary_f(p, g, boundary_tolerance(p.h, p.w))?;
    }
    let n = pred.len() as f64;
    let (j, f) = (j / n, f / n);
    Ok((j, f, 0.5 * (j + f)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApReport {
    pub ap: f64,
    pub ap50: f64,
}

const AP_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Instance-mask average precision: greedy score-descending matching per IoU
/// threshold, 101-point interpolated precision, averaged over thresholds
/// 0.50:0.05:0.95 and over ground-truth categories.
pub fn mask_ap(preds: &[InstancePrediction], gts: &[GtInstance]) -> Result<ApReport> {
    let categories: BTreeSet<usize> = gts.iter().map(|g| g.category).collect();
    if categories.is_empty() {
        // No ground truth: perfect when there are no predictions either.
        let v = if preds.is_empty() { 1.0 } else { 0.0 };
        return Ok(ApReport { ap: v, ap50: v });
    }
    let mut ap_sum = 0.0;
    let mut ap50_sum = 0.0;
    for &cat in &categories {
        let mut cat_preds: Vec<&InstancePrediction> =
            preds.iter().filter(|p| p.category == cat).collect();
        cat_preds.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let cat_gts: Vec<&GtInstance> = gts.iter().filter(|g| g.category == cat).collect();
        let mut per_thr = Vec::with_capacity(AP_THRESHOLDS.len());
        for thr in AP_THRESHOLDS {
            per_thr.push(ap_at_threshold(&cat_preds, &cat_gts, thr)?);
        }
        ap_sum += per_thr.iter().sum::<f64>() / per_thr.len() as f64;
        ap50_sum += per_thr[0];
    }
    let n = categories.len() as f64;
    Ok(ApReport { ap: ap_sum / n, ap50: ap50_sum / n })
}

fn ap_at_threshold(
    preds: &[&InstancePrediction],
    gts: &[&GtInstance],
    thr: f64,
) -> Result<f64> {
    if gts.is_empty() {
        return Ok(0.0);
    }
    let mut gt_taken = vec![false; gts.len()];
    let mut tp_flags = Vec::with_capacity(preds.len());
    for p in preds {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if gt_taken[gi] {
                continue;
            }
            let v = track_iou(&p.track, &g.track)?;
            if v >= thr && best.map_or(true, |(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                gt_taken[gi] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }
    Ok(interpolated_ap(&tp_flags, gts.len()))
}

/// 101-point interpolated AP from ordered TP flags.
pub fn interpolated_ap(tp_flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp_flags.len());
    let mut rec = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &t) in tp_flags.iter().enumerate() {
        if t {
            tp += 1;
        }
        prec.push(tp as f64 / (i + 1) as f64);
        rec.push(tp as f64 / n_gt as f64);
    }
    let mut sum = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let p = prec
            .iter()
            .zip(rec.iter())
            .filter(|(_, &rr)| rr >= r - 1e-12)
            .map(|(&pp, _)| pp)
            .fold(0.0f64, f64::max);
        sum += p;
    }
    sum / 101.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PqResult {
    pub pq: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

fn check_disjoint(segments: &[PanopticSegment]) -> Result<()> {
    if segments.is_empty() {
        return Ok(());
    }
    let frames = segments[0].track.len();
    for t in 0..frames {
        let mut seen: Option<BitMask> = None;
        for s in segments {
            if s.track.len() != frames {
                return Err(X2Error::Shape("assembly tracks of unequal length".into()));
            }
            let m = &s.track[t];
            match &mut seen {
                None => seen = Some(m.clone()),
                Some(acc) => {
                    if acc.intersection_count(m) > 0 {
                        return Err(X2Error::Data(format!(
                            "overlapping segments in assembly at frame {t}"
                        )));
                    }
                    for y in 0..m.h {
                        for x in 0..m.w {
                            if m.get(y, x) {
                                acc.set(y, x, true);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Panoptic quality with unique matching at tube IoU > 0.5.
pub fn pq(pred: &[PanopticSegment], gt: &[PanopticSegment]) -> Result<PqResult> {
    check_disjoint(pred)?;
    check_disjoint(gt)?;
    let pred: Vec<&PanopticSegment> =
        pred.iter().filter(|s| s.track.iter().any(|m| !m.is_empty())).collect();
    let gt: Vec<&PanopticSegment> =
        gt.iter().filter(|s| s.track.iter().any(|m| !m.is_empty())).collect();
    let mut gt_matched = vec![false; gt.len()];
    let mut tp = 0usize;
    let mut iou_sum = 0.0;
    for p in &pred {
        for (gi, g) in gt.iter().enumerate() {
            if gt_matched[gi] || g.category != p.category {
                continue;
            }
            let v = track_iou(&p.track, &g.track)?;
            if v > 0.5 {
                // IoU > 0.5 makes the match unique; no search needed.
                gt_matched[gi] = true;
                tp += 1;
                iou_sum += v;
                break;
            }
        }
    }
    let fp = pred.len() - tp;
    let fn_ = gt.len() - tp;
    let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
    let pq = if denom == 0.0 { 1.0 } else { iou_sum / denom };
    Ok(PqResult { pq, tp, fp, fn_ })
}

fn window_slice(segments: &[PanopticSegment], start: usize, len: usize) -> Vec<PanopticSegment> {
    segments
        .iter()
        .map(|s| PanopticSegment {
            id: s.id,
            category: s.category,
            track: s.track[start..start + len].to_vec(),
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct VpqReport {
    /// (window size, VPQ^k) pairs in input order.
    pub per_window: Vec<(usize, f64)>,
    pub mean: f64,
}

/// Video panoptic quality over sliding windows of `windows` sizes.
pub fn vpq(
    pred: &[PanopticSegment],
    gt: &[PanopticSegment],
    windows: &[usize],
) -> Result<VpqReport> {
    let frames = gt
        .first()
        .or(pred.first())
        .map(|s| s.track.len())
        .unwrap_or(0);
    let mut per_window = Vec::with_capacity(windows.len());
    for &k in windows {
        let k_eff = k.min(frames.max(1));
        let starts: Vec<usize> = if frames == 0 {
            vec![]
        } else {
            (0..=frames.saturating_sub(k_eff)).collect()
        };
        if starts.is_empty() {
            per_window.push((k, 1.0));
            continue;
        }
        let mut sum = 0.0;
        for &s in &starts {
            let p = window_slice(pred, s, k_eff);
            let g = window_slice(gt, s, k_eff);
            sum += pq(&p, &g)?.pq;
        }
        per_window.push((k, sum / starts.len() as f64));
    }
    let mean = per_window.iter().map(|(_, v)| v).sum::<f64>() / per_window.len().max(1) as f64;
    Ok(VpqReport { per_window, mean })
}

pub const VPQ_WINDOWS: [usize; 4] = [1, 2, 4, 6];

/// Per-frame semantic labeling: class -> mask, masks disjoint per frame.
pub type SemanticFrame = BTreeMap<usize, BitMask>;

/// Mean video consistency over windows of `w` frames.
///
/// For each window and class with a non-empty GT intersection, the score is
/// `|(∩_t GT_t) ∩ (∩_t Pred_t)| / |∩_t GT_t|`; class scores are averaged per
/// window, then over windows. Windows with no qualifying class are skipped;
/// with nothing to measure the result is 1.
pub fn mvc(pred: &[SemanticFrame], gt: &[SemanticFrame], w: usize) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(X2Error::Shape("mvc track length mismatch".into()));
    }
    let frames = gt.len();
    if frames == 0 {
        return Ok(1.0);
    }
    let w_eff = w.min(frames);
    let mut window_scores = Vec::new();
    for start in 0..=frames - w_eff {
        let mut class_scores = Vec::new();
        let classes: BTreeSet<usize> = gt[start..start + w_eff]
            .iter()
            .flat_map(|f| f.keys().copied())
            .collect();
        for c in classes {
            let gt_inter = intersect_class(&gt[start..start + w_eff], c);
            let Some(gt_inter) = gt_inter else { continue };
            if gt_inter.is_empty() {
                continue;
            }
            let pred_inter = intersect_class(&pred[start..start + w_eff], c)
                .unwrap_or_else(|| BitMask::zeros(gt_inter.h, gt_inter.w));
            let num = gt_inter.intersection_count(&pred_inter);
            class_scores.push(num as f64 / gt_inter.count() as f64);
        }
        if !class_scores.is_empty() {
            window_scores.push(class_scores.iter().sum::<f64>() / class_scores.len() as f64);
        }
    }
    if window_scores.is_empty() {
        return Ok(1.0);
    }
    Ok(window_scores.iter().sum::<f64>() / window_scores.len() as f64)
}

fn intersect_class(frames: &[SemanticFrame], class: usize) -> Option<BitMask> {
    let mut acc: Option<BitMask> = None;
    for f in frames {
        let m = f.get(&class)?;
        acc = Some(match acc {
            None => m.clone(),
            Some(a) => a.intersect(m),
        });
    }
    acc
}
