//! Training objectives: logit BCE, dice, their weighted mask combination,
//! multi-class focal loss, auto-regressive cross-entropy, bipartite matching
//! for query supervision, and the per-sample-kind joint loss switch. All
//! losses are differentiable tensor graphs; matching is discrete and feeds
//! pair selection only.

use candle_core::{DType, Device, Tensor};

use crate::error::{Result, X2Error};
use crate::mask::BitMask;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub lambda_cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_bce: 5.0,
            lambda_dice: 5.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            lambda_cls: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    Chat,
    Segmentation,
}

pub fn mask_to_tensor(m: &BitMask, dtype: DType, dev: &Device) -> Result<Tensor> {
    let v: Vec<f32> = m.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(v, (m.h, m.w), dev)?.to_dtype(dtype)?)
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(X2Error::Shape(format!(
            "shape mismatch {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean logit binary cross-entropy, numerically stable form
/// max(x, 0) - x g + ln(1 + exp(-|x|)).
pub fn bce_loss(mask_logits: &Tensor, gt_mask: &Tensor) -> Result<Tensor> {
    check_same_shape(mask_logits, gt_mask)?;
    let x = mask_logits;
    let pos = x.relu()?;
    let xg = (x * gt_mask)?;
    let log_term = ((x.abs()?.neg()?.exp()? + 1.0)?).log()?;
    Ok(((pos - xg)? + log_term)?.mean_all()?)
}

pub const DICE_EPS: f64 = 1.0;

/// 1 - (2 sum(p g) + eps) / (sum p + sum g + eps), eps = 1.
pub fn dice_loss(mask_probs: &Tensor, gt_mask: &Tensor) -> Result<Tensor> {
    check_same_shape(mask_probs, gt_mask)?;
    let num = ((mask_probs * gt_mask)?.sum_all()? * 2.0)? + DICE_EPS;
    let den = (mask_probs.sum_all()? + gt_mask.sum_all()?)? + DICE_EPS;
    let one = Tensor::ones((), mask_probs.dtype(), mask_probs.device())?;
    Ok((one - (num? / den?)?)?)
}

/// lambda_bce * BCE(logits, gt) + lambda_dice * dice(sigmoid(logits), gt).
pub fn mask_loss(mask_logits: &Tensor, gt_mask: &Tensor, w: &LossWeights) -> Result<Tensor> {
    let bce = (bce_loss(mask_logits, gt_mask)? * w.lambda_bce)?;
    let dice = (dice_loss(&candle_nn::ops::sigmoid(mask_logits)?, gt_mask)? * w.lambda_dice)?;
    Ok((bce + dice)?)
}

fn one_hot(labels: &[usize], classes: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let mut v = vec![0f32; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(X2Error::Data(format!("label {l} out of range {classes}")));
        }
        v[i * classes + l] = 1.0;
    }
    Ok(Tensor::from_vec(v, (labels.len(), classes), dev)?.to_dtype(dtype)?)
}

/// Multi-class focal loss -alpha (1 - p_t)^gamma log p_t, mean over rows.
pub fn focal_loss(
    class_logits: &Tensor,
    labels: &[usize],
    gamma: f64,
    alpha: f64,
) -> Result<Tensor> {
    let (n, c) = class_logits.dims2()?;
    if labels.len() != n {
        return Err(X2Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    let oh = one_hot(labels, c, class_logits.dtype(), class_logits.device())?;
    let logp = candle_nn::ops::log_softmax(class_logits, 1)?;
    let logp_t = (logp * &oh)?.sum(1)?; // (N,)
    let p_t = logp_t.exp()?;
    let one = Tensor::ones(n, class_logits.dtype(), class_logits.device())?;
    let focus = (one - p_t)?.powf(gamma)?;
    Ok(((focus * logp_t.neg()?)? * alpha)?.mean_all()?)
}

/// Mean next-token cross-entropy over supervised positions. `lm_logits[i]`
/// is scored against `target_ids[i]`; the caller handles any shifting.
pub fn ar_loss(lm_logits: &Tensor, target_ids: &[u32], supervised: &[bool]) -> Result<Tensor> {
    let (l, v) = lm_logits.dims2()?;
    if target_ids.len() != l || supervised.len() != l {
        return Err(X2Error::Shape(format!(
            "targets/mask lengths {}/{} for {l} logit rows",
            target_ids.len(),
            supervised.len()
        )));
    }
    let keep: Vec<usize> = (0..l).filter(|&i| supervised[i]).collect();
    if keep.is_empty() {
        return Err(X2Error::Data("empty response mask".into()));
    }
    let dev = lm_logits.device();
    let idx = Tensor::from_vec(keep.iter().map(|&i| i as u32).collect::<Vec<u32>>(), keep.len(), dev)?;
    let picked = lm_logits.index_select(&idx, 0)?; // (M, V)
    let labels: Vec<usize> = keep.iter().map(|&i| target_ids[i] as usize).collect();
    let oh = one_hot(&labels, v, lm_logits.dtype(), dev)?;
    let logp = candle_nn::ops::log_softmax(&picked, 1)?;
    Ok((logp * oh)?.sum(1)?.neg()?.mean_all()?)
}

/// Minimum-cost assignment of rows (ground truth) to columns (queries) via
/// the shortest augmenting path algorithm; `cost` is n_rows x n_cols with
/// n_rows <= n_cols. Returns `assign[row] = col`.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(vec![]);
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) {
        return Err(X2Error::Shape("ragged cost matrix".into()));
    }
    if n > m {
        return Err(X2Error::Data(format!("{n} targets exceed {m} queries")));
    }
    // Jonker-Volgenant style augmentation on a rows x cols table.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut col_row = vec![0usize; m + 1]; // 1-based row matched to col, 0 = free
    for r in 1..=n {
        let mut min_v = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        let mut way = vec![0usize; m + 1];
        let mut j0 = 0usize;
        col_row[0] = r;
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < min_v[j] {
                    min_v[j] = cur;
                    way[j] = j0;
                }
                if min_v[j] < delta {
                    delta = min_v[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == 0 {
                break;
            }
        }
        // augment along the alternating path
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![usize::MAX; n];
    for j in 1..=m {
        if col_row[j] != 0 {
            assign[col_row[j] - 1] = j - 1;
        }
    }
    Ok(assign)
}

/// Matching cost table: cost[g][q] = lambda_cls * (-p_q(label_g)) + Eq.-style
/// mask terms between query q's logits and target g.
pub fn match_costs(
    mask_logits: &Tensor,
    class_logits: &Tensor,
    gt_masks: &[Tensor],
    gt_labels: &[usize],
    w: &LossWeights,
) -> Result<Vec<Vec<f64>>> {
    let nq = mask_logits.dim(0)?;
    let probs = candle_nn::ops::softmax(class_logits, 1)?.to_vec2::<f32>()?;
    let mut cost = vec![vec![0.0; nq]; gt_masks.len()];
    for (g, gt) in gt_masks.iter().enumerate() {
        for (q, row) in cost[g].iter_mut().enumerate() {
            let ml = mask_logits.get(q)?;
            let m: f64 = mask_loss(&ml, gt, w)?
                .to_dtype(DType::F64)?
                .to_scalar::<f64>()?;
            *row = m - w.lambda_cls * probs[q][gt_labels[g]] as f64;
        }
    }
    Ok(cost)
}

pub struct JointComponents {
    pub ar: Tensor,
    pub mask: Option<Tensor>,
    pub cls: Option<Tensor>,
}

/// Eq.-style branch: chat samples contribute only the auto-regressive loss;
/// segmentation samples add mask and classification terms with unit weights.
pub fn joint_loss(kind: SampleKind, parts: JointComponents) -> Result<Tensor> {
    match kind {
        SampleKind::Chat => {
            if parts.mask.is_some() || parts.cls.is_some() {
                return Err(X2Error::Data(
                    "chat sample must not carry mask or class losses".into(),
                ));
            }
            Ok(parts.ar)
        }
        SampleKind::Segmentation => {
            let mask = parts
                .mask
                .ok_or_else(|| X2Error::Data("segmentation sample missing mask loss".into()))?;
            let cls = parts
                .cls
                .ok_or_else(|| X2Error::Data("segmentation sample missing class loss".into()))?;
            Ok(((parts.ar + mask)? + cls)?)
        }
    }
}
