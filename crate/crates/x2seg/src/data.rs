//! Deterministic synthetic datasets: moving geometric shapes with categories,
//! referring attributes and instance tracks, task annotations for all 14
//! tasks, visual-prompt construction, and JSON manifests with inline RLE
//! masks and PNG frame files.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, X2Error};
use crate::mask::{rle_decode, rle_encode, BitMask, Rle};
use crate::prompt::{Condition, TaskId};
use crate::region::VisualPrompt;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// Held out from training for open-vocabulary evaluation.
pub const OV_HOLDOUT: ShapeKind = ShapeKind::Triangle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

pub const ALL_KINDS: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn category_id(self) -> usize {
        match self {
            ShapeKind::Square => 0,
            ShapeKind::Circle => 1,
            ShapeKind::Triangle => 2,
        }
    }

    /// The synthetic world has no stuff classes, so every category is a
    /// thing; the VGD filter is a no-op by construction but stays wired.
    pub fn is_thing(self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorName {
    Red,
    Green,
    Blue,
}

pub const ALL_COLORS: [ColorName; 3] = [ColorName::Red, ColorName::Green, ColorName::Blue];

impl ColorName {
    pub fn name(self) -> &'static str {
        match self {
            ColorName::Red => "red",
            ColorName::Green => "green",
            ColorName::Blue => "blue",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            ColorName::Red => [230, 40, 40],
            ColorName::Green => [40, 200, 60],
            ColorName::Blue => [50, 90, 230],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeName {
    Small,
    Large,
}

pub const ALL_SIZES: [SizeName; 2] = [SizeName::Small, SizeName::Large];

impl SizeName {
    pub fn name(self) -> &'static str {
        match self {
            SizeName::Small => "small",
            SizeName::Large => "large",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub kind: ShapeKind,
    pub color: ColorName,
    pub size: SizeName,
    /// Half extent in pixels.
    pub half: usize,
    /// Integer center per frame (y, x); meaningful even when hidden.
    pub centers: Vec<(i64, i64)>,
    pub visibility: Vec<bool>,
    /// Per-frame binary mask; empty when hidden.
    pub track: Vec<BitMask>,
}

impl Instance {
    pub fn first_visible_frame(&self) -> Option<usize> {
        self.visibility.iter().position(|&v| v)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticClip {
    pub seed: u64,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    /// RGB frames, HWC u8, length t.
    pub frames: Vec<Vec<u8>>,
    pub instances: Vec<Instance>,
}

/// Generation parameters for one clip.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipParams {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub n_objects: usize,
    /// When set, the first two objects share all attributes (twin
    /// distractors), so only position history identifies them.
    #[serde(default)]
    pub twins: bool,
    /// Allow mid-clip full occlusion intervals.
    #[serde(default)]
    pub occlusion: bool,
    /// Restrict shape kinds (open-vocabulary splits).
    #[serde(default)]
    pub kinds: Option<Vec<ShapeKind>>,
}

fn half_extent(size: SizeName, h: usize, w: usize) -> usize {
    let m = h.min(w) as f64;
    match size {
        SizeName::Small => ((0.07 * m).round() as usize).max(2),
        SizeName::Large => ((0.125 * m).round() as usize).max(4),
    }
}

fn shape_mask(kind: ShapeKind, h: usize, w: usize, cy: i64, cx: i64, s: i64) -> BitMask {
    BitMask::from_fn(h, w, |y, x| {
        let dy = y as i64 - cy;
        let dx = x as i64 - cx;
        match kind {
            ShapeKind::Square => dy.abs() <= s && dx.abs() <= s,
            ShapeKind::Circle => dy * dy + dx * dx <= s * s,
            ShapeKind::Triangle => {
                let r = dy + s; // 0 at apex row
                (0..=2 * s).contains(&r) && 2 * dx.abs() <= r
            }
        }
    })
}

/// Generate a clip of moving shapes. Deterministic per (seed, params).
pub fn gen_clip(seed: u64, params: &ClipParams) -> Result<SyntheticClip> {
    let ClipParams { t, h, w, n_objects, twins, occlusion, ref kinds } = *params;
    if n_objects == 0 {
        return Err(X2Error::Data("n_objects must be >= 1".into()));
    }
    if t == 0 {
        return Err(X2Error::Data("t must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = kinds.clone().unwrap_or_else(|| ALL_KINDS.to_vec());

    // Attribute combos: distinct unless twins are requested.
    let mut combos: Vec<(ShapeKind, ColorName, SizeName)> = kinds
        .iter()
        .flat_map(|&k| {
            ALL_COLORS
                .iter()
                .flat_map(move |&c| ALL_SIZES.iter().map(move |&s| (k, c, s)))
        })
        .collect();
    combos.shuffle(&mut rng);
    let mut attrs: Vec<(ShapeKind, ColorName, SizeName)> = Vec::with_capacity(n_objects);
    if twins && n_objects >= 2 {
        let twin = combos[0];
        attrs.push(twin);
        attrs.push(twin);
        attrs.extend(combos.iter().skip(1).take(n_objects - 2).copied());
    } else {
        attrs.extend(combos.iter().take(n_objects).copied());
    }
    if attrs.len() < n_objects {
        return Err(X2Error::Data(format!(
            "cannot place {n_objects} objects with {} attribute combos",
            combos.len()
        )));
    }

    // Trajectories: integer centers with constant velocity, kept inside the
    // frame and spatially separated from every other object at every frame.
    let mut placed: Vec<(usize, Vec<(i64, i64)>)> = Vec::new(); // (half, centers)
    for &(_, _, size) in &attrs {
        let s = half_extent(size, h, w) as i64;
        let lo_y = s + 1;
        let hi_y = h as i64 - s - 2;
        let lo_x = s + 1;
        let hi_x = w as i64 - s - 2;
        if lo_y >= hi_y || lo_x >= hi_x {
            return Err(X2Error::Data("frame too small for requested shapes".into()));
        }
        let mut ok = None;
        'tries: for _ in 0..500 {
            let cy0 = rng.random_range(lo_y..=hi_y);
            let cx0 = rng.random_range(lo_x..=hi_x);
            let vy = rng.random_range(-2i64..=2);
            let vx = rng.random_range(-2i64..=2);
            let mut centers = Vec::with_capacity(t);
            for k in 0..t as i64 {
                let cy = cy0 + vy * k;
                let cx = cx0 + vx * k;
                if cy < lo_y || cy > hi_y || cx < lo_x || cx > hi_x {
                    continue 'tries;
                }
                centers.push((cy, cx));
            }
            for (other_half, other_centers) in &placed {
                let sep = s + *other_half as i64 + 2;
                for k in 0..t {
                    let (ay, ax) = centers[k];
                    let (by, bx) = other_centers[k];
                    if (ay - by).abs() <= sep && (ax - bx).abs() <= sep {
                        continue 'tries;
                    }
                }
            }
            ok = Some(centers);
            break;
        }
        let centers = ok.ok_or_else(|| {
            X2Error::Data(format!(
                "infeasible packing: could not place object {} of {n_objects} in {h}x{w}",
                placed.len()
            ))
        })?;
        placed.push((s as usize, centers));
    }

    // Occlusion intervals: contiguous, never covering frame 0.
    let mut instances = Vec::with_capacity(n_objects);
    for (i, &(kind, color, size)) in attrs.iter().enumerate() {
        let (half, ref centers) = placed[i];
        let mut visibility = vec![true; t];
        if occlusion && t >= 4 && rng.random_bool(0.5) {
            let len = rng.random_range(1..=t / 2);
            let start = rng.random_range(1..t - len);
            for v in &mut visibility[start..start + len] {
                *v = false;
            }
        }
        let track = (0..t)
            .map(|k| {
                if visibility[k] {
                    let (cy, cx) = centers[k];
                    shape_mask(kind, h, w, cy, cx, half as i64)
                } else {
                    BitMask::zeros(h, w)
                }
            })
            .collect();
        instances.push(Instance {
            kind,
            color,
            size,
            half,
            centers: centers.clone(),
            visibility,
            track,
        });
    }

    // Render frames; objects never overlap, so draw order is irrelevant.
    let mut frames = Vec::with_capacity(t);
    for k in 0..t {
        let mut img = vec![20u8; h * w * 3];
        for inst in &instances {
            let rgb = inst.color.rgb();
            let m = &inst.track[k];
            for y in 0..h {
                for x in 0..w {
                    if m.get(y, x) {
                        let o = (y * w + x) * 3;
                        img[o..o + 3].copy_from_slice(&rgb);
                    }
                }
            }
        }
        frames.push(img);
    }

    Ok(SyntheticClip { seed, t, h, w, frames, instances })
}

/// Task annotation for one clip: conditions, SEG-aligned target instances,
/// and visual prompts for region tasks (VGD targets carry 4 prompts each).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskAnnotation {
    pub task: TaskId,
    pub conditions: Vec<Condition>,
    /// GCG caption phrases, SEG-aligned; empty otherwise.
    pub phrases: Vec<String>,
    /// Instance indices, aligned with the `<SEG>` order.
    pub target_instances: Vec<usize>,
    /// Prompt sets per target for region tasks: `prompts[i]` belongs to
    /// `target_instances[i]`; 4 entries per set for VGD, 1 for Int/Obj.
    pub prompts: Vec<Vec<VisualPrompt>>,
}

/// Build the annotation for one task on one clip. Deterministic per
/// (clip.seed, task).
pub fn gen_task_annotations(clip: &SyntheticClip, task: TaskId) -> Result<TaskAnnotation> {
    if task.is_video() && clip.t < 2 {
        return Err(X2Error::Data(format!("{} requires T > 1", task.name())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(
        clip.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(task.name().len() as u64 + 1)),
    );
    let medium = if task.is_video() { "video" } else { "image" };
    match task {
        TaskId::IGen | TaskId::VGen | TaskId::IOv | TaskId::VOv => {
            let conditions = clip
                .instances
                .iter()
                .map(|i| Condition::CategoryName(i.kind.name().to_string()))
                .collect();
            Ok(TaskAnnotation {
                task,
                conditions,
                phrases: vec![],
                target_instances: (0..clip.instances.len()).collect(),
                prompts: vec![],
            })
        }
        TaskId::IRef | TaskId::VRef => {
            let idx = rng.random_range(0..clip.instances.len());
            let expr = referring_expression(clip, idx)?;
            Ok(TaskAnnotation {
                task,
                conditions: vec![Condition::FreeText(expr)],
                phrases: vec![],
                target_instances: vec![idx],
                prompts: vec![],
            })
        }
        TaskId::IRea | TaskId::VRea => {
            let idx = rng.random_range(0..clip.instances.len());
            let inst = &clip.instances[idx];
            let by_color_size = clip
                .instances
                .iter()
                .filter(|o| o.color == inst.color && o.size == inst.size)
                .count();
            let q = if by_color_size == 1 {
                format!(
                    "What object can be found that is {} and {} in this {medium}",
                    inst.size.name(),
                    inst.color.name()
                )
            } else {
                format!(
                    "What object can be found that is a {} {} {} in this {medium}",
                    inst.size.name(),
                    inst.color.name(),
                    inst.kind.name()
                )
            };
            Ok(TaskAnnotation {
                task,
                conditions: vec![Condition::FreeText(q)],
                phrases: vec![],
                target_instances: vec![idx],
                prompts: vec![],
            })
        }
        TaskId::IGcg | TaskId::VGcg => {
            // caption order: left to right at frame 0
            let mut order: Vec<usize> = (0..clip.instances.len()).collect();
            order.sort_by_key(|&i| clip.instances[i].centers[0].1);
            let phrases = order
                .iter()
                .map(|&i| {
                    let o = &clip.instances[i];
                    format!("a {} {} {}", o.size.name(), o.color.name(), o.kind.name())
                })
                .collect();
            Ok(TaskAnnotation {
                task,
                conditions: vec![],
                phrases,
                target_instances: order,
                prompts: vec![],
            })
        }
        TaskId::IInt | TaskId::VObj => {
            let idx = rng.random_range(0..clip.instances.len());
            let all = build_vgd_prompts(clip, idx)?;
            let pick = all[rng.random_range(0..all.len())].clone();
            Ok(TaskAnnotation {
                task,
                conditions: vec![Condition::RegionPlaceholder { prompt_ref: 0 }],
                phrases: vec![],
                target_instances: vec![idx],
                prompts: vec![vec![pick]],
            })
        }
        TaskId::IVgd | TaskId::VVgd => {
            let targets = vgd_thing_targets(clip);
            if targets.is_empty() {
                return Err(X2Error::Data("no visible thing instance for VGD".into()));
            }
            let mut prompts = Vec::with_capacity(targets.len());
            for &i in &targets {
                prompts.push(build_vgd_prompts(clip, i)?);
            }
            let conditions = (0..targets.len())
                .map(|i| Condition::RegionPlaceholder { prompt_ref: i })
                .collect();
            Ok(TaskAnnotation {
                task,
                conditions,
                phrases: vec![],
                target_instances: targets,
                prompts,
            })
        }
    }
}

/// Thing-category filter for VGD targets. Every synthetic category is a
/// thing, so this keeps all instances visible in at least one frame.
pub fn vgd_thing_targets(clip: &SyntheticClip) -> Vec<usize> {
    clip.instances
        .iter()
        .enumerate()
        .filter(|(_, o)| o.kind.is_thing() && o.first_visible_frame().is_some())
        .map(|(i, _)| i)
        .collect()
}

/// Unique referring expression for one instance, adding attributes until the
/// referent is unambiguous (exhaustive attribute matching).
pub fn referring_expression(clip: &SyntheticClip, idx: usize) -> Result<String> {
    let inst = &clip.instances[idx];
    let short = format!("the {} {}", inst.color.name(), inst.kind.name());
    if match_expression(clip, &short)? == vec![idx] {
        return Ok(short);
    }
    let full = format!(
        "the {} {} {}",
        inst.size.name(),
        inst.color.name(),
        inst.kind.name()
    );
    if match_expression(clip, &full)? == vec![idx] {
        return Ok(full);
    }
    // Disambiguate identical attribute sets by frame-0 horizontal rank.
    let matches = match_expression(clip, &full)?;
    let cx = inst.centers[0].1;
    let leftmost = matches.iter().all(|&i| clip.instances[i].centers[0].1 >= cx);
    let rightmost = matches.iter().all(|&i| clip.instances[i].centers[0].1 <= cx);
    let rank = if leftmost {
        "leftmost"
    } else if rightmost {
        "rightmost"
    } else {
        return Err(X2Error::Data(format!(
            "unsatisfiable referent: instance {idx} not rank-separable"
        )));
    };
    let ranked = format!(
        "the {rank} {} {} {}",
        inst.size.name(),
        inst.color.name(),
        inst.kind.name()
    );
    if match_expression(clip, &ranked)? == vec![idx] {
        Ok(ranked)
    } else {
        Err(X2Error::Data(format!("unsatisfiable referent for instance {idx}")))
    }
}

/// All instances matched by a referring expression, by exhaustive attribute
/// matching; rank words reduce the candidate set to one end.
pub fn match_expression(clip: &SyntheticClip, expr: &str) -> Result<Vec<usize>> {
    let mut kind = None;
    let mut color = None;
    let mut size = None;
    let mut rank: Option<&str> = None;
    for w in expr.split_whitespace() {
        match w {
            "the" | "a" | "an" => {}
            "leftmost" | "rightmost" | "topmost" | "bottommost" => rank = Some(w),
            "small" => size = Some(SizeName::Small),
            "large" => size = Some(SizeName::Large),
            "red" => color = Some(ColorName::Red),
            "green" => color = Some(ColorName::Green),
            "blue" => color = Some(ColorName::Blue),
            "square" => kind = Some(ShapeKind::Square),
            "circle" => kind = Some(ShapeKind::Circle),
            "triangle" => kind = Some(ShapeKind::Triangle),
            other => {
                return Err(X2Error::Data(format!(
                    "unknown attribute word `{other}` in expression `{expr}`"
                )))
            }
        }
    }
    let mut matches: Vec<usize> = clip
        .instances
        .iter()
        .enumerate()
        .filter(|(_, o)| {
            kind.is_none_or(|k| o.kind == k)
                && color.is_none_or(|c| o.color == c)
                && size.is_none_or(|s| o.size == s)
        })
        .map(|(i, _)| i)
        .collect();
    if let Some(r) = rank {
        if matches.is_empty() {
            return Ok(matches);
        }
        let key = |i: usize| clip.instances[i].centers[0];
        let pick = match r {
            "leftmost" => *matches.iter().min_by_key(|&&i| key(i).1).unwrap(),
            "rightmost" => *matches.iter().max_by_key(|&&i| key(i).1).unwrap(),
            "topmost" => *matches.iter().min_by_key(|&&i| key(i).0).unwrap(),
            _ => *matches.iter().max_by_key(|&&i| key(i).0).unwrap(),
        };
        matches = vec![pick];
    }
    Ok(matches)
}

/// The four automatically generated visual prompts for one instance, all
/// derived from its first visible frame: snapped centroid point, tight box,
/// interior polyline scribble, and the frame mask itself. The supervision
/// target is the instance's full track.
pub fn build_vgd_prompts(clip: &SyntheticClip, idx: usize) -> Result<Vec<VisualPrompt>> {
    let inst = &clip.instances[idx];
    let fv = inst
        .first_visible_frame()
        .ok_or_else(|| X2Error::Data(format!("instance {idx} never visible")))?;
    let m = &inst.track[fv];
    let (cy, cx) = m.centroid().expect("visible frame has a non-empty mask");
    // snap the centroid to the nearest mask pixel
    let mut best = (usize::MAX, 0usize, 0usize);
    for y in 0..m.h {
        for x in 0..m.w {
            if m.get(y, x) {
                let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) * 1e6;
                let d = d as usize;
                if d < best.0 {
                    best = (d, y, x);
                }
            }
        }
    }
    let point = VisualPrompt::Point { y: best.1, x: best.2, frame_index: fv };
    let (y0, x0, y1, x1) = m.bbox().expect("non-empty mask has a bbox");
    let bbox = VisualPrompt::Box { y0, x0, y1, x1, frame_index: fv };
    let scribble = VisualPrompt::Scribble { points: scribble_points(m), frame_index: fv };
    let mask = VisualPrompt::Mask { rle: rle_encode(m), frame_index: fv };
    Ok(vec![point, bbox, scribble, mask])
}

/// Interior polyline: midpoints of mask rows at 1/4, 1/2, 3/4 of the
/// bounding box height. Shapes are convex, so segments stay inside.
fn scribble_points(m: &BitMask) -> Vec<(usize, usize)> {
    let (y0, _, y1, _) = m.bbox().expect("non-empty");
    let rows = if y1 - y0 >= 2 {
        vec![y0 + (y1 - y0) / 4, y0 + (y1 - y0) / 2, y0 + 3 * (y1 - y0) / 4]
    } else {
        vec![y0, y1]
    };
    let mut pts = Vec::new();
    for y in rows {
        let xs: Vec<usize> = (0..m.w).filter(|&x| m.get(y, x)).collect();
        if let (Some(&lo), Some(&hi)) = (xs.first(), xs.last()) {
            let mid = (lo + hi) / 2;
            let p = (y, mid);
            if pts.last() != Some(&p) {
                pts.push(p);
            }
        }
    }
    if pts.len() < 2 {
        // 1-row mask: fall back to its horizontal extent
        let y = pts.first().map(|p| p.0).unwrap_or(y0);
        let xs: Vec<usize> = (0..m.w).filter(|&x| m.get(y, x)).collect();
        pts = vec![(y, *xs.first().unwrap()), (y, *xs.last().unwrap())];
        if pts[0] == pts[1] && y + 1 <= y1 {
            pts[1] = (y, pts[0].1);
        }
    }
    pts
}

/// Uniformly choose one of a target's prompt set. Seed-deterministic.
pub fn sample_training_prompt<'a, R: RngCore>(
    prompts: &'a [VisualPrompt],
    rng: &mut R,
) -> &'a VisualPrompt {
    &prompts[(rng.next_u32() as usize) % prompts.len()]
}

// ---------------------------------------------------------------------------
// Manifests

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestInstance {
    pub category: ShapeKind,
    pub color: ColorName,
    pub size: SizeName,
    pub visibility: Vec<bool>,
    pub rle_track: Vec<Rle>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: usize,
    pub seed: u64,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    /// Relative PNG paths, one per frame.
    pub frame_paths: Vec<String>,
    pub instances: Vec<ManifestInstance>,
    pub annotations: Vec<TaskAnnotation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub name: String,
    pub seed: u64,
    pub records: Vec<ManifestRecord>,
}

/// Dataset generation spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSpec {
    pub name: String,
    pub seed: u64,
    pub count: usize,
    pub params: ClipParams,
    pub tasks: Vec<TaskId>,
    /// Exclude the held-out category from generated clips (training split of
    /// the open-vocabulary protocol).
    #[serde(default)]
    pub ov_split: OvSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OvSplit {
    #[default]
    All,
    /// Training: the held-out category never appears.
    Train,
    /// Evaluation: clips contain only the held-out category.
    OvHoldout,
}

/// Generate `count` annotated clips. Clip seeds are derived from the dataset
/// seed, so the same spec always produces the same dataset.
pub fn build_dataset(spec: &GenSpec) -> Result<Vec<(SyntheticClip, Vec<TaskAnnotation>)>> {
    let mut out = Vec::with_capacity(spec.count);
    let mut params = spec.params.clone();
    match spec.ov_split {
        OvSplit::All => {}
        OvSplit::Train => {
            let kinds: Vec<ShapeKind> =
                ALL_KINDS.iter().copied().filter(|&k| k != OV_HOLDOUT).collect();
            params.kinds = Some(kinds);
        }
        OvSplit::OvHoldout => {
            params.kinds = Some(vec![OV_HOLDOUT]);
        }
    }
    for i in 0..spec.count {
        let clip_seed = spec.seed.wrapping_mul(0x0100_0000_01b3).wrapping_add(i as u64);
        let mut clip = gen_clip(clip_seed, &params)?;
        // A clip occasionally packs badly for referring uniqueness; retry on
        // a shifted seed rather than failing the dataset.
        let annotations;
        let mut attempts = 0;
        loop {
            match annotate_all(&clip, &spec.tasks) {
                Ok(a) => {
                    annotations = a;
                    break;
                }
                Err(e) if attempts < 8 => {
                    attempts += 1;
                    let retry_seed = clip_seed.wrapping_add(0x5151_0000 + attempts);
                    clip = gen_clip(retry_seed, &params)?;
                    let _ = e;
                }
                Err(e) => return Err(e),
            }
        }
        out.push((clip, annotations));
    }
    Ok(out)
}

fn annotate_all(clip: &SyntheticClip, tasks: &[TaskId]) -> Result<Vec<TaskAnnotation>> {
    tasks.iter().map(|&t| gen_task_annotations(clip, t)).collect()
}

/// Serialize a generated dataset to `dir`: `manifest.json` plus one PNG per
/// frame under `frames/`.
pub fn write_dataset(
    dir: &Path,
    spec: &GenSpec,
    clips: &[(SyntheticClip, Vec<TaskAnnotation>)],
) -> Result<DatasetManifest> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir)?;
    let mut records = Vec::with_capacity(clips.len());
    for (id, (clip, annotations)) in clips.iter().enumerate() {
        let mut frame_paths = Vec::with_capacity(clip.t);
        for (k, frame) in clip.frames.iter().enumerate() {
            let rel = format!("frames/clip{id:04}_f{k:02}.png");
            let img = image::RgbImage::from_raw(clip.w as u32, clip.h as u32, frame.clone())
                .ok_or_else(|| X2Error::Data("frame buffer size mismatch".into()))?;
            img.save(dir.join(&rel))
                .map_err(|e| X2Error::Data(format!("png write failed: {e}")))?;
            frame_paths.push(rel);
        }
        let instances = clip
            .instances
            .iter()
            .map(|o| ManifestInstance {
                category: o.kind,
                color: o.color,
                size: o.size,
                visibility: o.visibility.clone(),
                rle_track: o.track.iter().map(rle_encode).collect(),
            })
            .collect();
        records.push(ManifestRecord {
            id,
            seed: clip.seed,
            t: clip.t,
            h: clip.h,
            w: clip.w,
            frame_paths,
            instances,
            annotations: annotations.clone(),
        });
    }
    let manifest = DatasetManifest {
        format_version: MANIFEST_FORMAT_VERSION,
        name: spec.name.clone(),
        seed: spec.seed,
        records,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Load a manifest and its PNG frames back into clips.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<SyntheticClip>)> {
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format_version != MANIFEST_FORMAT_VERSION {
        return Err(X2Error::Data(format!(
            "unsupported manifest format_version {}",
            manifest.format_version
        )));
    }
    let mut clips = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let mut frames = Vec::with_capacity(rec.t);
        for rel in &rec.frame_paths {
            let img = image::open(dir.join(rel))
                .map_err(|e| X2Error::Data(format!("png read failed for {rel}: {e}")))?
                .to_rgb8();
            if (img.width() as usize, img.height() as usize) != (rec.w, rec.h) {
                return Err(X2Error::Data(format!("frame {rel} has unexpected size")));
            }
            frames.push(img.into_raw());
        }
        let mut instances = Vec::with_capacity(rec.instances.len());
        for mi in &rec.instances {
            let track: Result<Vec<BitMask>> = mi.rle_track.iter().map(rle_decode).collect();
            let track = track?;
            // centers are not persisted; recover per-frame centroids
            let centers = track
                .iter()
                .map(|m| {
                    m.centroid()
                        .map(|(y, x)| (y.round() as i64, x.round() as i64))
                        .unwrap_or((0, 0))
                })
                .collect();
            instances.push(Instance {
                kind: mi.category,
                color: mi.color,
                size: mi.size,
                half: 0,
                centers,
                visibility: mi.visibility.clone(),
                track,
            });
        }
        clips.push(SyntheticClip {
            seed: rec.seed,
            t: rec.t,
            h: rec.h,
            w: rec.w,
            frames,
            instances,
        });
    }
    Ok((manifest, clips))
}

/// Category census of a clip set (used by the OV split law tests and CLI).
pub fn categories_present(clips: &[SyntheticClip]) -> BTreeSet<ShapeKind> {
    clips
        .iter()
        .flat_map(|c| c.instances.iter().map(|o| o.kind))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region::rasterize_prompt;

    fn params(t: usize, n: usize) -> ClipParams {
        ClipParams { t, h: 64, w: 64, n_objects: n, twins: false, occlusion: false, kinds: None }
    }

    #[test]
    fn same_seed_same_clip() {
        let a = gen_clip(7, &params(4, 3)).unwrap();
        let b = gen_clip(7, &params(4, 3)).unwrap();
        assert_eq!(a.frames, b.frames);
        for (x, y) in a.instances.iter().zip(b.instances.iter()) {
            assert_eq!(x.track, y.track);
        }
    }

    #[test]
    fn t1_is_a_valid_image_sample() {
        let c = gen_clip(3, &params(1, 2)).unwrap();
        assert_eq!(c.t, 1);
        assert_eq!(c.frames.len(), 1);
        assert!(c.instances.iter().all(|o| !o.track[0].is_empty()));
    }

    #[test]
    fn n_objects_gives_n_tracks() {
        let c = gen_clip(11, &params(6, 3)).unwrap();
        assert_eq!(c.instances.len(), 3);
        for o in &c.instances {
            assert_eq!(o.track.len(), 6);
        }
    }

    #[test]
    fn masks_connected_and_disjoint() {
        let c = gen_clip(5, &params(5, 3)).unwrap();
        for k in 0..c.t {
            for (i, a) in c.instances.iter().enumerate() {
                for b in c.instances.iter().skip(i + 1) {
                    assert_eq!(a.track[k].intersection_count(&b.track[k]), 0);
                }
            }
        }
    }

    #[test]
    fn ref_annotation_unique_and_single_target() {
        for seed in 0..20 {
            let c = gen_clip(seed, &params(1, 3)).unwrap();
            let a = gen_task_annotations(&c, TaskId::IRef).unwrap();
            assert_eq!(a.target_instances.len(), 1);
            let Condition::FreeText(expr) = &a.conditions[0] else { panic!() };
            assert_eq!(match_expression(&c, expr).unwrap(), a.target_instances);
        }
    }

    #[test]
    fn gen_annotation_covers_every_instance_once() {
        let c = gen_clip(9, &params(1, 3)).unwrap();
        let a = gen_task_annotations(&c, TaskId::IGen).unwrap();
        let mut t = a.target_instances.clone();
        t.sort_unstable();
        assert_eq!(t, vec![0, 1, 2]);
        assert_eq!(a.conditions.len(), 3);
    }

    #[test]
    fn ov_split_law() {
        let train = GenSpec {
            name: "t".into(),
            seed: 1,
            count: 4,
            params: params(1, 2),
            tasks: vec![TaskId::IOv],
            ov_split: OvSplit::Train,
        };
        let clips: Vec<SyntheticClip> =
            build_dataset(&train).unwrap().into_iter().map(|(c, _)| c).collect();
        assert!(!categories_present(&clips).contains(&OV_HOLDOUT));
        let eval = GenSpec { ov_split: OvSplit::OvHoldout, ..train };
        let clips: Vec<SyntheticClip> =
            build_dataset(&eval).unwrap().into_iter().map(|(c, _)| c).collect();
        assert_eq!(categories_present(&clips), [OV_HOLDOUT].into_iter().collect());
    }

    #[test]
    fn vgd_prompt_validity() {
        for seed in 0..40 {
            let c = gen_clip(
                seed,
                &ClipParams { occlusion: true, ..params(6, 2) },
            )
            .unwrap();
            for idx in 0..c.instances.len() {
                let prompts = build_vgd_prompts(&c, idx).unwrap();
                assert_eq!(prompts.len(), 4);
                let fv = c.instances[idx].first_visible_frame().unwrap();
                let gt = &c.instances[idx].track[fv];
                match &prompts[0] {
                    VisualPrompt::Point { y, x, frame_index } => {
                        assert_eq!(*frame_index, fv);
                        assert!(gt.get(*y, *x), "point must lie inside the mask");
                    }
                    _ => panic!("expected point first"),
                }
                match &prompts[1] {
                    VisualPrompt::Box { y0, x0, y1, x1, .. } => {
                        assert_eq!(gt.bbox().unwrap(), (*y0, *x0, *y1, *x1));
                    }
                    _ => panic!("expected box second"),
                }
                match &prompts[2] {
                    VisualPrompt::Scribble { points, .. } => {
                        assert!(points.len() >= 2);
                        for &(y, x) in points {
                            assert!(gt.get(y, x), "scribble vertex inside the mask");
                        }
                    }
                    _ => panic!("expected scribble third"),
                }
                match &prompts[3] {
                    VisualPrompt::Mask { rle, .. } => {
                        assert_eq!(&rle_decode(rle).unwrap(), gt);
                    }
                    _ => panic!("expected mask fourth"),
                }
            }
        }
    }

    #[test]
    fn training_prompt_sampling_is_uniform() {
        let c = gen_clip(2, &params(4, 1)).unwrap();
        let prompts = build_vgd_prompts(&c, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0usize; 4];
        let draws = 10_000;
        for _ in 0..draws {
            let p = sample_training_prompt(&prompts, &mut rng);
            let k = prompts.iter().position(|q| q == p).unwrap();
            counts[k] += 1;
        }
        for &n in &counts {
            let f = n as f64 / draws as f64;
            assert!((f - 0.25).abs() < 0.02, "frequency {f}");
        }
        // fixed seed -> fixed kind
        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        assert_eq!(
            sample_training_prompt(&prompts, &mut r1),
            sample_training_prompt(&prompts, &mut r2)
        );
    }

    #[test]
    fn scribble_rasterizes_inside_dilated_mask() {
        let c = gen_clip(13, &params(1, 2)).unwrap();
        for idx in 0..2 {
            let prompts = build_vgd_prompts(&c, idx).unwrap();
            let m = rasterize_prompt(&prompts[2], c.h, c.w).unwrap();
            assert!(!m.is_empty());
        }
    }

    #[test]
    fn twins_share_attributes() {
        let c = gen_clip(
            21,
            &ClipParams { twins: true, ..params(4, 2) },
        )
        .unwrap();
        let a = &c.instances[0];
        let b = &c.instances[1];
        assert_eq!((a.kind, a.color, a.size), (b.kind, b.color, b.size));
    }

    #[test]
    fn manifest_round_trips_through_disk() {
        let dir = std::env::temp_dir().join(format!("x2seg-data-test-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let spec = GenSpec {
            name: "rt".into(),
            seed: 5,
            count: 2,
            params: params(3, 2),
            tasks: vec![TaskId::VGen, TaskId::VRef, TaskId::VVgd],
            ov_split: OvSplit::All,
        };
        let clips = build_dataset(&spec).unwrap();
        let manifest = write_dataset(&dir, &spec, &clips).unwrap();
        let (m2, loaded) = load_dataset(&dir).unwrap();
        assert_eq!(manifest.records.len(), m2.records.len());
        for ((orig, _), back) in clips.iter().zip(loaded.iter()) {
            assert_eq!(orig.frames, back.frames);
            for (a, b) in orig.instances.iter().zip(back.instances.iter()) {
                assert_eq!(a.track, b.track);
                assert_eq!(a.visibility, b.visibility);
            }
        }
        // determinism: regenerating and rewriting produces identical bytes
        let clips2 = build_dataset(&spec).unwrap();
        let dir2 = dir.join("again");
        write_dataset(&dir2, &spec, &clips2).unwrap();
        let j1 = std::fs::read(dir.join("manifest.json")).unwrap();
        let j2 = std::fs::read(dir2.join("manifest.json")).unwrap();
        assert_eq!(j1, j2);
        let _ = std::fs::remove_dir_all(&dir);
    }
}
