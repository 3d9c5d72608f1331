//! Parameter-free region sampling: visual prompts are rasterized to pixel
//! sets, gathered on the stride-4 feature grid, and adaptively pooled into a
//! KxK grid of region tokens over the region's bounding box.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Result, X2Error};
use crate::mask::BitMask;

/// An interactive visual prompt in pixel units of the prompted frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum VisualPrompt {
    Point { y: usize, x: usize, frame_index: usize },
    Box { y0: usize, x0: usize, y1: usize, x1: usize, frame_index: usize },
    /// Polyline of >= 2 vertices, (y, x) pairs.
    Scribble { points: Vec<(usize, usize)>, frame_index: usize },
    Mask { rle: crate::mask::Rle, frame_index: usize },
}

impl VisualPrompt {
    pub fn frame_index(&self) -> usize {
        match self {
            VisualPrompt::Point { frame_index, .. }
            | VisualPrompt::Box { frame_index, .. }
            | VisualPrompt::Scribble { frame_index, .. }
            | VisualPrompt::Mask { frame_index, .. } => *frame_index,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            VisualPrompt::Point { .. } => "point",
            VisualPrompt::Box { .. } => "box",
            VisualPrompt::Scribble { .. } => "scribble",
            VisualPrompt::Mask { .. } => "mask",
        }
    }
}

/// Rasterize a prompt to a binary region mask of the frame.
pub fn rasterize_prompt(prompt: &VisualPrompt, height: usize, width: usize) -> Result<BitMask> {
    let oob = |y: usize, x: usize| y >= height || x >= width;
    match prompt {
        VisualPrompt::Point { y, x, .. } => {
            if oob(*y, *x) {
                return Err(X2Error::Data(format!("point ({y},{x}) out of bounds")));
            }
            let mut m = BitMask::zeros(height, width);
            m.set(*y, *x, true);
            Ok(m)
        }
        VisualPrompt::Box { y0, x0, y1, x1, .. } => {
            // corners are inclusive: (y0,x0)-(y1,x1) spans (y1-y0+1)x(x1-x0+1)
            if y0 >= y1 || x0 >= x1 {
                return Err(X2Error::Data(format!(
                    "degenerate box ({y0},{x0})-({y1},{x1})"
                )));
            }
            if *y1 >= height || *x1 >= width {
                return Err(X2Error::Data("box out of bounds".into()));
            }
            Ok(BitMask::from_fn(height, width, |y, x| {
                (*y0..=*y1).contains(&y) && (*x0..=*x1).contains(&x)
            }))
        }
        VisualPrompt::Scribble { points, .. } => {
            if points.len() < 2 {
                return Err(X2Error::Data("scribble needs at least 2 points".into()));
            }
            let mut m = BitMask::zeros(height, width);
            for pair in points.windows(2) {
                let (y0, x0) = pair[0];
                let (y1, x1) = pair[1];
                if oob(y0, x0) || oob(y1, x1) {
                    return Err(X2Error::Data("scribble point out of bounds".into()));
                }
                draw_line(&mut m, y0, x0, y1, x1);
            }
            Ok(dilate1(&m))
        }
        VisualPrompt::Mask { rle, .. } => {
            if rle.h != height || rle.w != width {
                return Err(X2Error::Data(format!(
                    "mask prompt is {}x{}, frame is {height}x{width}",
                    rle.h, rle.w
                )));
            }
            crate::mask::rle_decode(rle)
        }
    }
}

fn draw_line(m: &mut BitMask, y0: usize, x0: usize, y1: usize, x1: usize) {
    // Bresenham over (x, y) with y as the row axis.
    let (mut x, mut y) = (x0 as isize, y0 as isize);
    let (x1, y1) = (x1 as isize, y1 as isize);
    let dx = (x1 - x).abs();
    let dy = -(y1 - y).abs();
    let sx = if x < x1 { 1 } else { -1 };
    let sy = if y < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        m.set(y as usize, x as usize, true);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn dilate1(m: &BitMask) -> BitMask {
    BitMask::from_fn(m.h, m.w, |y, x| {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let ny = y as isize + dy;
                let nx = x as isize + dx;
                if ny >= 0 && nx >= 0 && (ny as usize) < m.h && (nx as usize) < m.w
                    && m.get(ny as usize, nx as usize)
                {
                    return true;
                }
            }
        }
        false
    })
}

/// Pooling kernel for region tokens; Table-10 grid {2, 4, 8, global}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", untagged)]
pub enum KernelSize {
    Fixed(usize),
    Global,
}

impl KernelSize {
    pub fn grid(self) -> usize {
        match self {
            KernelSize::Fixed(k) => k,
            KernelSize::Global => 1,
        }
    }
}

/// KxK grid of region tokens in row-major spatial order.
#[derive(Debug, Clone)]
pub struct RegionEmbedding {
    /// (K*K, C) token matrix.
    pub tokens: Tensor,
    pub kernel: KernelSize,
}

/// Pool stride-4 features over a rasterized region.
///
/// The region is projected onto the feature grid (a cell is active when any
/// of its pixels is set), then partitioned into a KxK grid of spatial bins
/// over the region's bounding box and averaged per bin. Empty bins inherit
/// the region's global mean. An empty projected region falls back to the
/// nearest feature cell when `fallback` is set, otherwise it is an error.
pub fn sample_region(
    features: &Tensor, // (C, Hf, Wf)
    region: &BitMask,
    kernel: KernelSize,
    fallback: bool,
) -> Result<RegionEmbedding> {
    let (_c, hf, wf) = features.dims3()?;
    if region.h % hf != 0 || region.w % wf != 0 {
        return Err(X2Error::Shape(format!(
            "region {}x{} not divisible by feature grid {hf}x{wf}",
            region.h, region.w
        )));
    }
    let sy = region.h / hf;
    let sx = region.w / wf;
    let mut cells: Vec<(usize, usize)> = Vec::new();
    for i in 0..hf {
        for j in 0..wf {
            'block: for y in i * sy..(i + 1) * sy {
                for x in j * sx..(j + 1) * sx {
                    if region.get(y, x) {
                        cells.push((i, j));
                        break 'block;
                    }
                }
            }
        }
    }
    if cells.is_empty() {
        if !fallback {
            return Err(X2Error::Data(
                "degenerate prompt: region is empty on the feature grid".into(),
            ));
        }
        let (cy, cx) = region
            .centroid()
            .map(|(y, x)| (y / sy as f64, x / sx as f64))
            .unwrap_or((hf as f64 / 2.0, wf as f64 / 2.0));
        let i = (cy.round() as usize).min(hf - 1);
        let j = (cx.round() as usize).min(wf - 1);
        cells.push((i, j));
    }

    let flat = features.flatten_from(1)?; // (C, Hf*Wf)
    let dev = features.device();
    let gather = |cells: &[(usize, usize)]| -> candle_core::Result<Tensor> {
        let idx: Vec<u32> = cells.iter().map(|&(i, j)| (i * wf + j) as u32).collect();
        let idx = Tensor::new(idx.as_slice(), dev)?;
        flat.index_select(&idx, 1)?.mean(1)
    };

    let global_mean = gather(&cells)?;
    let k = kernel.grid();
    if k == 1 {
        let tokens = global_mean.unsqueeze(0)?;
        return Ok(RegionEmbedding { tokens, kernel });
    }

    let (mut i0, mut j0, mut i1, mut j1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for &(i, j) in &cells {
        i0 = i0.min(i);
        j0 = j0.min(j);
        i1 = i1.max(i);
        j1 = j1.max(j);
    }
    let bh = i1 - i0 + 1;
    let bw = j1 - j0 + 1;
    let mut rows = Vec::with_capacity(k * k);
    for bi in 0..k {
        // adaptive-pooling bin edges over the bounding box
        let ri0 = i0 + bi * bh / k;
        let ri1 = i0 + ((bi + 1) * bh).div_ceil(k);
        for bj in 0..k {
            let rj0 = j0 + bj * bw / k;
            let rj1 = j0 + ((bj + 1) * bw).div_ceil(k);
            let bin: Vec<(usize, usize)> = cells
                .iter()
                .copied()
                .filter(|&(i, j)| (ri0..ri1).contains(&i) && (rj0..rj1).contains(&j))
                .collect();
            if bin.is_empty() {
                rows.push(global_mean.clone());
            } else {
                rows.push(gather(&bin)?);
            }
        }
    }
    let tokens = Tensor::stack(&rows, 0)?;
    Ok(RegionEmbedding { tokens, kernel })
}
