//! Binary masks and their run-length encoding.
//!
//! Masks are stored row-major. RLE runs are `(start, length)` pairs over the
//! flattened row-major index space, with strictly increasing, non-overlapping
//! starts, so encode/decode is lossless and manifests stay diffable.

use serde::{Deserialize, Serialize};

use crate::error::{Result, X2Error};

/// A dense binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    pub h: usize,
    pub w: usize,
    data: Vec<bool>,
}

impl BitMask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![false; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                m.data[y * w + x] = f(y, x);
            }
        }
        m
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(X2Error::Shape(format!(
                "mask data length {} does not match {h}x{w}",
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn intersection_count(&self, other: &BitMask) -> usize {
        self.data
            .iter()
            .zip(other.data.iter())
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn union_count(&self, other: &BitMask) -> usize {
        self.data
            .iter()
            .zip(other.data.iter())
            .filter(|(&a, &b)| a || b)
            .count()
    }

    pub fn intersect(&self, other: &BitMask) -> BitMask {
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a && b)
            .collect();
        BitMask { h: self.h, w: self.w, data }
    }

    /// Tight bounding box as (y0, x0, y1, x1) inclusive, or None when empty.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
        let mut any = false;
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(y, x) {
                    any = true;
                    y0 = y0.min(y);
                    x0 = x0.min(x);
                    y1 = y1.max(y);
                    x1 = x1.max(x);
                }
            }
        }
        any.then_some((y0, x0, y1, x1))
    }

    /// Centroid of the set pixels (y, x), or None when empty.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut sy = 0.0;
        let mut sx = 0.0;
        let mut n = 0usize;
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(y, x) {
                    sy += y as f64;
                    sx += x as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sy / n as f64, sx / n as f64))
    }
}

/// Row-major run-length encoding of a binary mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub h: usize,
    pub w: usize,
    /// (start, length) pairs over the flattened mask, starts strictly increasing.
    pub runs: Vec<(usize, usize)>,
}

pub fn rle_encode(mask: &BitMask) -> Rle {
    let mut runs = Vec::new();
    let mut i = 0;
    let n = mask.h * mask.w;
    while i < n {
        if mask.data[i] {
            let start = i;
            while i < n && mask.data[i] {
                i += 1;
            }
            runs.push((start, i - start));
        } else {
            i += 1;
        }
    }
    Rle { h: mask.h, w: mask.w, runs }
}

pub fn rle_decode(rle: &Rle) -> Result<BitMask> {
    let n = rle.h * rle.w;
    let mut data = vec![false; n];
    let mut prev_end = 0usize;
    for &(start, len) in &rle.runs {
        if len == 0 {
            return Err(X2Error::Data("rle run with zero length".into()));
        }
        if start < prev_end {
            return Err(X2Error::Data(format!(
                "rle runs overlap or are out of order at start {start}"
            )));
        }
        let end = start
            .checked_add(len)
            .filter(|&e| e <= n)
            .ok_or_else(|| X2Error::Data(format!("rle run ({start},{len}) out of range")))?;
        for v in &mut data[start..end] {
            *v = true;
        }
        prev_end = end;
    }
    Ok(BitMask { h: rle.h, w: rle.w, data })
}
