//! Small shared network blocks: multi-head attention with optional masking
//! and zero-initialized output projection, a 2-layer MLP, bilinear
//! upsampling as matmul, and seeded parameter initialization.

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{linear, Linear, Module, VarBuilder, VarMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

/// Multi-head attention over unbatched (L, D) sequences.
pub struct Mha {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    n_heads: usize,
    dim: usize,
}

impl Mha {
    pub fn new(dim: usize, n_heads: usize, vb: VarBuilder) -> Result<Self> {
        assert_eq!(dim % n_heads, 0);
        Ok(Self {
            wq: linear(dim, dim, vb.pp("wq"))?,
            wk: linear(dim, dim, vb.pp("wk"))?,
            wv: linear(dim, dim, vb.pp("wv"))?,
            wo: linear(dim, dim, vb.pp("wo"))?,
            n_heads,
            dim,
        })
    }

    /// `q`: (Lq, D), `kv`: (Lk, D), `mask`: optional additive (Lq, Lk).
    pub fn forward(&self, q: &Tensor, kv: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (lq, _) = q.dims2()?;
        let (lk, _) = kv.dims2()?;
        let hd = self.dim / self.n_heads;
        // (L, D) -> (heads, L, hd)
        let split = |t: &Tensor, l: usize| -> candle_core::Result<Tensor> {
            t.reshape((l, self.n_heads, hd))?.transpose(0, 1)?.contiguous()
        };
        let qh = split(&self.wq.forward(q)?, lq)?;
        let kh = split(&self.wk.forward(kv)?, lk)?;
        let vh = split(&self.wv.forward(kv)?, lk)?;
        let scale = (hd as f64).powf(-0.5);
        let mut att = (qh.matmul(&kh.transpose(D::Minus2, D::Minus1)?)? * scale)?;
        if let Some(m) = mask {
            att = att.broadcast_add(&m.unsqueeze(0)?)?;
        }
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let out = att.matmul(&vh)?; // (heads, Lq, hd)
        let out = out.transpose(0, 1)?.reshape((lq, self.dim))?;
        Ok(self.wo.forward(&out)?)
    }
}

/// Two-layer MLP with GELU.
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(d_in: usize, d_hidden: usize, d_out: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            fc1: linear(d_in, d_hidden, vb.pp("fc1"))?,
            fc2: linear(d_hidden, d_out, vb.pp("fc2"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)?)
    }
}

/// Layer normalization built from primitive ops. The fused layer-norm in the
/// tensor library has no backward pass, so gradients must flow through an
/// explicit mean/variance formulation.
pub struct Ln {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl Ln {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let norm = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(norm
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)?)
    }
}

pub fn ln(dim: usize, vb: VarBuilder) -> Result<Ln> {
    Ok(Ln {
        weight: vb.get_with_hints(dim, "ln_scale", candle_nn::Init::Const(1.))?,
        bias: vb.get_with_hints(dim, "bias", candle_nn::Init::Const(0.))?,
        eps: 1e-5,
    })
}

/// Additive causal mask (L, L): 0 on and below the diagonal, -inf above.
pub fn causal_mask(l: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let data: Vec<f32> = (0..l)
        .flat_map(|i| (0..l).map(move |j| if j <= i { 0.0 } else { f32::NEG_INFINITY }))
        .collect();
    Ok(Tensor::from_vec(data, (l, l), dev)?.to_dtype(dtype)?)
}

/// Row-interpolation matrix (n_out, n_in) for bilinear resizing with
/// half-pixel centers.
pub fn bilinear_matrix(n_in: usize, n_out: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let mut data = vec![0f64; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        let f = src - i0 as f64;
        data[o * n_in + i0] += 1.0 - f;
        data[o * n_in + i1] += f;
    }
    Ok(Tensor::from_vec(data, (n_out, n_in), dev)?.to_dtype(dtype)?)
}

/// Bilinear upsample of (C, H, W) or (N, C, H, W) maps to (h_out, w_out),
/// expressed as two matmuls so gradients flow.
pub fn upsample_bilinear(x: &Tensor, h_out: usize, w_out: usize) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    if (h, w) == (h_out, w_out) {
        return Ok(x.clone());
    }
    let ah = bilinear_matrix(h, h_out, x.dtype(), x.device())?; // (h_out, h)
    let aw = bilinear_matrix(w, w_out, x.dtype(), x.device())?; // (w_out, w)
    let lead: usize = dims[..dims.len() - 2].iter().product();
    let flat = x.reshape((lead, h, w))?;
    let y = ah.unsqueeze(0)?.broadcast_matmul(&flat)?; // (lead, h_out, w)
    let y = y.broadcast_matmul(&aw.t()?.unsqueeze(0)?)?; // (lead, h_out, w_out)
    let mut out_dims = dims;
    let n = out_dims.len();
    out_dims[n - 2] = h_out;
    out_dims[n - 1] = w_out;
    Ok(y.reshape(out_dims)?)
}

/// Deterministic parameter initialization from a ChaCha stream in
/// sorted-name order. Weight matrices and convolution kernels use fan-in
/// scaled normals (std = sqrt(2 / fan_in)) so activations keep their scale
/// through frozen random stacks; rank-1 embeddings use N(0, 0.02).
/// Set-prediction query and level embeddings start at unit scale so the
/// queries are distinguishable from the first step; biases and any variable
/// whose name contains one of `zero_patterns` are set to zero.
pub fn seeded_init(varmap: &VarMap, seed: u64, zero_patterns: &[&str]) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = varmap.data().lock().expect("varmap lock");
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    for name in names {
        let var = &data[name];
        let shape = var.shape().clone();
        let n = shape.elem_count();
        let zero = name.ends_with(".bias") || zero_patterns.iter().any(|p| name.contains(p));
        let unit = name.ends_with(".queries") || name.ends_with(".level_embed");
        let vals: Vec<f64> = if zero {
            vec![0.0; n]
        } else if name.ends_with(".ln_scale") {
            vec![1.0; n]
        } else {
            let std = if unit {
                1.0
            } else if shape.dims().len() >= 2 {
                let fan_in: usize = shape.dims()[1..].iter().product();
                (2.0 / fan_in as f64).sqrt()
            } else {
                0.02
            };
            let normal = Normal::new(0.0f64, std).expect("valid normal");
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        let t = Tensor::from_vec(vals, shape, var.device())?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}
