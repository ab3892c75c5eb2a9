use candle_core::{Tensor, D};

use super::lora::AdaptedDense;
use super::params::{Init, ParamInit};
use super::{NnError, Result};

/// Exact GELU, `x·Φ(x)`. Built from `erf` rather than the fused op, whose
/// backward pass uses a truncated 1/√(2π).
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let cdf = ((x / std::f64::consts::SQRT_2)?.erf()? + 1.0)?;
    Ok(((x * cdf)? * 0.5)?)
}

/// Logistic function via `tanh`, which keeps the backward pass finite for
/// large-magnitude logits.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

/// Row-major `out_len × in_len` matrix performing 1-D bilinear resampling
/// with half-pixel centres (align_corners = false).
pub fn bilinear_matrix(out_len: usize, in_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let w1 = src - i0 as f64;
        m[o * in_len + i0] += 1.0 - w1;
        m[o * in_len + i1] += w1;
    }
    m
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    in_dim: usize,
    out_dim: usize,
}

impl Dense {
    pub fn new(
        pi: &mut ParamInit,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        weight_init: Init,
        bias_init: Option<Init>,
        trainable: bool,
    ) -> Result<Self> {
        let weight =
            pi.tensor(&format!("{name}.weight"), &[out_dim, in_dim], weight_init, trainable)?;
        let bias = match bias_init {
            Some(init) => Some(pi.tensor(&format!("{name}.bias"), &[out_dim], init, trainable)?),
            None => None,
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// Default fan-in uniform initialization, U(-1/sqrt(in), 1/sqrt(in)).
    pub fn fan_in(
        pi: &mut ParamInit,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        trainable: bool,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self::new(pi, name, in_dim, out_dim, Init::Uniform(bound), Some(Init::Zeros), trainable)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Applies the affine map to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| NnError::Shape("scalar input to dense layer".into()))?;
        if last != self.in_dim {
            return Err(NnError::Shape(format!(
                "dense layer expects width {}, got {last}",
                self.in_dim
            )));
        }
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((rows, self.in_dim))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pi: &mut ParamInit, name: &str, dim: usize, trainable: bool) -> Result<Self> {
        Ok(Self {
            gamma: pi.tensor(&format!("{name}.weight"), &[dim], Init::Ones, trainable)?,
            beta: pi.tensor(&format!("{name}.bias"), &[dim], Init::Zeros, trainable)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Dense,
    fc2: Dense,
}

impl Mlp {
    pub fn new(
        pi: &mut ParamInit,
        name: &str,
        dims: (usize, usize, usize),
        trainable: bool,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Dense::fan_in(pi, &format!("{name}.fc1"), dims.0, dims.1, trainable)?,
            fc2: Dense::fan_in(pi, &format!("{name}.fc2"), dims.1, dims.2, trainable)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&gelu(&self.fc1.forward(x)?)?)
    }
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    Ok(x.reshape((b, n, heads, c / heads))?.transpose(1, 2)?.contiguous()?)
}

fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, n, dh) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, n, h * dh))?)
}

fn scaled_dot_product(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let dh = q.dim(D::Minus1)?;
    let scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
    Ok(softmax_last_dim(&scores)?.matmul(v)?)
}

/// ViT self-attention with a fused qkv projection; both projections accept
/// low-rank adapters.
#[derive(Debug, Clone)]
pub struct MultiHeadSelfAttention {
    pub qkv: AdaptedDense,
    pub proj: AdaptedDense,
    heads: usize,
}

impl MultiHeadSelfAttention {
    pub fn new(
        pi: &mut ParamInit,
        name: &str,
        width: usize,
        heads: usize,
        trainable: bool,
    ) -> Result<Self> {
        if width % heads != 0 {
            return Err(NnError::Config(format!(
                "width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            qkv: AdaptedDense::new(Dense::fan_in(pi, &format!("{name}.qkv"), width, 3 * width, trainable)?, format!("{name}.qkv")),
            proj: AdaptedDense::new(Dense::fan_in(pi, &format!("{name}.proj"), width, width, trainable)?, format!("{name}.proj")),
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor, adapters: bool) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let qkv = self
            .qkv
            .forward(x, adapters)?
            .reshape((b, n, 3, self.heads, c / self.heads))?
            .permute((2, 0, 3, 1, 4))?
            .contiguous()?;
        let (q, k, v) = (qkv.get(0)?, qkv.get(1)?, qkv.get(2)?);
        let out = merge_heads(&scaled_dot_product(&q, &k, &v)?)?;
        self.proj.forward(&out, adapters)
    }
}

/// Attention with separate query/key/value inputs, as used by the two-way decoder.
#[derive(Debug, Clone)]
pub struct Attention {
    q_proj: Dense,
    k_proj: Dense,
    v_proj: Dense,
    out_proj: Dense,
    heads: usize,
}

impl Attention {
    pub fn new(
        pi: &mut ParamInit,
        name: &str,
        width: usize,
        heads: usize,
        trainable: bool,
    ) -> Result<Self> {
        if width % heads != 0 {
            return Err(NnError::Config(format!(
                "width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q_proj: Dense::fan_in(pi, &format!("{name}.q_proj"), width, width, trainable)?,
            k_proj: Dense::fan_in(pi, &format!("{name}.k_proj"), width, width, trainable)?,
            v_proj: Dense::fan_in(pi, &format!("{name}.v_proj"), width, width, trainable)?,
            out_proj: Dense::fan_in(pi, &format!("{name}.out_proj"), width, width, trainable)?,
            heads,
        })
    }

    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let q = split_heads(&self.q_proj.forward(q)?, self.heads)?;
        let k = split_heads(&self.k_proj.forward(k)?, self.heads)?;
        let v = split_heads(&self.v_proj.forward(v)?, self.heads)?;
        self.out_proj.forward(&merge_heads(&scaled_dot_product(&q, &k, &v)?)?)
    }
}
