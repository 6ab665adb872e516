use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{dropout, Linear, Mode, ParamBuilder};

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let shifted = x.broadcast_sub(&x.max_keepdim(D::Minus1)?.detach())?;
    let e = shifted.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// `softmax(q k^T / sqrt(d)) v` for `(…, L, d)` operands.
/// Returns the attended values and the attention weights `(…, Lq, Ls)`.
pub fn scaled_dot_product(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let d = q.dim(D::Minus1)?;
    let scores = (q.contiguous()?.matmul(&k.t()?.contiguous()?)? / (d as f64).sqrt())?;
    let weights = softmax_last(&scores)?;
    let out = weights.matmul(&v.contiguous()?)?;
    Ok((out, weights))
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    dim: usize,
    dropout: f64,
}

impl MultiHeadAttention {
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize, dropout: f64) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("model_dim {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(&pb.pp("q_proj"), dim, dim)?,
            k: Linear::new(&pb.pp("k_proj"), dim, dim)?,
            v: Linear::new(&pb.pp("v_proj"), dim, dim)?,
            out: Linear::new(&pb.pp("out_proj"), dim, dim)?,
            heads,
            dim,
            dropout,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, _) = x.dims3()?;
        Ok(x.reshape((b, l, self.heads, self.dim / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `query (b, lq, d)`, `source (b, ls, d)` to `(b, lq, d)` plus weights `(b, heads, lq, ls)`.
    pub fn forward(&self, query: &Tensor, source: &Tensor, mode: &mut Mode) -> Result<(Tensor, Tensor)> {
        let (b, lq, dq) = query.dims3()?;
        let (bs, _, ds) = source.dims3()?;
        if dq != self.dim || ds != self.dim || b != bs {
            return Err(Error::Shape(format!(
                "attention over dim {}: query {:?}, source {:?}",
                self.dim,
                query.dims(),
                source.dims()
            )));
        }
        let q = self.split_heads(&self.q.forward(query, mode)?)?;
        let k = self.split_heads(&self.k.forward(source, mode)?)?;
        let v = self.split_heads(&self.v.forward(source, mode)?)?;
        let (_, weights) = scaled_dot_product(&q, &k, &v)?;
        let attn = dropout(&weights, self.dropout, mode)?;
        let ctx = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, lq, self.dim))?;
        Ok((self.out.forward(&ctx, mode)?, weights))
    }
}
