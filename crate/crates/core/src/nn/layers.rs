use candle_core::{Tensor, D};
use rand::Rng;

use super::conv::{conv3d, ConvGeometry};
use super::params::{Init, ParamBuilder};
use super::Mode;
use crate::error::Result;

#[derive(Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: pb.param("weight", &[out_dim, in_dim], Init::Uniform(bound))?,
            bias: pb.param("bias", &[out_dim], Init::Uniform(bound))?,
        })
    }

    /// Applies `x W^T + b` over the last axis.
    pub fn forward(&self, x: &Tensor, mode: &Mode) -> Result<Tensor> {
        let w = mode.p(&self.weight);
        let b = mode.p(&self.bias);
        Ok(x.broadcast_matmul(&w.t()?)?.broadcast_add(&b)?)
    }
}

/// Layer normalization over the last axis.
#[derive(Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.param("gamma", &[dim], Init::Const(1.0))?,
            beta: pb.param("beta", &[dim], Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: &Mode) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&mode.p(&self.gamma))?
            .broadcast_add(&mode.p(&self.beta))?)
    }
}

/// Convolution with an optional bias, over `(n, c, d, h, w)` tensors.
#[derive(Clone)]
pub struct Conv3d {
    weight: Tensor,
    bias: Option<Tensor>,
    geometry: ConvGeometry,
}

impl Conv3d {
    pub fn new(pb: &ParamBuilder, in_ch: usize, out_ch: usize, geometry: ConvGeometry, bias: bool) -> Result<Self> {
        let [kd, kh, kw] = geometry.kernel;
        let fan_in = in_ch * geometry.kernel_volume();
        let weight = pb.param("weight", &[out_ch, in_ch, kd, kh, kw], Init::KaimingUniform { fan_in })?;
        let bias = if bias {
            Some(pb.param("bias", &[out_ch], Init::Uniform(1.0 / (fan_in as f64).sqrt()))?)
        } else {
            None
        };
        Ok(Self { weight, bias, geometry })
    }

    pub fn geometry(&self) -> ConvGeometry {
        self.geometry
    }

    pub fn dtype(&self) -> candle_core::DType {
        self.weight.dtype()
    }

    pub fn forward(&self, x: &Tensor, mode: &Mode) -> Result<Tensor> {
        let y = conv3d(x, &mode.p(&self.weight), self.geometry)?;
        match &self.bias {
            Some(b) => {
                let c = b.dim(0)?;
                Ok(y.broadcast_add(&mode.p(b).reshape((1, c, 1, 1, 1))?)?)
            }
            None => Ok(y),
        }
    }
}

/// Inverted dropout; identity outside training or when `p == 0`.
pub fn dropout(x: &Tensor, p: f64, mode: &mut Mode) -> Result<Tensor> {
    match mode {
        Mode::Train { rng } if p > 0.0 => {
            let keep = 1.0 - p;
            let mask: Vec<f64> = (0..x.elem_count())
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
            Ok((x * mask)?)
        }
        _ => Ok(x.clone()),
    }
}
