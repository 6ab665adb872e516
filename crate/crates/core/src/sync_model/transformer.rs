use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::attention::MultiHeadAttention;
use crate::error::{Error, Result};
use crate::nn::{dropout, LayerNorm, Linear, Mode, ParamBuilder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossModalConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl Default for CrossModalConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 8,
            model_dim: 512,
            ffn_dim: 2048,
            dropout: 0.1,
        }
    }
}

impl CrossModalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("cross-modal units need at least one layer".into()));
        }
        self.check_widths()
    }

    /// Everything `validate` checks except the layer count, which units may leave at zero.
    fn check_widths(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.ffn_dim == 0 {
            return Err(Error::Config("ffn_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Fixed sinusoidal position table `(len, dim)` for positions `0, step, 2 step, ...`.
pub fn sinusoidal_positions(len: usize, dim: usize, step: f64, dtype: DType) -> Result<Tensor> {
    let mut table = vec![0f64; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * step * rate;
            table[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Ok(Tensor::from_vec(table, (len, dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// One pre-norm cross-modal layer: the query stream attends to the
/// normalized source stream, then passes through a position-wise
/// feed-forward block. Both sublayers are residual.
#[derive(Clone)]
pub struct CrossModalLayer {
    norm_query: LayerNorm,
    norm_source: LayerNorm,
    attention: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    dropout: f64,
}

impl CrossModalLayer {
    pub fn new(pb: &ParamBuilder, cfg: &CrossModalConfig) -> Result<Self> {
        Ok(Self {
            norm_query: LayerNorm::new(&pb.pp("norm_query"), cfg.model_dim)?,
            norm_source: LayerNorm::new(&pb.pp("norm_source"), cfg.model_dim)?,
            attention: MultiHeadAttention::new(&pb.pp("attention"), cfg.model_dim, cfg.heads, cfg.dropout)?,
            norm_ffn: LayerNorm::new(&pb.pp("norm_ffn"), cfg.model_dim)?,
            ffn_in: Linear::new(&pb.pp("ffn_in"), cfg.model_dim, cfg.ffn_dim)?,
            ffn_out: Linear::new(&pb.pp("ffn_out"), cfg.ffn_dim, cfg.model_dim)?,
            dropout: cfg.dropout,
        })
    }

    /// Returns the updated query stream and this layer's attention weights.
    pub fn forward(&self, query: &Tensor, source: &Tensor, mode: &mut Mode) -> Result<(Tensor, Tensor)> {
        let q = self.norm_query.forward(query, mode)?;
        let s = self.norm_source.forward(source, mode)?;
        let (attended, weights) = self.attention.forward(&q, &s, mode)?;
        let x = (query + dropout(&attended, self.dropout, mode)?)?;
        let h = self.ffn_in.forward(&self.norm_ffn.forward(&x, mode)?, mode)?.relu()?;
        let h = dropout(&h, self.dropout, mode)?;
        let h = self.ffn_out.forward(&h, mode)?;
        let x = (&x + dropout(&h, self.dropout, mode)?)?;
        Ok((x, weights))
    }
}

/// A stack of cross-modal layers. Every layer draws keys and values from the
/// original (position-encoded) source sequence.
#[derive(Clone)]
pub struct CrossModalUnit {
    layers: Vec<CrossModalLayer>,
    norm_out: LayerNorm,
    dim: usize,
}

impl CrossModalUnit {
    pub fn new(pb: &ParamBuilder, cfg: &CrossModalConfig) -> Result<Self> {
        cfg.check_widths()?;
        let layers = (0..cfg.layers)
            .map(|i| CrossModalLayer::new(&pb.pp(format!("layer{i}")), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            norm_out: LayerNorm::new(&pb.pp("norm_out"), cfg.model_dim)?,
            dim: cfg.model_dim,
        })
    }

    pub fn encode(&self, target: &Tensor, source: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        Ok(self.encode_with_attention(target, source, mode)?.0)
    }

    /// `target (b, lt, d)` attends to `source (b, ls, d)`; output `(b, lt, d)`
    /// and the attention weights of every layer.
    pub fn encode_with_attention(&self, target: &Tensor, source: &Tensor, mode: &mut Mode) -> Result<(Tensor, Vec<Tensor>)> {
        let (_, lt, dt) = target.dims3()?;
        let (_, ls, ds) = source.dims3()?;
        if dt != self.dim || ds != self.dim {
            return Err(Error::Shape(format!(
                "cross-modal unit of width {} given target width {dt} and source width {ds}",
                self.dim
            )));
        }
        let dtype = target.dtype();
        // Both streams span the same time window, so positions are measured in
        // steps of the coarser stream.
        let unit = lt.min(ls).max(1) as f64;
        let mut x = target.broadcast_add(&sinusoidal_positions(lt, self.dim, unit / lt.max(1) as f64, dtype)?)?;
        let src = source.broadcast_add(&sinusoidal_positions(ls, self.dim, unit / ls.max(1) as f64, dtype)?)?;
        let mut all_weights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, w) = layer.forward(&x, &src, mode)?;
            x = next;
            all_weights.push(w);
        }
        Ok((self.norm_out.forward(&x, mode)?, all_weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::D;

    fn cfg(layers: usize) -> CrossModalConfig {
        CrossModalConfig {
            layers,
            heads: 2,
            model_dim: 8,
            ffn_dim: 16,
            dropout: 0.0,
        }
    }

    #[test]
    fn output_follows_target_length() {
        let pb = ParamBuilder::new(2, DType::F64);
        let unit = CrossModalUnit::new(&pb, &cfg(2)).unwrap();
        let a = Tensor::randn(0f64, 1.0, (2, 16, 8), &Device::Cpu).unwrap();
        let v = Tensor::randn(0f64, 1.0, (2, 5, 8), &Device::Cpu).unwrap();
        assert_eq!(unit.encode(&a, &v, &mut Mode::Eval).unwrap().dims(), &[2, 16, 8]);
        assert_eq!(unit.encode(&v, &a, &mut Mode::Eval).unwrap().dims(), &[2, 5, 8]);
    }

    #[test]
    fn empty_stack_is_normalized_positioned_target() {
        let pb = ParamBuilder::new(2, DType::F64);
        let unit = CrossModalUnit::new(&pb, &cfg(0)).unwrap();
        let a = Tensor::randn(0f64, 1.0, (1, 4, 8), &Device::Cpu).unwrap();
        let v = Tensor::randn(0f64, 1.0, (1, 3, 8), &Device::Cpu).unwrap();
        let out = unit.encode(&a, &v, &mut Mode::Eval).unwrap();
        let ln = LayerNorm::new(&ParamBuilder::new(0, DType::F64), 8).unwrap();
        let expect = ln
            .forward(&a.broadcast_add(&sinusoidal_positions(4, 8, 0.75, DType::F64).unwrap()).unwrap(), &Mode::Eval)
            .unwrap();
        let diff = (out - expect).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn width_mismatch_is_a_shape_error() {
        let pb = ParamBuilder::new(2, DType::F64);
        let unit = CrossModalUnit::new(&pb, &cfg(1)).unwrap();
        let a = Tensor::zeros((1, 4, 8), DType::F64, &Device::Cpu).unwrap();
        let v = Tensor::zeros((1, 3, 6), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(unit.encode(&a, &v, &mut Mode::Eval), Err(Error::Shape(_))));
    }

    #[test]
    fn attention_rows_sum_to_one_in_every_layer() {
        let pb = ParamBuilder::new(3, DType::F64);
        let unit = CrossModalUnit::new(&pb, &cfg(3)).unwrap();
        let a = Tensor::randn(0f64, 1.0, (2, 7, 8), &Device::Cpu).unwrap();
        let v = Tensor::randn(0f64, 1.0, (2, 3, 8), &Device::Cpu).unwrap();
        let (_, weights) = unit.encode_with_attention(&a, &v, &mut Mode::Eval).unwrap();
        assert_eq!(weights.len(), 3);
        for w in weights {
            let sums = w.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-6));
        }
    }

    #[test]
    fn positions_table_values() {
        let t = sinusoidal_positions(3, 4, 1.0, DType::F64).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(t[0], vec![0.0, 1.0, 0.0, 1.0]);
        assert!((t[2][0] - 2f64.sin()).abs() < 1e-12);
        assert!((t[2][3] - (2.0 / 100f64).cos()).abs() < 1e-12);
        let half = sinusoidal_positions(5, 4, 0.5, DType::F64).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(half[4], t[2]);
    }
}
