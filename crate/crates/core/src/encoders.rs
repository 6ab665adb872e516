//! Audio and visual feature encoders.
//!
//! Both encoders keep the time axis at stride 1 with same-padding, so an
//! input of `t` frames yields `t` feature columns. Downsampling happens only
//! along frequency (audio) or the spatial axes (visual), and a final valid
//! convolution collapses whatever extent remains to one.

use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::av_data::{self, MouthClip, FRAME_HEIGHT, FRAME_WIDTH, N_MELS};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv3d, ConvGeometry, Mode, ParamBuilder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Output channels of each audio stage; every stage after the first halves the frequency axis.
    pub audio_stage_channels: Vec<usize>,
    /// Residual blocks after the entry convolution of every audio stage.
    pub residual_blocks_per_stage: usize,
    /// Output channels of each visual stage; every stage after the first halves height and width.
    pub visual_stage_channels: Vec<usize>,
    /// Residual blocks per visual stage.
    pub visual_residual_blocks: Vec<usize>,
    /// Scales every channel count; values below 1 give small test models.
    pub width_multiplier: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            audio_stage_channels: vec![32, 64, 128, 256, 512, 512],
            residual_blocks_per_stage: 2,
            visual_stage_channels: vec![64, 128, 256, 512, 512],
            visual_residual_blocks: vec![1, 2, 2, 1, 1],
            width_multiplier: 1.0,
        }
    }
}

impl EncoderConfig {
    pub fn scaled(&self, channels: usize) -> usize {
        ((channels as f64 * self.width_multiplier).round() as usize).max(1)
    }

    pub fn audio_channels(&self) -> Vec<usize> {
        self.audio_stage_channels.iter().map(|&c| self.scaled(c)).collect()
    }

    pub fn visual_channels(&self) -> Vec<usize> {
        self.visual_stage_channels.iter().map(|&c| self.scaled(c)).collect()
    }

    /// Feature width shared by both encoders.
    pub fn output_dim(&self) -> usize {
        self.audio_channels().last().copied().unwrap_or(0)
    }

    /// Frequency extent left for the collapsing convolution.
    pub fn audio_residual_freq(&self) -> usize {
        (1..self.audio_stage_channels.len()).fold(N_MELS, |f, _| f.div_ceil(2))
    }

    /// Spatial extent `(height, width)` left for the collapsing convolution.
    pub fn visual_residual_extent(&self) -> (usize, usize) {
        (1..self.visual_stage_channels.len()).fold((FRAME_HEIGHT, FRAME_WIDTH), |(h, w), _| (h.div_ceil(2), w.div_ceil(2)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.audio_stage_channels.is_empty() || self.visual_stage_channels.is_empty() {
            return Err(Error::Config("encoders need at least one stage".into()));
        }
        if self.visual_residual_blocks.len() != self.visual_stage_channels.len() {
            return Err(Error::Config(format!(
                "visual_residual_blocks has {} entries for {} stages",
                self.visual_residual_blocks.len(),
                self.visual_stage_channels.len()
            )));
        }
        if !(self.width_multiplier > 0.0) {
            return Err(Error::Config("width_multiplier must be positive".into()));
        }
        let (a, v) = (self.output_dim(), *self.visual_channels().last().unwrap());
        if a != v {
            return Err(Error::Config(format!("audio features are {a} wide but visual features are {v}")));
        }
        Ok(())
    }
}

/// Convolution, batch norm, optional identity skip, ReLU.
#[derive(Clone)]
struct ConvBlock {
    conv: Conv3d,
    bn: BatchNorm,
    residual: bool,
}

impl ConvBlock {
    fn new(pb: &ParamBuilder, cin: usize, cout: usize, geometry: ConvGeometry, residual: bool) -> Result<Self> {
        Ok(Self {
            conv: Conv3d::new(&pb.pp("conv"), cin, cout, geometry, false)?,
            bn: BatchNorm::new(&pb.pp("bn"), cout)?,
            residual,
        })
    }

    fn forward(&self, x: &Tensor, mode: &Mode) -> Result<Tensor> {
        let y = self.bn.forward(&self.conv.forward(x, mode)?, mode)?;
        let y = if self.residual { (y + x)? } else { y };
        Ok(y.relu()?)
    }

    fn temporal_extent(&self, time_axis: usize) -> usize {
        self.conv.geometry().kernel[time_axis]
    }
}

fn stage_blocks(
    pb: &ParamBuilder,
    channels: &[usize],
    residual: &[usize],
    entry: ConvGeometry,
    downsample: ConvGeometry,
    cin: usize,
) -> Result<Vec<ConvBlock>> {
    let same = ConvGeometry {
        stride: [1, 1, 1],
        ..entry
    };
    let mut blocks = Vec::new();
    let mut cin = cin;
    for (i, (&c, &r)) in channels.iter().zip(residual).enumerate() {
        let spb = pb.pp(format!("stage{i}"));
        let g = if i == 0 { entry } else { downsample };
        blocks.push(ConvBlock::new(&spb.pp("entry"), cin, c, g, false)?);
        for j in 0..r {
            blocks.push(ConvBlock::new(&spb.pp(format!("res{j}")), c, c, same, true)?);
        }
        cin = c;
    }
    Ok(blocks)
}

/// 2D residual stack over `(batch, 1, 1, 80, t_a)` log-mel input.
#[derive(Clone)]
pub struct AudioEncoder {
    blocks: Vec<ConvBlock>,
    collapse: Conv3d,
    out_dim: usize,
}

impl AudioEncoder {
    pub fn new(pb: &ParamBuilder, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let channels = cfg.audio_channels();
        let residual = vec![cfg.residual_blocks_per_stage; channels.len()];
        // axes: (unused depth, frequency, time); time keeps stride 1 and same padding
        let entry = ConvGeometry::new([1, 3, 3], [1, 1, 1], [0, 1, 1]);
        let down = ConvGeometry::new([1, 3, 3], [1, 2, 1], [0, 1, 1]);
        let blocks = stage_blocks(pb, &channels, &residual, entry, down, 1)?;
        let out_dim = *channels.last().unwrap();
        let collapse = Conv3d::new(
            &pb.pp("collapse"),
            out_dim,
            out_dim,
            ConvGeometry::new([1, cfg.audio_residual_freq(), 1], [1, 1, 1], [0, 0, 0]),
            true,
        )?;
        Ok(Self {
            blocks,
            collapse,
            out_dim,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Number of time steps on either side of an output column that can influence it.
    pub fn temporal_radius(&self) -> usize {
        self.blocks.iter().map(|b| b.temporal_extent(2) / 2).sum()
    }

    /// `(batch, 1, 1, 80, t_a)` to `(batch, t_a, out_dim)`.
    pub fn forward(&self, mel: &Tensor, mode: &Mode) -> Result<Tensor> {
        let dims = mel.dims();
        if dims.len() != 5 || dims[1] != 1 || dims[2] != 1 || dims[3] != N_MELS || dims[4] == 0 {
            return Err(Error::Shape(format!(
                "audio encoder expects (batch, 1, 1, {N_MELS}, t_a) with t_a >= 1, got {dims:?}"
            )));
        }
        let (b, t) = (dims[0], dims[4]);
        let mut x = mel.clone();
        for block in &self.blocks {
            x = block.forward(&x, mode)?;
        }
        let x = self.collapse.forward(&x, mode)?;
        Ok(x.reshape((b, self.out_dim, t))?.transpose(1, 2)?.contiguous()?)
    }
}

/// 3D residual stack over `(batch, 3, t_v, 48, 96)` mouth crops.
#[derive(Clone)]
pub struct VisualEncoder {
    blocks: Vec<ConvBlock>,
    collapse: Conv3d,
    out_dim: usize,
}

impl VisualEncoder {
    pub fn new(pb: &ParamBuilder, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let channels = cfg.visual_channels();
        let entry = ConvGeometry::new([3, 3, 3], [1, 1, 1], [1, 1, 1]);
        let down = ConvGeometry::new([3, 3, 3], [1, 2, 2], [1, 1, 1]);
        let blocks = stage_blocks(pb, &channels, &cfg.visual_residual_blocks, entry, down, 3)?;
        let out_dim = *channels.last().unwrap();
        let (h, w) = cfg.visual_residual_extent();
        let collapse = Conv3d::new(
            &pb.pp("collapse"),
            out_dim,
            out_dim,
            ConvGeometry::new([1, h, w], [1, 1, 1], [0, 0, 0]),
            true,
        )?;
        Ok(Self {
            blocks,
            collapse,
            out_dim,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn temporal_radius(&self) -> usize {
        self.blocks.iter().map(|b| b.temporal_extent(0) / 2).sum()
    }

    pub fn dtype(&self) -> candle_core::DType {
        self.collapse.dtype()
    }

    /// `(batch, 3, t_v, 48, 96)` to `(batch, t_v, out_dim)`.
    pub fn forward(&self, frames: &Tensor, mode: &Mode) -> Result<Tensor> {
        let dims = frames.dims();
        if dims.len() != 5 || dims[1] != 3 || dims[3] != FRAME_HEIGHT || dims[4] != FRAME_WIDTH || dims[2] == 0 {
            return Err(Error::Shape(format!(
                "visual encoder expects (batch, 3, t_v, {FRAME_HEIGHT}, {FRAME_WIDTH}) with t_v >= 1, got {dims:?}"
            )));
        }
        let (b, t) = (dims[0], dims[2]);
        let mut x = frames.clone();
        for block in &self.blocks {
            x = block.forward(&x, mode)?;
        }
        let x = self.collapse.forward(&x, mode)?;
        Ok(x.reshape((b, self.out_dim, t))?.transpose(1, 2)?.contiguous()?)
    }
}

/// Channel-major `(channels, frames)` feature matrix of a single input.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub frames: usize,
    pub values: Vec<f32>,
}

impl FeatureMap {
    /// From an encoder output of shape `(1, frames, channels)`.
    pub fn from_encoder_output(t: &Tensor) -> Result<Self> {
        let (b, frames, channels) = t.dims3()?;
        if b != 1 {
            return Err(Error::Shape(format!("feature map needs batch 1, got {b}")));
        }
        let values = t
            .squeeze(0)?
            .t()?
            .to_dtype(candle_core::DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("encoder produced non-finite features".into()));
        }
        Ok(Self {
            channels,
            frames,
            values,
        })
    }

    pub fn column(&self, t: usize) -> Vec<f32> {
        (0..self.channels).map(|c| self.values[c * self.frames + t]).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        av_data::write_matrix(path, self.channels, self.frames, &self.values)
    }
}

/// Runs a trained visual encoder over a whole clip in inference mode and
/// writes the `(channels, t_v)` features. Parameters are never modified.
pub fn export_visual_features(encoder: &VisualEncoder, clip: &MouthClip, out: &Path) -> Result<FeatureMap> {
    let window = av_data::visual_window(clip, 0, clip.n_frames())?;
    let x = crate::sync_model::visual_batch(&[&window], encoder.dtype())?;
    let features = FeatureMap::from_encoder_output(&encoder.forward(&x, &Mode::Eval)?)?;
    features.write(out)?;
    Ok(features)
}
