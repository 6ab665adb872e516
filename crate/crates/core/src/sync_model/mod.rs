//! The synchronisation model: both encoders, the A→V and V→A cross-modal
//! units, the hybrid fusion unit and the scoring head.

mod attention;
mod transformer;

pub use attention::{scaled_dot_product, softmax_last, MultiHeadAttention};
pub use transformer::{sinusoidal_positions, CrossModalConfig, CrossModalLayer, CrossModalUnit};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::av_data::{AudioWindow, VisualWindow, FRAME_HEIGHT, FRAME_WIDTH, N_MELS};
use crate::encoders::{AudioEncoder, EncoderConfig, VisualEncoder};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mode, ParamBuilder, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub cross_modal: CrossModalConfig,
}

impl ModelConfig {
    /// Narrow, shallow preset used for tests and the synthetic experiments.
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig {
                width_multiplier: 1.0 / 16.0,
                residual_blocks_per_stage: 0,
                visual_residual_blocks: vec![0; 5],
                ..Default::default()
            },
            cross_modal: CrossModalConfig {
                layers: 2,
                heads: 4,
                model_dim: 32,
                ffn_dim: 64,
                dropout: 0.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.cross_modal.validate()?;
        let d = self.encoder.output_dim();
        if d != self.cross_modal.model_dim {
            return Err(Error::Config(format!(
                "encoders emit {d}-wide features but the cross-modal units expect {}",
                self.cross_modal.model_dim
            )));
        }
        Ok(())
    }
}

/// Parameter groups, named by the first component of every parameter path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPart {
    AudioEncoder,
    VisualEncoder,
    SyncBlock,
    Classifier,
}

impl ModelPart {
    pub const ALL: [ModelPart; 4] = [Self::AudioEncoder, Self::VisualEncoder, Self::SyncBlock, Self::Classifier];

    pub fn prefix(self) -> &'static str {
        match self {
            Self::AudioEncoder => "audio_encoder",
            Self::VisualEncoder => "visual_encoder",
            Self::SyncBlock => "sync_block",
            Self::Classifier => "classifier",
        }
    }

    /// Group owning a parameter or buffer name.
    pub fn of(name: &str) -> Option<Self> {
        let head = name.split('.').next()?;
        Self::ALL.into_iter().find(|p| p.prefix() == head)
    }
}

impl std::fmt::Display for ModelPart {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::AudioEncoder => "audio encoder",
            Self::VisualEncoder => "visual encoder",
            Self::SyncBlock => "sync block",
            Self::Classifier => "classifier",
        })
    }
}

/// The three cross-modal units.
#[derive(Clone)]
pub struct SyncBlock {
    pub audio_to_visual: CrossModalUnit,
    pub visual_to_audio: CrossModalUnit,
    pub hybrid: CrossModalUnit,
}

impl SyncBlock {
    pub fn new(pb: &ParamBuilder, cfg: &CrossModalConfig) -> Result<Self> {
        Ok(Self {
            audio_to_visual: CrossModalUnit::new(&pb.pp("av_unit"), cfg)?,
            visual_to_audio: CrossModalUnit::new(&pb.pp("va_unit"), cfg)?,
            hybrid: CrossModalUnit::new(&pb.pp("hybrid_unit"), cfg)?,
        })
    }

    /// Audio `(b, t_a, d)` and visual `(b, t_v, d)` features to the hybrid output `(b, t_a, d)`.
    pub fn fuse(&self, audio: &Tensor, visual: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let av = self.audio_to_visual.encode(audio, visual, mode)?;
        let va = self.visual_to_audio.encode(visual, audio, mode)?;
        self.hybrid.encode(&av, &va, mode)
    }
}

/// Temporal max-pool, tanh, then the affine classifier: `(b, t, d)` to `(b,)` logits.
pub fn pool_and_classify(hybrid: &Tensor, classifier: &Linear, mode: &Mode) -> Result<Tensor> {
    let pooled = hybrid.max(1)?.tanh()?;
    Ok(classifier.forward(&pooled, mode)?.squeeze(1)?)
}

#[derive(Clone)]
pub struct LipSyncModel {
    config: ModelConfig,
    audio_encoder: AudioEncoder,
    visual_encoder: VisualEncoder,
    sync_block: SyncBlock,
    classifier: Linear,
    store: ParamStore,
}

impl LipSyncModel {
    pub fn new(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let pb = ParamBuilder::new(seed, dtype);
        let audio_encoder = AudioEncoder::new(&pb.pp(ModelPart::AudioEncoder.prefix()), &config.encoder)?;
        let visual_encoder = VisualEncoder::new(&pb.pp(ModelPart::VisualEncoder.prefix()), &config.encoder)?;
        let sync_block = SyncBlock::new(&pb.pp(ModelPart::SyncBlock.prefix()), &config.cross_modal)?;
        let classifier = Linear::new(&pb.pp(ModelPart::Classifier.prefix()), config.cross_modal.model_dim, 1)?;
        Ok(Self {
            config,
            audio_encoder,
            visual_encoder,
            sync_block,
            classifier,
            store: pb.finish(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.visual_encoder.dtype()
    }

    pub fn audio_encoder(&self) -> &AudioEncoder {
        &self.audio_encoder
    }

    pub fn visual_encoder(&self) -> &VisualEncoder {
        &self.visual_encoder
    }

    pub fn sync_block(&self) -> &SyncBlock {
        &self.sync_block
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    pub fn count_parameters(&self, part: Option<ModelPart>) -> usize {
        self.store.count(part.map_or("", ModelPart::prefix))
    }

    /// `(b, 1, 1, 80, t_a)` to `(b, t_a, d)`.
    pub fn encode_audio(&self, mel: &Tensor, mode: &Mode) -> Result<Tensor> {
        self.audio_encoder.forward(mel, mode)
    }

    /// `(b, 3, t_v, 48, 96)` to `(b, t_v, d)`.
    pub fn encode_visual(&self, frames: &Tensor, mode: &Mode) -> Result<Tensor> {
        self.visual_encoder.forward(frames, mode)
    }

    /// Logits `(b,)` from already-encoded features.
    pub fn score_features(&self, audio: &Tensor, visual: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let (ba, _, da) = audio.dims3()?;
        let (bv, _, dv) = visual.dims3()?;
        if ba != bv || da != dv {
            return Err(Error::Shape(format!(
                "audio features {:?} and visual features {:?} do not pair up",
                audio.dims(),
                visual.dims()
            )));
        }
        let hybrid = self.sync_block.fuse(audio, visual, mode)?;
        pool_and_classify(&hybrid, &self.classifier, mode)
    }

    /// Logits `(b,)` for mel windows `(b, 1, 1, 80, t_a)` and frame windows `(b, 3, t_v, 48, 96)`.
    pub fn forward(&self, mel: &Tensor, frames: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let audio = self.encode_audio(mel, mode)?;
        let visual = self.encode_visual(frames, mode)?;
        self.score_features(&audio, &visual, mode)
    }

    /// Scores one realized pair in inference mode.
    pub fn score_pair(&self, visual: &VisualWindow, audio: &AudioWindow) -> Result<f32> {
        let logits = self.forward(&audio_batch(&[audio], self.dtype())?, &visual_batch(&[visual], self.dtype())?, &mut Mode::Eval)?;
        Ok(logits.to_dtype(DType::F32)?.to_vec1::<f32>()?[0])
    }
}

/// Stacks equal-length visual windows into `(b, 3, t_v, 48, 96)`.
pub fn visual_batch(windows: &[&VisualWindow], dtype: DType) -> Result<Tensor> {
    let frames = uniform_len(windows.iter().map(|w| w.frames), "visual")?;
    let mut data = Vec::with_capacity(windows.len() * 3 * frames * FRAME_HEIGHT * FRAME_WIDTH);
    for w in windows {
        data.extend_from_slice(&w.data);
    }
    Ok(Tensor::from_vec(data, (windows.len(), 3, frames, FRAME_HEIGHT, FRAME_WIDTH), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Stacks equal-length mel windows into `(b, 1, 1, 80, t_a)`.
pub fn audio_batch(windows: &[&AudioWindow], dtype: DType) -> Result<Tensor> {
    let frames = uniform_len(windows.iter().map(|w| w.frames), "audio")?;
    let mut data = Vec::with_capacity(windows.len() * N_MELS * frames);
    for w in windows {
        data.extend_from_slice(&w.data);
    }
    Ok(Tensor::from_vec(data, (windows.len(), 1, 1, N_MELS, frames), &Device::Cpu)?.to_dtype(dtype)?)
}

fn uniform_len(mut lens: impl Iterator<Item = usize>, what: &str) -> Result<usize> {
    let first = lens
        .next()
        .ok_or_else(|| Error::InvalidInput(format!("empty {what} batch")))?;
    if lens.any(|l| l != first) {
        return Err(Error::Shape(format!("{what} windows in a batch must share one length")));
    }
    Ok(first)
}
