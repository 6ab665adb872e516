use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::av_data::{check_window, AVWindowSpec, PreparedClip};
use crate::error::{Error, Result};
use crate::sync_model::{audio_batch, visual_batch};

/// Share of positive (in-sync) pairs.
pub const POSITIVE_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Video frames per training window.
    pub visual_len: usize,
    pub max_offset: u32,
    pub min_neg_offset: u32,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            visual_len: 5,
            max_offset: 15,
            min_neg_offset: 2,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.visual_len == 0 {
            return Err(Error::Config("sampler.visual_len must be at least 1".into()));
        }
        if self.min_neg_offset == 0 || self.min_neg_offset > self.max_offset {
            return Err(Error::Config(format!(
                "need 1 <= min_neg_offset ({}) <= max_offset ({})",
                self.min_neg_offset, self.max_offset
            )));
        }
        Ok(())
    }

    /// Number of distinct negative offsets.
    pub fn negative_offsets(&self) -> usize {
        2 * (self.max_offset - self.min_neg_offset + 1) as usize
    }

    /// Clip length needed to place a window at every offset.
    pub fn min_clip_frames(&self) -> usize {
        self.visual_len + 2 * self.max_offset as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    OutOfSync = 0,
    Sync = 1,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSample {
    pub clip_index: usize,
    pub clip_id: String,
    pub spec: AVWindowSpec,
    pub label: Label,
}

impl PairSample {
    pub fn offset(&self) -> i32 {
        self.spec.audio_offset_frames
    }
}

/// Draws a signed offset: zero for positives, otherwise uniform over
/// `±[min_neg_offset, max_offset]`.
pub fn draw_offset<R: Rng>(rng: &mut R, cfg: &SamplerConfig, label: Label) -> i32 {
    match label {
        Label::Sync => 0,
        Label::OutOfSync => {
            let n = cfg.max_offset - cfg.min_neg_offset + 1;
            let i = rng.random_range(0..2 * n);
            let mag = (cfg.min_neg_offset + i % n) as i32;
            if i < n {
                -mag
            } else {
                mag
            }
        }
    }
}

/// Start frames at which the visual window and the audio window at every
/// offset in `±max_offset` fit. The start range does not depend on the label,
/// so window position carries no information about it.
pub fn valid_starts(n_frames: usize, mel_frames: usize, cfg: &SamplerConfig) -> Option<(usize, usize)> {
    let m = cfg.max_offset as usize;
    if n_frames < cfg.visual_len + 2 * m {
        return None;
    }
    let fits = |s: usize| {
        [-(m as i32), m as i32].iter().all(|&k| {
            let spec = AVWindowSpec {
                visual_start: s,
                visual_len: cfg.visual_len,
                audio_offset_frames: k,
            };
            check_window(n_frames, mel_frames, &spec).is_ok()
        })
    };
    let lo = m;
    let mut hi = n_frames - cfg.visual_len - m;
    while hi >= lo && !fits(hi) {
        if hi == lo {
            return None;
        }
        hi -= 1;
    }
    fits(lo).then_some((lo, hi))
}

/// Window spec for one draw, with the label forced when `label` is given.
pub fn sample_spec<R: Rng>(
    n_frames: usize,
    mel_frames: usize,
    rng: &mut R,
    cfg: &SamplerConfig,
    label: Option<Label>,
) -> Option<(AVWindowSpec, Label)> {
    let (lo, hi) = valid_starts(n_frames, mel_frames, cfg)?;
    let label = label.unwrap_or_else(|| {
        if rng.random_bool(POSITIVE_FRACTION) {
            Label::Sync
        } else {
            Label::OutOfSync
        }
    });
    let offset = draw_offset(rng, cfg, label);
    let visual_start = rng.random_range(lo..=hi);
    Some((
        AVWindowSpec {
            visual_start,
            visual_len: cfg.visual_len,
            audio_offset_frames: offset,
        },
        label,
    ))
}

/// One training pair from a randomly chosen clip; `None` when that clip is too short.
pub fn sample_pair<R: Rng>(clips: &[PreparedClip], rng: &mut R, cfg: &SamplerConfig) -> Option<PairSample> {
    let clip_index = rng.random_range(0..clips.len());
    let c = &clips[clip_index];
    let (spec, label) = sample_spec(c.clip.n_frames(), c.mel.n_frames(), rng, cfg, None)?;
    Some(PairSample {
        clip_index,
        clip_id: c.clip_id().to_string(),
        spec,
        label,
    })
}

/// Draws `n` pairs, resampling past clips that are too short.
pub fn sample_batch<R: Rng>(clips: &[PreparedClip], rng: &mut R, cfg: &SamplerConfig, n: usize) -> Result<Vec<PairSample>> {
    if clips.is_empty() {
        return Err(Error::Config("no clips to sample from".into()));
    }
    if !clips
        .iter()
        .any(|c| valid_starts(c.clip.n_frames(), c.mel.n_frames(), cfg).is_some())
    {
        return Err(Error::ClipTooShort(format!(
            "every clip is shorter than the {} frames a window with +-{} offsets needs",
            cfg.min_clip_frames(),
            cfg.max_offset
        )));
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        if let Some(p) = sample_pair(clips, rng, cfg) {
            out.push(p);
        }
    }
    Ok(out)
}

/// Mel input, frame input and labels for a batch of pairs.
pub struct RealizedBatch {
    pub mel: Tensor,
    pub frames: Tensor,
    pub labels: Tensor,
}

pub fn realize_batch(clips: &[PreparedClip], pairs: &[PairSample], dtype: DType) -> Result<RealizedBatch> {
    let mut visual = Vec::with_capacity(pairs.len());
    let mut audio = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (v, a) = clips[p.clip_index].slice(&p.spec)?;
        visual.push(v);
        audio.push(a);
    }
    let labels: Vec<f32> = pairs.iter().map(|p| p.label as u8 as f32).collect();
    Ok(RealizedBatch {
        mel: audio_batch(&audio.iter().collect::<Vec<_>>(), dtype)?,
        frames: visual_batch(&visual.iter().collect::<Vec<_>>(), dtype)?,
        labels: Tensor::from_vec(labels, pairs.len(), &Device::Cpu)?.to_dtype(dtype)?,
    })
}
