//! Clip data: waveforms, mouth-crop frame sequences, the mel frontend, the
//! clip manifest, and the arithmetic that pairs video frames with mel frames.
//!
//! Video runs at 25 fps and the mel frontend at 80 frames/s, so one video
//! frame spans 3.2 mel frames. Every conversion between the two clocks goes
//! through [`mel_window_for_frames`].

mod io;
mod manifest;
mod mel;

pub use io::{
    delay_audio, load_clip, read_frame_dir, read_matrix, read_wav, write_frame, write_matrix, write_wav,
};
pub use manifest::{ClipManifest, ManifestEntry, Split};
pub use mel::{compute_mel, mel_filterbank, mel_frame_count, MelConfig, MelFrontend, MelSpectrogram};

use crate::error::{Error, Modality, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const VIDEO_FPS: u32 = 25;
pub const N_MELS: usize = 80;
pub const FRAME_CHANNELS: usize = 3;
pub const FRAME_HEIGHT: usize = 48;
pub const FRAME_WIDTH: usize = 96;
pub const FRAME_LEN: usize = FRAME_CHANNELS * FRAME_HEIGHT * FRAME_WIDTH;
/// Audio samples per video frame (16000 / 25).
pub const SAMPLES_PER_FRAME: usize = 640;

/// Mono audio at 16 kHz.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Result<Self> {
        let w = Self {
            samples,
            sample_rate: SAMPLE_RATE,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(Error::InvalidInput(format!(
                "sample rate {} Hz, expected {SAMPLE_RATE} Hz (resample upstream)",
                self.sample_rate
            )));
        }
        if let Some(i) = self.samples.iter().position(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::InvalidInput(format!(
                "sample {i} is {} (must be finite and within [-1, 1])",
                self.samples[i]
            )));
        }
        Ok(())
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// RGB mouth crops at 25 fps; values in `[0, 1]`, frame-major `(t, 3, 48, 96)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MouthClip {
    pub clip_id: String,
    frames: Vec<f32>,
    n_frames: usize,
}

impl MouthClip {
    pub fn new(clip_id: impl Into<String>, frames: Vec<f32>, n_frames: usize) -> Result<Self> {
        let clip_id = clip_id.into();
        if n_frames == 0 {
            return Err(Error::InvalidInput(format!("clip {clip_id} has no frames")));
        }
        if frames.len() != n_frames * FRAME_LEN {
            return Err(Error::Shape(format!(
                "clip {clip_id}: {} values for {n_frames} frames of {FRAME_CHANNELS}x{FRAME_HEIGHT}x{FRAME_WIDTH}",
                frames.len()
            )));
        }
        if let Some(i) = frames.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput(format!(
                "clip {clip_id}: frame {} has value {} outside [0, 1]",
                i / FRAME_LEN,
                frames[i]
            )));
        }
        Ok(Self {
            clip_id,
            frames,
            n_frames,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn fps(&self) -> u32 {
        VIDEO_FPS
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * FRAME_LEN..(t + 1) * FRAME_LEN]
    }

    pub fn data(&self) -> &[f32] {
        &self.frames
    }
}

/// A visual window and the signed audio offset at which its audio is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AVWindowSpec {
    pub visual_start: usize,
    pub visual_len: usize,
    /// Positive values take audio from later in the clip.
    pub audio_offset_frames: i32,
}

/// Rounds `frames * 3.2` to the nearest mel frame. The fractional part of a
/// multiple of 3.2 is a multiple of 0.2, so ties never occur.
pub fn frames_to_mel(frames: i64) -> i64 {
    (16 * frames + 2).div_euclid(5)
}

/// Mel-frame start and length covering the audio side of a window.
pub fn mel_window_for_frames(spec: &AVWindowSpec) -> (i64, usize) {
    let start = frames_to_mel(spec.visual_start as i64 + spec.audio_offset_frames as i64);
    let len = frames_to_mel(spec.visual_len as i64) as usize;
    (start, len)
}

/// Visual window, layout `(3, frames, 48, 96)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualWindow {
    pub data: Vec<f32>,
    pub frames: usize,
}

impl VisualWindow {
    /// Logical shape `(channels, height, width, frames)`.
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (FRAME_CHANNELS, FRAME_HEIGHT, FRAME_WIDTH, self.frames)
    }
}

/// Audio window, layout `(1, 80, frames)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioWindow {
    pub data: Vec<f32>,
    pub frames: usize,
}

impl AudioWindow {
    pub fn shape(&self) -> (usize, usize, usize) {
        (1, N_MELS, self.frames)
    }
}

/// Checks that both windows of `spec` fit; returns the mel start on success.
pub fn check_window(clip_frames: usize, mel_frames: usize, spec: &AVWindowSpec) -> Result<usize> {
    if spec.visual_len == 0 {
        return Err(Error::InvalidInput("visual_len must be at least 1".into()));
    }
    if spec.visual_start + spec.visual_len > clip_frames {
        return Err(Error::Range {
            modality: Modality::Visual,
            detail: format!(
                "frames {}..{} requested, clip has {clip_frames}",
                spec.visual_start,
                spec.visual_start + spec.visual_len
            ),
        });
    }
    let (start, len) = mel_window_for_frames(spec);
    if start < 0 || start as usize + len > mel_frames {
        return Err(Error::Range {
            modality: Modality::Audio,
            detail: format!(
                "mel frames {start}..{} requested, spectrogram has {mel_frames}",
                start + len as i64
            ),
        });
    }
    Ok(start as usize)
}

pub fn visual_window(clip: &MouthClip, visual_start: usize, visual_len: usize) -> Result<VisualWindow> {
    if visual_len == 0 || visual_start + visual_len > clip.n_frames() {
        return Err(Error::Range {
            modality: Modality::Visual,
            detail: format!(
                "frames {visual_start}..{} requested, clip has {}",
                visual_start + visual_len,
                clip.n_frames()
            ),
        });
    }
    let plane = FRAME_HEIGHT * FRAME_WIDTH;
    let mut data = Vec::with_capacity(visual_len * FRAME_LEN);
    for c in 0..FRAME_CHANNELS {
        for t in visual_start..visual_start + visual_len {
            data.extend_from_slice(&clip.frame(t)[c * plane..(c + 1) * plane]);
        }
    }
    Ok(VisualWindow {
        data,
        frames: visual_len,
    })
}

pub fn audio_window(mel: &MelSpectrogram, mel_start: usize, mel_len: usize) -> Result<AudioWindow> {
    if mel_start + mel_len > mel.n_frames() {
        return Err(Error::Range {
            modality: Modality::Audio,
            detail: format!(
                "mel frames {mel_start}..{} requested, spectrogram has {}",
                mel_start + mel_len,
                mel.n_frames()
            ),
        });
    }
    Ok(AudioWindow {
        data: mel.columns(mel_start, mel_len),
        frames: mel_len,
    })
}

/// Copies the visual and audio windows described by `spec`.
pub fn slice_pair(clip: &MouthClip, mel: &MelSpectrogram, spec: &AVWindowSpec) -> Result<(VisualWindow, AudioWindow)> {
    let mel_start = check_window(clip.n_frames(), mel.n_frames(), spec)?;
    let (_, mel_len) = mel_window_for_frames(spec);
    Ok((
        visual_window(clip, spec.visual_start, spec.visual_len)?,
        audio_window(mel, mel_start, mel_len)?,
    ))
}

/// A loaded clip together with the log-mel of its audio.
#[derive(Debug, Clone)]
pub struct PreparedClip {
    pub clip: MouthClip,
    pub waveform: Waveform,
    pub mel: MelSpectrogram,
}

impl PreparedClip {
    pub fn new(clip: MouthClip, waveform: Waveform, frontend: &MelFrontend) -> Result<Self> {
        let mel = frontend.compute(&waveform)?;
        Ok(Self { clip, waveform, mel })
    }

    /// Loads an entry, reusing its mel cache when one exists next to the audio.
    pub fn load(entry: &ManifestEntry, frontend: &MelFrontend) -> Result<Self> {
        let (clip, waveform) = load_clip(entry)?;
        let cache = mel_cache_path(entry);
        if cache.is_file() {
            let (rows, cols, values) = read_matrix(&cache)?;
            if rows != N_MELS || cols != mel_frame_count(waveform.samples.len(), frontend.config().hop) {
                return Err(Error::load(&cache, format!("mel cache is {rows}x{cols}, stale or foreign")));
            }
            let mel = MelSpectrogram::from_values(values, cols)?;
            return Ok(Self { clip, waveform, mel });
        }
        Self::new(clip, waveform, frontend)
    }

    pub fn clip_id(&self) -> &str {
        &self.clip.clip_id
    }

    /// The same clip with its audio delayed by `frames` video frames.
    pub fn with_audio_delay(&self, frames: i32, frontend: &MelFrontend) -> Result<Self> {
        Self::new(self.clip.clone(), delay_audio(&self.waveform, frames), frontend)
    }

    pub fn slice(&self, spec: &AVWindowSpec) -> Result<(VisualWindow, AudioWindow)> {
        slice_pair(&self.clip, &self.mel, spec)
    }
}

/// Where `preprocess` stores the mel matrix of an entry.
pub fn mel_cache_path(entry: &ManifestEntry) -> std::path::PathBuf {
    entry.audio_path.with_extension("mel")
}

/// Loads every entry, in manifest order.
pub fn load_entries(entries: &[&ManifestEntry], frontend: &MelFrontend) -> Result<Vec<PreparedClip>> {
    entries.iter().map(|e| PreparedClip::load(e, frontend)).collect()
}
