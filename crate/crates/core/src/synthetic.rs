//! Seeded audio-visual clips with a known alignment.
//!
//! A slow random envelope drives both streams: it amplitude-modulates a set
//! of carrier tones in the audio, and sets the mean brightness of every
//! frame. Envelope components are whole cycles over the clip, so the
//! envelope is exactly band-limited.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::av_data::{
    write_frame, write_wav, ClipManifest, ManifestEntry, MouthClip, Split, Waveform, FRAME_LEN, SAMPLES_PER_FRAME,
    SAMPLE_RATE, VIDEO_FPS,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_clips: usize,
    pub clip_len_frames: usize,
    /// Highest envelope frequency; must stay below the 12.5 Hz video Nyquist rate.
    pub envelope_bandwidth_hz: f64,
    /// Lowest envelope frequency.
    pub envelope_min_hz: f64,
    pub carrier_freqs_hz: Vec<f64>,
    /// Peak amplitude of the modulated carriers.
    pub carrier_amplitude: f64,
    /// Standard deviation of white noise added to the audio.
    pub noise_level: f64,
    /// Amplitude of the zero-mean pixel texture.
    pub texture_level: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_clips: 200,
            clip_len_frames: 75,
            envelope_bandwidth_hz: 9.0,
            envelope_min_hz: 3.0,
            carrier_freqs_hz: vec![310.0, 740.0, 1330.0, 2210.0],
            carrier_amplitude: 0.5,
            noise_level: 0.003,
            texture_level: 0.08,
            seed: 7,
        }
    }
}

/// Minimum search margin a clip must leave around an evaluation window.
pub const SEARCH_RANGE: usize = 15;

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let nyquist = VIDEO_FPS as f64 / 2.0;
        if !(self.envelope_bandwidth_hz < nyquist) {
            return Err(Error::Config(format!(
                "envelope_bandwidth_hz {} must be below {nyquist} Hz",
                self.envelope_bandwidth_hz
            )));
        }
        if !(0.0 < self.envelope_min_hz && self.envelope_min_hz < self.envelope_bandwidth_hz) {
            return Err(Error::Config("need 0 < envelope_min_hz < envelope_bandwidth_hz".into()));
        }
        if self.clip_len_frames < 1 + 2 * SEARCH_RANGE {
            return Err(Error::Config(format!(
                "clip_len_frames {} leaves no room for a +-{SEARCH_RANGE} frame search",
                self.clip_len_frames
            )));
        }
        if self.carrier_freqs_hz.is_empty() || self.carrier_freqs_hz.iter().any(|&f| !(f > 0.0 && f < SAMPLE_RATE as f64 / 2.0)) {
            return Err(Error::Config("carrier_freqs_hz must be non-empty and below 8 kHz".into()));
        }
        if self.carrier_amplitude + 4.0 * self.noise_level > 1.0 || self.carrier_amplitude <= 0.0 {
            return Err(Error::Config("carrier_amplitude plus noise must stay inside [-1, 1]".into()));
        }
        if !(0.0..=0.15).contains(&self.texture_level) {
            return Err(Error::Config("texture_level must lie in [0, 0.15] so pixels stay in [0, 1]".into()));
        }
        let cycles = self.cycle_range();
        if cycles.0 > cycles.1 || cycles.1 - cycles.0 + 1 < 6 {
            return Err(Error::Config("envelope band too narrow for six distinct components at this clip length".into()));
        }
        Ok(())
    }

    pub fn duration_secs(&self) -> f64 {
        self.clip_len_frames as f64 / VIDEO_FPS as f64
    }

    /// Whole-cycle counts available to envelope components.
    fn cycle_range(&self) -> (usize, usize) {
        let d = self.duration_secs();
        ((self.envelope_min_hz * d).ceil() as usize, (self.envelope_bandwidth_hz * d).floor() as usize)
    }

    pub fn clip_id(index: usize) -> String {
        format!("clip_{index:04}")
    }

    /// Independent stream for clip `index`.
    pub fn clip_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64 + 1);
        rng
    }

    /// 80/10/10 split by clip index.
    pub fn split_of(&self, index: usize) -> Split {
        let train = self.n_clips * 8 / 10;
        let val = self.n_clips / 10;
        if index < train {
            Split::Train
        } else if index < train + val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Sum of whole-cycle sinusoids, affinely mapped onto `[0.1, 1]` over the clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    /// `(frequency Hz, amplitude, phase)` per component.
    pub components: Vec<(f64, f64, f64)>,
    offset: f64,
    gain: f64,
}

pub const ENVELOPE_MIN: f64 = 0.1;
pub const ENVELOPE_MAX: f64 = 1.0;

impl Envelope {
    fn raw(components: &[(f64, f64, f64)], t: f64) -> f64 {
        components.iter().map(|&(f, a, p)| a * (2.0 * PI * f * t + p).sin()).sum()
    }

    pub fn random<R: Rng>(cfg: &SyntheticConfig, rng: &mut R) -> Self {
        let (lo, hi) = cfg.cycle_range();
        let n = rng.random_range(3..=6);
        let mut cycles: Vec<usize> = Vec::with_capacity(n);
        while cycles.len() < n {
            let c = rng.random_range(lo..=hi);
            if !cycles.contains(&c) {
                cycles.push(c);
            }
        }
        let d = cfg.duration_secs();
        let components: Vec<(f64, f64, f64)> = cycles
            .iter()
            .map(|&c| (c as f64 / d, rng.random_range(0.5..1.0), rng.random_range(0.0..2.0 * PI)))
            .collect();
        let n_samples = cfg.clip_len_frames * SAMPLES_PER_FRAME;
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..n_samples {
            let v = Self::raw(&components, i as f64 / SAMPLE_RATE as f64);
            min = min.min(v);
            max = max.max(v);
        }
        let gain = (ENVELOPE_MAX - ENVELOPE_MIN) / (max - min);
        Self {
            components,
            offset: ENVELOPE_MIN - gain * min,
            gain,
        }
    }

    pub fn at(&self, t: f64) -> f64 {
        self.offset + self.gain * Self::raw(&self.components, t)
    }
}

/// Frame mean intensity for envelope value `e`.
pub fn frame_mean(e: f64) -> f64 {
    0.2 + 0.6 * e
}

pub struct SyntheticClip {
    pub clip: MouthClip,
    pub waveform: Waveform,
    pub envelope: Envelope,
}

fn zero_mean(mut v: Vec<f64>) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    v
}

pub fn generate_clip<R: Rng>(cfg: &SyntheticConfig, rng: &mut R, clip_id: &str) -> Result<SyntheticClip> {
    cfg.validate()?;
    let envelope = Envelope::random(cfg, rng);
    let n_samples = cfg.clip_len_frames * SAMPLES_PER_FRAME;
    let carriers: Vec<(f64, f64)> = cfg
        .carrier_freqs_hz
        .iter()
        .map(|&f| (f, rng.random_range(0.0..2.0 * PI)))
        .collect();
    let per_carrier = cfg.carrier_amplitude / carriers.len() as f64;
    let samples: Vec<f32> = (0..n_samples)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            let tone: f64 = carriers.iter().map(|&(f, p)| (2.0 * PI * f * t + p).sin()).sum();
            let noise: f64 = rng.sample(StandardNormal);
            let v = envelope.at(t) * per_carrier * tone + cfg.noise_level * noise;
            v.clamp(-1.0, 1.0) as f32
        })
        .collect();

    let uniform = |rng: &mut R, n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    // a fixed pattern per clip plus fresh grain per frame, both exactly zero-mean
    let pattern = zero_mean(uniform(rng, FRAME_LEN));
    let mut frames = Vec::with_capacity(cfg.clip_len_frames * FRAME_LEN);
    for f in 0..cfg.clip_len_frames {
        // a frame stands for the middle of its 40 ms interval
        let m = frame_mean(envelope.at((f as f64 + 0.5) / VIDEO_FPS as f64));
        let grain = zero_mean(uniform(rng, FRAME_LEN));
        frames.extend(
            pattern
                .iter()
                .zip(&grain)
                .map(|(p, g)| (m + cfg.texture_level * (0.75 * p + 0.25 * g)) as f32),
        );
    }
    Ok(SyntheticClip {
        clip: MouthClip::new(clip_id, frames, cfg.clip_len_frames)?,
        waveform: Waveform::new(samples)?,
        envelope,
    })
}

/// Writes `n_clips` clips under `out_dir` in the on-disk clip format, plus
/// `manifest.jsonl` with paths relative to `out_dir`.
pub fn generate_dataset(cfg: &SyntheticConfig, out_dir: &Path) -> Result<ClipManifest> {
    cfg.validate()?;
    let mut entries = Vec::with_capacity(cfg.n_clips);
    for i in 0..cfg.n_clips {
        let id = SyntheticConfig::clip_id(i);
        let mut rng = cfg.clip_rng(i);
        let clip = generate_clip(cfg, &mut rng, &id)?;
        let rel_frames = Path::new("clips").join(&id).join("frames");
        let rel_audio = Path::new("clips").join(&id).join("audio.wav");
        let frames_dir = out_dir.join(&rel_frames);
        fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
        for t in 0..clip.clip.n_frames() {
            write_frame(&frames_dir.join(format!("{t:05}.png")), clip.clip.frame(t))?;
        }
        write_wav(&out_dir.join(&rel_audio), &clip.waveform)?;
        entries.push(ManifestEntry {
            clip_id: id,
            frames_path: rel_frames,
            audio_path: rel_audio,
            num_frames: cfg.clip_len_frames,
            split: cfg.split_of(i),
        });
    }
    let manifest = ClipManifest::new(entries)?;
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    ClipManifest::load(&out_dir.join("manifest.jsonl"))
}
