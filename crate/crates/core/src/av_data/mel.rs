//! Log-mel frontend: 80 bands, 800-sample Hann window, 200-sample hop at 16 kHz.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{Waveform, N_MELS, SAMPLE_RATE};
use crate::error::{Error, Result};

/// STFT, filterbank and amplitude-scaling constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub win: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// First-order pre-emphasis coefficient; 0 disables it.
    pub preemphasis: f64,
    pub min_level_db: f64,
    pub ref_level_db: f64,
    pub max_abs_value: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_fft: 800,
            hop: 200,
            win: 800,
            fmin: 55.0,
            fmax: 7600.0,
            preemphasis: 0.97,
            min_level_db: -100.0,
            ref_level_db: 20.0,
            max_abs_value: 4.0,
        }
    }
}

/// Normalized log-mel matrix, row-major `(80, n_frames)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    values: Vec<f32>,
    n_frames: usize,
}

impl MelSpectrogram {
    pub fn from_values(values: Vec<f32>, n_frames: usize) -> Result<Self> {
        if n_frames == 0 || values.len() != N_MELS * n_frames {
            return Err(Error::Shape(format!(
                "mel matrix needs {N_MELS} x {n_frames} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("mel matrix contains non-finite values".into()));
        }
        Ok(Self { values, n_frames })
    }

    pub fn n_mels(&self) -> usize {
        N_MELS
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, band: usize, frame: usize) -> f32 {
        self.values[band * self.n_frames + frame]
    }

    /// Band-major copy of frames `[start, start + len)`.
    pub fn columns(&self, start: usize, len: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(N_MELS * len);
        for band in 0..N_MELS {
            let row = &self.values[band * self.n_frames..(band + 1) * self.n_frames];
            out.extend_from_slice(&row[start..start + len]);
        }
        out
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    // Slaney scale: linear below 1 kHz, logarithmic above.
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if hz >= min_log_hz {
        min_log_mel + (hz / min_log_hz).ln() / logstep
    } else {
        hz / f_sp
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if mel >= min_log_mel {
        min_log_hz * (logstep * (mel - min_log_mel)).exp()
    } else {
        f_sp * mel
    }
}

/// Area-normalized triangular filters, `(n_mels, n_fft / 2 + 1)`.
pub fn mel_filterbank(cfg: &MelConfig) -> Vec<Vec<f64>> {
    let n_bins = cfg.n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let edges: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
        .collect();
    let bin_hz: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * SAMPLE_RATE as f64 / cfg.n_fft as f64)
        .collect();
    (0..N_MELS)
        .map(|m| {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (right - left);
            bin_hz
                .iter()
                .map(|&f| {
                    let up = (f - left) / (center - left);
                    let down = (right - f) / (right - center);
                    up.min(down).max(0.0) * norm
                })
                .collect()
        })
        .collect()
}

/// Number of mel frames produced for `n_samples` inputs.
pub fn mel_frame_count(n_samples: usize, hop: usize) -> usize {
    n_samples.div_ceil(hop)
}

/// Reusable STFT plan plus filterbank.
pub struct MelFrontend {
    cfg: MelConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
}

impl MelFrontend {
    pub fn new(cfg: MelConfig) -> Result<Self> {
        if cfg.hop == 0 || cfg.win == 0 || cfg.win > cfg.n_fft {
            return Err(Error::Config(format!(
                "mel: need 0 < win <= n_fft and hop > 0 (win {}, n_fft {}, hop {})",
                cfg.win, cfg.n_fft, cfg.hop
            )));
        }
        if !(0.0 <= cfg.fmin && cfg.fmin < cfg.fmax && cfg.fmax <= SAMPLE_RATE as f64 / 2.0) {
            return Err(Error::Config(format!("mel: invalid band edges {}..{} Hz", cfg.fmin, cfg.fmax)));
        }
        if cfg.min_level_db >= 0.0 || cfg.max_abs_value <= 0.0 {
            return Err(Error::Config("mel: min_level_db must be negative and max_abs_value positive".into()));
        }
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        // periodic Hann, centred inside the FFT frame
        let offset = (cfg.n_fft - cfg.win) / 2;
        let mut window = vec![0.0; cfg.n_fft];
        for i in 0..cfg.win {
            window[offset + i] = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / cfg.win as f64).cos();
        }
        let filters = mel_filterbank(&cfg);
        Ok(Self {
            cfg,
            fft,
            window,
            filters,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    pub fn compute(&self, w: &Waveform) -> Result<MelSpectrogram> {
        let (power, n_frames) = self.mel_power(w)?;
        let values = power.iter().map(|&e| self.scale(e) as f32).collect();
        MelSpectrogram::from_values(values, n_frames)
    }

    /// Mel-band power before log scaling, row-major `(80, n_frames)`.
    pub fn mel_power(&self, w: &Waveform) -> Result<(Vec<f64>, usize)> {
        w.validate()?;
        if w.samples.is_empty() {
            return Err(Error::InvalidInput("cannot compute a mel spectrogram of an empty waveform".into()));
        }
        let cfg = &self.cfg;
        let mut x: Vec<f64> = w.samples.iter().map(|&v| v as f64).collect();
        if cfg.preemphasis != 0.0 {
            for i in (1..x.len()).rev() {
                x[i] -= cfg.preemphasis * x[i - 1];
            }
        }
        let n_frames = mel_frame_count(x.len(), cfg.hop);
        let n_bins = cfg.n_fft / 2 + 1;
        let half = (cfg.n_fft / 2) as isize;
        let mut values = vec![0f64; N_MELS * n_frames];
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut power = vec![0.0; n_bins];
        for frame in 0..n_frames {
            // frame `t` is centred on sample `t * hop`; zero padding outside the signal
            let first = (frame * cfg.hop) as isize - half;
            for (i, slot) in buf.iter_mut().enumerate() {
                let idx = first + i as isize;
                let s = if idx >= 0 && (idx as usize) < x.len() {
                    x[idx as usize]
                } else {
                    0.0
                };
                *slot = Complex::new(s * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf[..n_bins]) {
                *p = c.norm_sqr();
            }
            for (band, filt) in self.filters.iter().enumerate() {
                let energy: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
                values[band * n_frames + frame] = energy;
            }
        }
        Ok((values, n_frames))
    }

    /// Power to decibels, floored and referenced, then mapped to
    /// `[-max_abs_value, max_abs_value]`.
    fn scale(&self, energy: f64) -> f64 {
        let cfg = &self.cfg;
        let floor = 10f64.powf(cfg.min_level_db / 10.0);
        let db = 10.0 * energy.max(floor).log10() - cfg.ref_level_db;
        let m = cfg.max_abs_value;
        (2.0 * m * (db - cfg.min_level_db) / -cfg.min_level_db - m).clamp(-m, m)
    }
}

/// One-shot convenience wrapper around [`MelFrontend`] with default settings.
pub fn compute_mel(w: &Waveform) -> Result<MelSpectrogram> {
    MelFrontend::new(MelConfig::default())?.compute(w)
}
