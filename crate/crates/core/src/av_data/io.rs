//! On-disk formats: 16-bit mono WAV, per-frame RGB images, and the float
//! matrix cache (`u32` rows, `u32` cols, then row-major `f32`, all
//! little-endian) shared by mel caches and exported features.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{
    ManifestEntry, MouthClip, Waveform, FRAME_CHANNELS, FRAME_HEIGHT, FRAME_LEN, FRAME_WIDTH, SAMPLES_PER_FRAME,
    SAMPLE_RATE,
};
use crate::error::{Error, Result};

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| Error::load(path, e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::load(path, format!("{} channels, expected mono", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::load(path, format!("{} Hz, expected {SAMPLE_RATE} Hz", spec.sample_rate)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::load(path, "expected 16-bit integer PCM"));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::load(path, e.to_string()))?;
    Waveform::new(samples)
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    w.validate()?;
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let io_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::load(path, other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(io_err)?;
    for &s in &w.samples {
        writer
            .write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)
            .map_err(io_err)?;
    }
    writer.finalize().map_err(io_err)
}

/// Writes one `(3, 48, 96)` frame with values in `[0, 1]` as an 8-bit PNG.
pub fn write_frame(path: &Path, frame: &[f32]) -> Result<()> {
    if frame.len() != FRAME_LEN {
        return Err(Error::Shape(format!("frame has {} values, expected {FRAME_LEN}", frame.len())));
    }
    let plane = FRAME_HEIGHT * FRAME_WIDTH;
    let mut img = image::RgbImage::new(FRAME_WIDTH as u32, FRAME_HEIGHT as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let idx = y as usize * FRAME_WIDTH + x as usize;
        for c in 0..FRAME_CHANNELS {
            px.0[c] = (frame[c * plane + idx].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::load(path, other.to_string()),
    })
}

const FRAME_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn frame_file(dir: &Path, index: usize) -> Option<PathBuf> {
    FRAME_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{index:05}.{ext}")))
        .find(|p| p.is_file())
}

/// Reads frames `00000..num_frames-1`, checking every frame is 96 wide and
/// 48 high and that the directory holds no extra frames.
pub fn read_frame_dir(dir: &Path, num_frames: usize) -> Result<Vec<f32>> {
    let listing = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut on_disk = 0;
    for entry in listing {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some((stem, ext)) = name.rsplit_once('.') {
            if FRAME_EXTENSIONS.contains(&ext.to_ascii_lowercase().as_str()) && stem.chars().all(|c| c.is_ascii_digit()) {
                on_disk += 1;
            }
        }
    }
    if on_disk != num_frames {
        return Err(Error::load(dir, format!("manifest declares {num_frames} frames, found {on_disk} on disk")));
    }
    let plane = FRAME_HEIGHT * FRAME_WIDTH;
    let mut out = vec![0f32; num_frames * FRAME_LEN];
    for t in 0..num_frames {
        let path = frame_file(dir, t).ok_or_else(|| Error::load(dir, format!("frame {t:05} is missing")))?;
        let img = image::open(&path).map_err(|e| Error::load(&path, format!("malformed image: {e}")))?;
        if img.width() as usize != FRAME_WIDTH || img.height() as usize != FRAME_HEIGHT {
            return Err(Error::load(
                &path,
                format!(
                    "frame {t:05} is {}x{} (w x h), expected {FRAME_WIDTH}x{FRAME_HEIGHT}",
                    img.width(),
                    img.height()
                ),
            ));
        }
        let rgb = img.to_rgb8();
        let dst = &mut out[t * FRAME_LEN..(t + 1) * FRAME_LEN];
        for (x, y, px) in rgb.enumerate_pixels() {
            let idx = y as usize * FRAME_WIDTH + x as usize;
            for c in 0..FRAME_CHANNELS {
                dst[c * plane + idx] = px.0[c] as f32 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Loads and cross-checks the frames and audio of one manifest entry.
pub fn load_clip(entry: &ManifestEntry) -> Result<(MouthClip, Waveform)> {
    let frames = read_frame_dir(&entry.frames_path, entry.num_frames)?;
    let clip = MouthClip::new(entry.clip_id.clone(), frames, entry.num_frames)?;
    let wave = read_wav(&entry.audio_path)?;
    let expected = entry.num_frames * SAMPLES_PER_FRAME;
    if wave.samples.len().abs_diff(expected) > SAMPLES_PER_FRAME {
        return Err(Error::load(
            &entry.audio_path,
            format!(
                "duration mismatch: audio is {:.3} s but {} frames at 25 fps need {:.3} s",
                wave.duration_secs(),
                entry.num_frames,
                entry.num_frames as f64 / 25.0
            ),
        ));
    }
    Ok((clip, wave))
}

/// Shifts audio later by `frames` video frames (earlier when negative),
/// keeping the length and zero-filling the vacated samples.
pub fn delay_audio(w: &Waveform, frames: i32) -> Waveform {
    let n = w.samples.len();
    let shift = frames.unsigned_abs() as usize * SAMPLES_PER_FRAME;
    let mut out = vec![0f32; n];
    if shift < n {
        if frames >= 0 {
            out[shift..].copy_from_slice(&w.samples[..n - shift]);
        } else {
            out[..n - shift].copy_from_slice(&w.samples[shift..]);
        }
    }
    Waveform {
        samples: out,
        sample_rate: w.sample_rate,
    }
}

pub fn write_matrix(path: &Path, rows: usize, cols: usize, data: &[f32]) -> Result<()> {
    if data.len() != rows * cols {
        return Err(Error::Shape(format!("{rows}x{cols} matrix given {} values", data.len())));
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(&(rows as u32).to_le_bytes())?;
    write(&(cols as u32).to_le_bytes())?;
    for v in data {
        write(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Returns `(rows, cols, values)`.
pub fn read_matrix(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::load(path, "truncated header"));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != rows * cols * 4 {
        return Err(Error::load(
            path,
            format!("{rows}x{cols} header but {} payload bytes", body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, cols, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::av_data::Split;

    fn write_clip(dir: &Path, frames: usize, seconds: f64, bad_frame: Option<usize>) -> ManifestEntry {
        let fdir = dir.join("frames");
        fs::create_dir_all(&fdir).unwrap();
        for t in 0..frames {
            let path = fdir.join(format!("{t:05}.png"));
            if Some(t) == bad_frame {
                image::RgbImage::new(96, 96).save(&path).unwrap();
            } else {
                write_frame(&path, &vec![t as f32 / frames as f32; FRAME_LEN]).unwrap();
            }
        }
        let n = (seconds * 16000.0) as usize;
        let w = Waveform::new((0..n).map(|i| ((i as f32) * 0.01).sin() * 0.5).collect()).unwrap();
        write_wav(&dir.join("a.wav"), &w).unwrap();
        ManifestEntry {
            clip_id: "c0".into(),
            frames_path: fdir,
            audio_path: dir.join("a.wav"),
            num_frames: frames,
            split: Split::Test,
        }
    }

    #[test]
    fn loads_matching_clip() {
        let dir = tempfile::tempdir().unwrap();
        let entry = write_clip(dir.path(), 50, 2.0, None);
        let (clip, wave) = load_clip(&entry).unwrap();
        assert_eq!(clip.n_frames(), 50);
        assert_eq!(wave.samples.len(), 32000);
        assert!((clip.frame(10)[0] - 0.2).abs() < 1.0 / 255.0);
    }

    #[test]
    fn duration_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let entry = write_clip(dir.path(), 50, 1.0, None);
        let err = load_clip(&entry).unwrap_err().to_string();
        assert!(err.contains("duration mismatch"), "{err}");
    }

    #[test]
    fn wrong_frame_size_names_the_frame() {
        let dir = tempfile::tempdir().unwrap();
        let entry = write_clip(dir.path(), 6, 0.24, Some(3));
        let err = load_clip(&entry).unwrap_err().to_string();
        assert!(err.contains("frame 00003") && err.contains("96x96"), "{err}");
    }

    #[test]
    fn frame_count_must_match_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut entry = write_clip(dir.path(), 5, 0.2, None);
        entry.num_frames = 4;
        assert!(load_clip(&entry).is_err());
    }

    #[test]
    fn wav_round_trip_is_close() {
        let dir = tempfile::tempdir().unwrap();
        let w = Waveform::new(vec![0.0, 0.5, -0.5, 0.999]).unwrap();
        write_wav(&dir.path().join("x.wav"), &w).unwrap();
        let back = read_wav(&dir.path().join("x.wav")).unwrap();
        for (a, b) in w.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn matrix_format_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        write_matrix(&p, 2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.5]).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(read_matrix(&p).unwrap(), (2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]));
        fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(read_matrix(&p).is_err());
    }

    #[test]
    fn delay_shifts_by_whole_frames() {
        let w = Waveform::new((0..3200).map(|i| i as f32 / 4000.0).collect()).unwrap();
        let d = delay_audio(&w, 2);
        assert_eq!(d.samples[1280], w.samples[0]);
        assert!(d.samples[..1280].iter().all(|&v| v == 0.0));
        let a = delay_audio(&w, -1);
        assert_eq!(a.samples[0], w.samples[640]);
        assert_eq!(delay_audio(&d, -2).samples[..1920], w.samples[..1920]);
    }
}
