use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (train, val, test)"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One manifest line. Relative paths are resolved against the manifest's
/// directory when loaded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub frames_path: PathBuf,
    pub audio_path: PathBuf,
    pub num_frames: usize,
    pub split: Split,
}

/// JSON-lines clip manifest.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClipManifest {
    pub entries: Vec<ManifestEntry>,
}

impl ClipManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self { entries };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, root).map_err(|e| match e {
            Error::InvalidInput(msg) => Error::load(path, msg),
            other => other,
        })
    }

    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut e: ManifestEntry = serde_json::from_str(line)
                .map_err(|err| Error::InvalidInput(format!("manifest line {}: {err}", lineno + 1)))?;
            if e.frames_path.is_relative() {
                e.frames_path = root.join(&e.frames_path);
            }
            if e.audio_path.is_relative() {
                e.audio_path = root.join(&e.audio_path);
            }
            entries.push(e);
        }
        Self::new(entries)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.clip_id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate clip_id {:?}", e.clip_id)));
            }
            if e.num_frames == 0 {
                return Err(Error::InvalidInput(format!("clip {:?} declares zero frames", e.clip_id)));
            }
        }
        Ok(())
    }

    /// Writes one JSON object per line; paths are written as stored.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = r#"{"clip_id":"a","frames_path":"a/frames","audio_path":"a/audio.wav","num_frames":50,"split":"train"}"#;

    #[test]
    fn parses_and_resolves_relative_paths() {
        let m = ClipManifest::parse(&format!("{LINE}\n\n"), Path::new("/data")).unwrap();
        assert_eq!(m.entries.len(), 1);
        assert_eq!(m.entries[0].frames_path, Path::new("/data/a/frames"));
        assert_eq!(m.split(Split::Train).len(), 1);
        assert!(m.split(Split::Test).is_empty());
    }

    #[test]
    fn rejects_duplicates_and_bad_lines() {
        assert!(ClipManifest::parse(&format!("{LINE}\n{LINE}\n"), Path::new(".")).is_err());
        assert!(ClipManifest::parse("{\"clip_id\": 3}\n", Path::new(".")).is_err());
    }

    #[test]
    fn save_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let m = ClipManifest::parse(LINE, Path::new("")).unwrap();
        let p = dir.path().join("m.jsonl");
        m.save(&p).unwrap();
        let back = ClipManifest::load(&p).unwrap();
        assert_eq!(back.entries[0].clip_id, "a");
        assert_eq!(back.entries[0].audio_path, dir.path().join("a/audio.wav"));
    }
}
