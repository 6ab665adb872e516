//! Checkpoint files.
//!
//! Layout: the 8-byte magic `LSYNCKPT`, a little-endian `u64` header length,
//! a JSON header, then every tensor as little-endian `f32` values in header
//! order. Tensor offsets in the header count `f32` elements from the start
//! of the data section.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::Moments;
use crate::error::{Error, Result};
use crate::sync_model::{LipSyncModel, ModelConfig, ModelPart};

pub const MAGIC: &[u8; 8] = b"LSYNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorEntry {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos = self
            .word_pos
            .parse::<u128>()
            .map_err(|e| Error::Checkpoint(format!("bad rng position {:?}: {e}", self.word_pos)))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub step: u64,
    pub model: ModelConfig,
    /// Training configuration snapshot, opaque to the loader.
    #[serde(default)]
    pub run_config: Option<serde_json::Value>,
    #[serde(default)]
    pub rng: BTreeMap<String, RngState>,
    #[serde(default)]
    pub optimizer_steps: u64,
    pub tensors: Vec<TensorEntry>,
}

/// A checkpoint held in memory.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    data: Vec<f32>,
}

/// What to store besides the model parameters.
#[derive(Default)]
pub struct SaveOptions<'a> {
    /// Parameter groups to store; all when empty.
    pub parts: Vec<ModelPart>,
    pub run_config: Option<serde_json::Value>,
    pub rng: BTreeMap<String, RngState>,
    pub optimizer: Option<(u64, &'a BTreeMap<String, Moments>)>,
}

fn tensor_values(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}

impl Checkpoint {
    pub fn from_model(model: &LipSyncModel, step: u64, opts: SaveOptions) -> Result<Self> {
        let wanted = |name: &str| {
            opts.parts.is_empty() || ModelPart::of(name).is_some_and(|p| opts.parts.contains(&p))
        };
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        let mut push = |name: &str, kind: TensorKind, t: &Tensor| -> Result<()> {
            tensors.push(TensorEntry {
                name: name.to_string(),
                kind,
                shape: t.dims().to_vec(),
                offset: data.len(),
            });
            data.extend(tensor_values(t)?);
            Ok(())
        };
        let store = model.store();
        for (name, var) in store.params().iter().filter(|(n, _)| wanted(n)) {
            push(name, TensorKind::Param, var.as_tensor())?;
        }
        for (name, var) in store.buffers().iter().filter(|(n, _)| wanted(n)) {
            push(name, TensorKind::Buffer, var.as_tensor())?;
        }
        let mut optimizer_steps = 0;
        if let Some((steps, moments)) = opts.optimizer {
            optimizer_steps = steps;
            for (name, mv) in moments.iter().filter(|(n, _)| wanted(n)) {
                push(name, TensorKind::AdamM, &mv.m)?;
                push(name, TensorKind::AdamV, &mv.v)?;
            }
        }
        Ok(Self {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                step,
                model: model.config().clone(),
                run_config: opts.run_config,
                rng: opts.rng,
                optimizer_steps,
                tensors,
            },
            data,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated header: {header_len} bytes declared, {} present", bytes.len() - 16)))?;
        let raw: serde_json::Value = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
        let version = raw.get("format_version").and_then(|v| v.as_u64());
        if version != Some(FORMAT_VERSION as u64) {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                version.map_or("missing".to_string(), |v| v.to_string())
            )));
        }
        let header: CheckpointHeader =
            serde_json::from_value(raw).map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
        let body = &bytes[header_end..];
        let needed = header.tensors.iter().map(|t| t.offset + t.len()).max().unwrap_or(0);
        if body.len() < 4 * needed {
            return Err(Error::Checkpoint(format!(
                "truncated tensor data: {} bytes present, {} needed",
                body.len(),
                4 * needed
            )));
        }
        let data = body[..4 * needed]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { header, data })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn step(&self) -> u64 {
        self.header.step
    }

    pub fn has_part(&self, part: ModelPart) -> bool {
        self.header
            .tensors
            .iter()
            .any(|t| t.kind == TensorKind::Param && ModelPart::of(&t.name) == Some(part))
    }

    fn entries(&self, kind: TensorKind) -> impl Iterator<Item = &TensorEntry> {
        self.header.tensors.iter().filter(move |t| t.kind == kind)
    }

    fn tensor(&self, entry: &TensorEntry, dtype: DType) -> Result<Tensor> {
        let values = self.data[entry.offset..entry.offset + entry.len()].to_vec();
        Ok(Tensor::from_vec(values, entry.shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Copies the stored groups in `parts` into `model`. Every parameter of a
    /// requested group must be present with a matching shape.
    pub fn apply(&self, model: &LipSyncModel, parts: &[ModelPart]) -> Result<()> {
        let store = model.store();
        let dtype = model.dtype();
        for &part in parts {
            if !self.has_part(part) {
                return Err(Error::Checkpoint(format!("{part} weights absent from checkpoint")));
            }
        }
        let in_parts = |name: &str| ModelPart::of(name).is_some_and(|p| parts.contains(&p));
        for (kind, targets) in [(TensorKind::Param, store.params()), (TensorKind::Buffer, store.buffers())] {
            let stored: BTreeMap<&str, &TensorEntry> = self.entries(kind).map(|t| (t.name.as_str(), t)).collect();
            for (name, var) in targets.iter().filter(|(n, _)| in_parts(n)) {
                let group = ModelPart::of(name).expect("filtered by group");
                let entry = stored
                    .get(name.as_str())
                    .ok_or_else(|| Error::Checkpoint(format!("{group}: tensor {name} missing from checkpoint")))?;
                if entry.shape != var.as_tensor().dims() {
                    return Err(Error::Checkpoint(format!(
                        "{group}: shape mismatch for {name}: checkpoint {:?}, model {:?}",
                        entry.shape,
                        var.as_tensor().dims()
                    )));
                }
                var.set(&self.tensor(entry, dtype)?)?;
            }
        }
        Ok(())
    }

    /// Builds a model from the stored configuration and loads every stored group.
    pub fn build_model(&self, dtype: DType) -> Result<LipSyncModel> {
        let model = LipSyncModel::new(self.header.model.clone(), 0, dtype)?;
        let parts: Vec<ModelPart> = ModelPart::ALL.into_iter().filter(|&p| self.has_part(p)).collect();
        self.apply(&model, &parts)?;
        Ok(model)
    }

    /// Stored optimizer moments, keyed by parameter name.
    pub fn optimizer_moments(&self, dtype: DType) -> Result<BTreeMap<String, Moments>> {
        let v: BTreeMap<&str, &TensorEntry> = self.entries(TensorKind::AdamV).map(|t| (t.name.as_str(), t)).collect();
        let mut out = BTreeMap::new();
        for m in self.entries(TensorKind::AdamM) {
            let ve = v
                .get(m.name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("second moment of {} missing", m.name)))?;
            out.insert(
                m.name.clone(),
                Moments {
                    m: self.tensor(m, dtype)?,
                    v: self.tensor(ve, dtype)?,
                },
            );
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;
    use crate::nn::Mode;
    use crate::sync_model::CrossModalConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                width_multiplier: 1.0 / 64.0,
                residual_blocks_per_stage: 0,
                visual_residual_blocks: vec![0; 5],
                ..Default::default()
            },
            cross_modal: CrossModalConfig {
                layers: 1,
                heads: 2,
                model_dim: 8,
                ffn_dim: 16,
                dropout: 0.0,
            },
        }
    }

    fn probe() -> (Tensor, Tensor) {
        (
            Tensor::randn(0f32, 1.0, (2, 1, 1, 80, 16), &Device::Cpu).unwrap(),
            Tensor::rand(0f32, 1.0, (2, 3, 5, 48, 96), &Device::Cpu).unwrap(),
        )
    }

    #[test]
    fn round_trip_preserves_logits_bitwise() {
        let model = LipSyncModel::new(cfg(), 11, DType::F32).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        Checkpoint::from_model(&model, 7, SaveOptions::default()).unwrap().save(&path).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.step(), 7);
        let loaded = ck.build_model(DType::F32).unwrap();
        let (mel, frames) = probe();
        let a = model.forward(&mel, &frames, &mut Mode::Eval).unwrap().to_vec1::<f32>().unwrap();
        let b = loaded.forward(&mel, &frames, &mut Mode::Eval).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn mismatched_config_names_group() {
        let model = LipSyncModel::new(cfg(), 1, DType::F32).unwrap();
        let ck = Checkpoint::from_model(&model, 0, SaveOptions::default()).unwrap();
        let mut other = cfg();
        other.cross_modal.ffn_dim = 32;
        let target = LipSyncModel::new(other, 1, DType::F32).unwrap();
        let err = ck.apply(&target, &ModelPart::ALL).unwrap_err().to_string();
        assert!(err.contains("sync block") && err.contains("shape mismatch"), "{err}");
    }

    #[test]
    fn visual_encoder_subset() {
        let model = LipSyncModel::new(cfg(), 1, DType::F32).unwrap();
        let ck = Checkpoint::from_model(
            &model,
            0,
            SaveOptions {
                parts: vec![ModelPart::VisualEncoder],
                ..Default::default()
            },
        )
        .unwrap();
        let ck = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert!(ck.has_part(ModelPart::VisualEncoder) && !ck.has_part(ModelPart::Classifier));
        let fresh = LipSyncModel::new(cfg(), 2, DType::F32).unwrap();
        ck.apply(&fresh, &[ModelPart::VisualEncoder]).unwrap();
        let err = ck.apply(&fresh, &[ModelPart::Classifier]).unwrap_err().to_string();
        assert!(err.contains("classifier weights absent"), "{err}");
    }

    #[test]
    fn truncation_and_version_are_reported() {
        let model = LipSyncModel::new(cfg(), 1, DType::F32).unwrap();
        let bytes = Checkpoint::from_model(&model, 0, SaveOptions::default()).unwrap().to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 10]).unwrap_err().to_string();
        assert!(err.contains("truncated tensor data"), "{err}");
        let err = Checkpoint::from_bytes(&bytes[..40]).unwrap_err().to_string();
        assert!(err.contains("truncated header"), "{err}");
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let bumped = text.replacen("\"format_version\":1", "\"format_version\":9", 1);
        let err = Checkpoint::from_bytes(bumped.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("format version 9"), "{err}");
        assert!(Checkpoint::from_bytes(b"garbage-bytes-here").unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn rng_state_resumes_stream() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let _: u64 = rng.random();
        let state = RngState::capture(&rng);
        let json = serde_json::to_string(&state).unwrap();
        let mut resumed = serde_json::from_str::<RngState>(&json).unwrap().restore().unwrap();
        assert_eq!(rng.random::<u64>(), resumed.random::<u64>());
    }
}
