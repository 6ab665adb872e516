//! Self-supervised pair sampling, the BCE objective, Adam, checkpoints and
//! the training loop.

mod checkpoint;
mod loss;
mod optim;
mod sampler;

pub use checkpoint::{Checkpoint, CheckpointHeader, RngState, SaveOptions, TensorEntry, TensorKind, FORMAT_VERSION};
pub use loss::{bce_loss, bce_loss_mean, sigmoid};
pub use optim::{clip_scale, global_grad_norm, Adam, AdamConfig, Moments};
pub use sampler::{
    draw_offset, realize_batch, sample_batch, sample_pair, sample_spec, valid_starts, Label, PairSample, RealizedBatch,
    SamplerConfig, POSITIVE_FRACTION,
};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::DType;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::av_data::{frames_to_mel, load_entries, ClipManifest, MelFrontend, PreparedClip, Split};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::sync_model::{LipSyncModel, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    /// Steps between validation runs and checkpoints; 0 keeps only the final checkpoint.
    pub eval_every: u64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Size of the fixed, balanced validation pair set.
    pub val_pairs: usize,
    /// Linear ramp of the learning rate over the first steps; 0 disables it.
    pub warmup_steps: u64,
    /// Cosine decay of the learning rate to zero at `max_steps`.
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            max_steps: 2000,
            eval_every: 200,
            grad_clip_norm: 1.0,
            seed: 0,
            val_pairs: 256,
            warmup_steps: 0,
            cosine_decay: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("train.learning_rate {} is invalid", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Learning rate of the update that follows `completed` steps.
    pub fn learning_rate_at(&self, completed: u64) -> f64 {
        let mut lr = self.learning_rate;
        if self.warmup_steps > 0 {
            lr *= ((completed + 1) as f64 / self.warmup_steps as f64).min(1.0);
        }
        if self.cosine_decay && self.max_steps > 0 {
            let progress = (completed as f64 / self.max_steps as f64).min(1.0);
            lr *= 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        }
        lr
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Model, optimizer and random streams of one training run.
pub struct Trainer {
    model: LipSyncModel,
    optimizer: Adam,
    cfg: TrainConfig,
    sampler: SamplerConfig,
    sample_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    step: u64,
}

impl Trainer {
    pub fn new(model: LipSyncModel, sampler: SamplerConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        sampler.validate()?;
        Ok(Self {
            model,
            optimizer: Adam::new(cfg.adam()),
            sample_rng: ChaCha8Rng::seed_from_u64(sampler.seed),
            dropout_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d0d0),
            cfg,
            sampler,
            step: 0,
        })
    }

    /// Resumes from a checkpoint holding the full model, optimizer state and streams.
    pub fn resume(ck: &Checkpoint, sampler: SamplerConfig, cfg: TrainConfig) -> Result<Self> {
        let model = ck.build_model(DType::F32)?;
        let mut t = Self::new(model, sampler, cfg)?;
        t.optimizer.restore(ck.header.optimizer_steps, ck.optimizer_moments(DType::F32)?);
        if let Some(r) = ck.header.rng.get("sample") {
            t.sample_rng = r.restore()?;
        }
        if let Some(r) = ck.header.rng.get("dropout") {
            t.dropout_rng = r.restore()?;
        }
        t.step = ck.step();
        Ok(t)
    }

    pub fn model(&self) -> &LipSyncModel {
        &self.model
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn sampler(&self) -> &SamplerConfig {
        &self.sampler
    }

    /// Samples a batch from `clips` and takes one optimization step.
    pub fn train_step(&mut self, clips: &[PreparedClip]) -> Result<f64> {
        let pairs = sample_batch(clips, &mut self.sample_rng, &self.sampler, self.cfg.batch_size)?;
        self.step_on(clips, &pairs)
    }

    /// One Adam step on the mean BCE of the given pairs.
    pub fn step_on(&mut self, clips: &[PreparedClip], pairs: &[PairSample]) -> Result<f64> {
        let batch = realize_batch(clips, pairs, self.model.dtype())?;
        let logits = self
            .model
            .forward(&batch.mel, &batch.frames, &mut Mode::Train { rng: &mut self.dropout_rng })?;
        let loss = bce_loss_mean(&logits, &batch.labels)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                clip_ids: pairs.iter().map(|p| p.clip_id.clone()).collect(),
            });
        }
        let grads = loss.backward()?;
        let norm = global_grad_norm(self.model.store(), &grads)?;
        self.optimizer.set_learning_rate(self.cfg.learning_rate_at(self.step));
        self.optimizer
            .apply(self.model.store(), &grads, clip_scale(norm, self.cfg.grad_clip_norm))?;
        self.step += 1;
        Ok(value)
    }

    pub fn checkpoint(&self, run_config: Option<serde_json::Value>) -> Result<Checkpoint> {
        Checkpoint::from_model(
            &self.model,
            self.step,
            SaveOptions {
                parts: Vec::new(),
                run_config,
                rng: [
                    ("sample".to_string(), RngState::capture(&self.sample_rng)),
                    ("dropout".to_string(), RngState::capture(&self.dropout_rng)),
                ]
                .into(),
                optimizer: Some((self.optimizer.steps_taken(), self.optimizer.moments())),
            },
        )
    }
}

/// Balanced, fixed validation pairs: every other pair is a positive.
pub fn validation_pairs(clips: &[PreparedClip], cfg: &SamplerConfig, n: usize, seed: u64) -> Vec<PairSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let usable: Vec<usize> = (0..clips.len())
        .filter(|&i| valid_starts(clips[i].clip.n_frames(), clips[i].mel.n_frames(), cfg).is_some())
        .collect();
    if usable.is_empty() {
        return Vec::new();
    }
    (0..n)
        .map(|i| {
            let clip_index = usable[(i / 2) % usable.len()];
            let c = &clips[clip_index];
            let label = if i % 2 == 0 { Label::Sync } else { Label::OutOfSync };
            let (spec, label) =
                sample_spec(c.clip.n_frames(), c.mel.n_frames(), &mut rng, cfg, Some(label)).expect("usable clip");
            PairSample {
                clip_index,
                clip_id: c.clip_id().to_string(),
                spec,
                label,
            }
        })
        .collect()
}

/// Mean BCE and accuracy at logit threshold 0 over `pairs`, in inference mode.
pub fn pair_metrics(model: &LipSyncModel, clips: &[PreparedClip], pairs: &[PairSample], batch: usize) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no pairs to evaluate".into()));
    }
    let (mut loss, mut correct) = (0f64, 0usize);
    for chunk in pairs.chunks(batch.max(1)) {
        let b = realize_batch(clips, chunk, model.dtype())?;
        let logits = model
            .forward(&b.mel, &b.frames, &mut Mode::Eval)?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?;
        for (z, p) in logits.iter().zip(chunk) {
            let y = p.label as u8 as f64;
            loss += bce_loss(*z, y);
            correct += usize::from((*z > 0.0) == (p.label == Label::Sync));
        }
    }
    let n = pairs.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    /// Mean loss since the previous record; absent before the first step.
    pub train_loss: Option<f64>,
    pub val_pair_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub final_val_pair_acc: Option<f64>,
    pub audio_window_frames: usize,
    pub checkpoints: Vec<PathBuf>,
    pub metrics_path: PathBuf,
}

/// Complete description of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("checkpoint_{step:06}.ckpt"))
}

/// Trains on the train split of `manifest`, validating on its val split.
///
/// Writes `metrics.jsonl` and `checkpoint_<step>.ckpt` files into `out_dir`.
pub fn train_loop(manifest: &ClipManifest, run: &RunConfig, out_dir: &Path) -> Result<TrainSummary> {
    let frontend = MelFrontend::new(Default::default())?;
    let train_entries = manifest.split(Split::Train);
    if train_entries.is_empty() {
        return Err(Error::Config("manifest has no train split".into()));
    }
    let train_clips = load_entries(&train_entries, &frontend)?;
    let val_clips = load_entries(&manifest.split(Split::Val), &frontend)?;
    let model = LipSyncModel::new(run.model.clone(), run.train.seed, DType::F32)?;
    let trainer = Trainer::new(model, run.sampler.clone(), run.train.clone())?;
    train_with(trainer, &train_clips, &val_clips, run, out_dir)
}

/// The loop behind [`train_loop`], over clips already in memory.
pub fn train_with(
    mut trainer: Trainer,
    train_clips: &[PreparedClip],
    val_clips: &[PreparedClip],
    run: &RunConfig,
    out_dir: &Path,
) -> Result<TrainSummary> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let audio_window_frames = frames_to_mel(run.sampler.visual_len as i64) as usize;
    log::info!(
        "training on {} clips: visual windows of {} frames, audio windows t_a = {}",
        train_clips.len(),
        run.sampler.visual_len,
        audio_window_frames
    );
    let val_pairs = validation_pairs(val_clips, &run.sampler, run.train.val_pairs, run.sampler.seed ^ 0x7a11_da7e);
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let run_json = serde_json::to_value(run)?;
    let mut checkpoints = Vec::new();
    let mut last_loss = None;
    let mut last_acc = None;
    let mut window_loss = (0f64, 0usize);

    let mut record = |trainer: &Trainer, train_loss: Option<f64>, metrics: &mut fs::File| -> Result<Option<f64>> {
        let (val_loss, val_acc) = if val_pairs.is_empty() {
            (None, None)
        } else {
            let (l, a) = pair_metrics(trainer.model(), val_clips, &val_pairs, run.train.batch_size)?;
            (Some(l), Some(a))
        };
        let rec = MetricsRecord {
            step: trainer.step(),
            train_loss,
            val_pair_acc: val_acc,
            val_loss,
        };
        log::info!("step {}: train loss {:?}, val pair acc {:?}", rec.step, rec.train_loss, rec.val_pair_acc);
        writeln!(metrics, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&metrics_path, e))?;
        let path = checkpoint_path(out_dir, trainer.step());
        trainer.checkpoint(Some(run_json.clone()))?.save(&path)?;
        checkpoints.push(path);
        Ok(val_acc)
    };

    while trainer.step() < run.train.max_steps {
        let loss = trainer.train_step(train_clips)?;
        last_loss = Some(loss);
        window_loss.0 += loss;
        window_loss.1 += 1;
        let step = trainer.step();
        let periodic = run.train.eval_every > 0 && step % run.train.eval_every == 0;
        if periodic && step < run.train.max_steps {
            last_acc = record(&trainer, Some(window_loss.0 / window_loss.1 as f64), &mut metrics)?;
            window_loss = (0.0, 0);
        }
    }
    let final_loss = (window_loss.1 > 0).then(|| window_loss.0 / window_loss.1 as f64);
    last_acc = record(&trainer, final_loss, &mut metrics)?.or(last_acc);
    Ok(TrainSummary {
        steps: trainer.step(),
        final_loss: last_loss,
        final_val_pair_acc: last_acc,
        audio_window_frames,
        checkpoints,
        metrics_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rate_schedule() {
        let mut cfg = TrainConfig {
            learning_rate: 1e-3,
            max_steps: 100,
            ..Default::default()
        };
        assert_eq!(cfg.learning_rate_at(0), 1e-3);
        assert_eq!(cfg.learning_rate_at(99), 1e-3);
        cfg.warmup_steps = 10;
        assert!((cfg.learning_rate_at(0) - 1e-4).abs() < 1e-15);
        assert_eq!(cfg.learning_rate_at(9), 1e-3);
        cfg.cosine_decay = true;
        assert!((cfg.learning_rate_at(50) - 5e-4).abs() < 1e-15);
        assert!(cfg.learning_rate_at(100).abs() < 1e-15);
        assert!(cfg.learning_rate_at(60) < cfg.learning_rate_at(40));
    }
}
