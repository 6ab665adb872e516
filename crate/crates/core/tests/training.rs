use candle_core::DType;
use lipsync::av_data::{ClipManifest, MelFrontend, PreparedClip};
use lipsync::sync_model::{LipSyncModel, ModelConfig};
use lipsync::synthetic::{generate_clip, generate_dataset, SyntheticConfig};
use lipsync::training::{
    checkpoint_path, realize_batch, sample_batch, train_loop, Checkpoint, MetricsRecord, RunConfig, SamplerConfig,
    TrainConfig, Trainer,
};
use lipsync::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn clips(n: usize, frames: usize) -> Vec<PreparedClip> {
    let cfg = SyntheticConfig {
        clip_len_frames: frames,
        ..Default::default()
    };
    let fe = MelFrontend::new(Default::default()).unwrap();
    (0..n)
        .map(|i| {
            let c = generate_clip(&cfg, &mut cfg.clip_rng(i), &SyntheticConfig::clip_id(i)).unwrap();
            PreparedClip::new(c.clip, c.waveform, &fe).unwrap()
        })
        .collect()
}

fn trainer(cfg: TrainConfig) -> Trainer {
    let model = LipSyncModel::new(ModelConfig::tiny(), 0, DType::F32).unwrap();
    Trainer::new(model, SamplerConfig::default(), cfg).unwrap()
}

fn params(model: &LipSyncModel) -> Vec<Vec<u32>> {
    model
        .store()
        .params()
        .values()
        .map(|v| {
            let t = v.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            t.iter().map(|x| x.to_bits()).collect()
        })
        .collect()
}

#[test]
fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
    let data = clips(4, 40);
    let mut t = trainer(TrainConfig {
        learning_rate: 0.0,
        batch_size: 4,
        ..Default::default()
    });
    let before = params(t.model());
    for _ in 0..3 {
        t.train_step(&data).unwrap();
    }
    assert_eq!(params(t.model()), before);
}

#[test]
fn fixed_seeds_reproduce_losses() {
    let data = clips(4, 40);
    let cfg = TrainConfig {
        batch_size: 4,
        ..Default::default()
    };
    let run = || {
        let mut t = trainer(cfg.clone());
        (0..3).map(|_| t.train_step(&data).unwrap()).collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-6, "{a:?} vs {b:?}");
    }
}

#[test]
fn tiny_model_memorizes_one_batch() {
    let data = clips(8, 40);
    let pairs = sample_batch(&data, &mut ChaCha8Rng::seed_from_u64(1), &SamplerConfig::default(), 8).unwrap();
    let mut t = trainer(TrainConfig {
        learning_rate: 3e-3,
        batch_size: 8,
        ..Default::default()
    });
    let mut loss = f64::INFINITY;
    for _ in 0..200 {
        loss = t.step_on(&data, &pairs).unwrap();
    }
    assert!(loss < 0.05, "loss after 200 steps {loss}");
}

#[test]
fn resuming_continues_the_same_trajectory() {
    let data = clips(4, 40);
    let cfg = TrainConfig {
        batch_size: 4,
        learning_rate: 1e-3,
        ..Default::default()
    };
    let mut straight = trainer(cfg.clone());
    let mut first = trainer(cfg.clone());
    for _ in 0..2 {
        straight.train_step(&data).unwrap();
        first.train_step(&data).unwrap();
    }
    let bytes = first.checkpoint(None).unwrap().to_bytes().unwrap();
    let mut resumed = Trainer::resume(&Checkpoint::from_bytes(&bytes).unwrap(), SamplerConfig::default(), cfg).unwrap();
    assert_eq!(resumed.step(), 2);
    for _ in 0..2 {
        let (a, b) = (straight.train_step(&data).unwrap(), resumed.train_step(&data).unwrap());
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert_eq!(params(straight.model()), params(resumed.model()));
}

#[test]
fn ten_frame_windows_realize_32_mel_frames() {
    let data = clips(2, 50);
    let sampler = SamplerConfig {
        visual_len: 10,
        ..Default::default()
    };
    let pairs = sample_batch(&data, &mut ChaCha8Rng::seed_from_u64(0), &sampler, 6).unwrap();
    let b = realize_batch(&data, &pairs, DType::F32).unwrap();
    assert_eq!(b.mel.dims(), &[6, 1, 1, 80, 32]);
    assert_eq!(b.frames.dims(), &[6, 3, 10, 48, 96]);
}

fn small_dataset(dir: &std::path::Path) -> ClipManifest {
    let cfg = SyntheticConfig {
        n_clips: 10,
        clip_len_frames: 40,
        ..Default::default()
    };
    generate_dataset(&cfg, dir).unwrap()
}

#[test]
fn loop_without_mid_run_validation_writes_only_the_final_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(&dir.path().join("data"));
    let run = RunConfig {
        model: ModelConfig::tiny(),
        sampler: SamplerConfig::default(),
        train: TrainConfig {
            batch_size: 4,
            max_steps: 3,
            eval_every: 0,
            val_pairs: 8,
            ..Default::default()
        },
    };
    let out = dir.path().join("run");
    let summary = train_loop(&manifest, &run, &out).unwrap();
    assert_eq!(summary.steps, 3);
    assert_eq!(summary.checkpoints, vec![checkpoint_path(&out, 3)]);
    assert_eq!(summary.audio_window_frames, 16);
    let records: Vec<MetricsRecord> = std::fs::read_to_string(&summary.metrics_path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 1);
    assert!(records[0].val_pair_acc.is_some());
    let ck = Checkpoint::load(&summary.checkpoints[0]).unwrap();
    assert_eq!(ck.step(), 3);
}

#[test]
fn manifest_without_train_split_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path());
    let kept: Vec<_> = manifest
        .entries
        .iter()
        .filter(|e| e.split != lipsync::av_data::Split::Train)
        .cloned()
        .collect();
    let manifest = ClipManifest::new(kept).unwrap();
    let err = train_loop(&manifest, &RunConfig::default(), &dir.path().join("run")).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}
