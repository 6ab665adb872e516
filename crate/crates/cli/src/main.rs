mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::DType;
use clap::{Parser, Subcommand};
use lipsync::av_data::{
    delay_audio, load_entries, mel_cache_path, write_matrix, write_wav, ClipManifest, ManifestEntry, MelFrontend,
    PreparedClip, Split, N_MELS, VIDEO_FPS,
};
use lipsync::encoders::export_visual_features;
use lipsync::evaluation::{estimate_clip_offset, evaluate_clips, EvaluationReport, ModelScorer};
use lipsync::sync_model::{LipSyncModel, ModelPart};
use lipsync::training::{train_loop, Checkpoint};
use lipsync::Error;

use config::CliConfig;

#[derive(Parser)]
#[command(name = "lipsync", version, about = "Audio-visual lip-sync scoring, offset search and training")]
struct Cli {
    /// TOML file with [model], [sampler], [train], [eval] and [synthetic] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `section.key=value`, applied after the config file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic dataset and its manifest.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
    },
    /// Computes and caches the log-mel spectrogram of every manifest entry.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
    },
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Offset-search accuracy of a checkpoint on one manifest split.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Comma-separated context lengths in frames.
        #[arg(long, value_delimiter = ',')]
        contexts: Option<Vec<usize>>,
        #[arg(long)]
        tolerance: Option<usize>,
        /// Delays every clip's audio by this many frames before evaluating.
        #[arg(long, allow_hyphen_values = true)]
        inject_offset: Option<i32>,
        /// JSON report path; defaults to the checkpoint path with `.eval.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Estimates the audio offset of one clip and optionally writes corrected audio.
    Offset {
        /// Directory of numbered frame images.
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Context length in frames; defaults to the [eval] window length.
        #[arg(long)]
        context: Option<usize>,
        /// Writes the audio shifted by the negated offset to this WAV file.
        #[arg(long)]
        fix: Option<PathBuf>,
    },
    /// Writes the visual-encoder feature matrix of every manifest entry.
    ExportFeatures {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => 2,
            Error::InvalidInput(_)
            | Error::Shape(_)
            | Error::Range { .. }
            | Error::Load { .. }
            | Error::Io { .. }
            | Error::NonFiniteLoss { .. } => 3,
            Error::ClipTooShort(_) => 4,
            Error::Checkpoint(_) => 5,
            Error::Tensor(_) | Error::Json(_) => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let mut cfg = CliConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    if let Command::Eval {
        contexts,
        tolerance,
        inject_offset,
        ..
    } = &cli.command
    {
        if let Some(c) = contexts {
            cfg.eval.contexts = c.clone();
        }
        if let Some(t) = tolerance {
            cfg.eval.search.tolerance = *t;
        }
        if let Some(k) = inject_offset {
            cfg.eval.injected_offset = *k;
        }
        cfg.eval.validate()?;
    }
    log::info!("resolved config:\n{}", cfg.to_toml());
    match cli.command {
        Command::GenSynthetic { out } => gen_synthetic(&cfg, &out),
        Command::Preprocess { manifest } => preprocess(&manifest),
        Command::Train { manifest, out } => train(&cfg, &manifest, &out),
        Command::Eval {
            manifest,
            checkpoint,
            split,
            report,
            ..
        } => {
            let report = report.unwrap_or_else(|| checkpoint.with_extension("eval.json"));
            eval(&cfg, &manifest, &checkpoint, split, &report)
        }
        Command::Offset {
            frames,
            audio,
            checkpoint,
            context,
            fix,
        } => offset(&cfg, &frames, &audio, &checkpoint, context, fix.as_deref()),
        Command::ExportFeatures {
            manifest,
            checkpoint,
            out,
        } => export_features(&manifest, &checkpoint, &out),
    }
}

fn load_manifest(path: &Path) -> Result<ClipManifest, Failure> {
    if !path.is_file() {
        return Err(Error::Config(format!("manifest not found: {}", path.display())).into());
    }
    Ok(ClipManifest::load(path)?)
}

fn load_model(path: &Path) -> Result<LipSyncModel, Failure> {
    Ok(Checkpoint::load(path)?.build_model(DType::F32)?)
}

fn gen_synthetic(cfg: &CliConfig, out: &Path) -> CmdResult {
    let manifest = lipsync::synthetic::generate_dataset(&cfg.synthetic, out)?;
    println!("wrote {} clips to {}", manifest.entries.len(), out.join("manifest.jsonl").display());
    Ok(())
}

fn preprocess(manifest: &Path) -> CmdResult {
    let manifest = load_manifest(manifest)?;
    let frontend = MelFrontend::new(Default::default())?;
    for entry in &manifest.entries {
        let wave = lipsync::av_data::read_wav(&entry.audio_path)?;
        let mel = frontend.compute(&wave)?;
        let path = mel_cache_path(entry);
        write_matrix(&path, N_MELS, mel.n_frames(), mel.values())?;
        log::info!("{}: {} mel frames -> {}", entry.clip_id, mel.n_frames(), path.display());
    }
    println!("cached {} spectrograms", manifest.entries.len());
    Ok(())
}

fn train(cfg: &CliConfig, manifest: &Path, out: &Path) -> CmdResult {
    let manifest = load_manifest(manifest)?;
    let summary = train_loop(&manifest, &cfg.run(), out)?;
    println!(
        "trained {} steps; final loss {:?}, val pair accuracy {:?}; {} checkpoints in {}",
        summary.steps,
        summary.final_loss,
        summary.final_val_pair_acc,
        summary.checkpoints.len(),
        out.display()
    );
    Ok(())
}

/// `5 (0.2s)`: a context length in frames with its duration.
fn context_header(frames: usize) -> String {
    format!("{frames} ({:.1}s)", frames as f64 / VIDEO_FPS as f64)
}

fn print_table(report: &EvaluationReport) {
    let headers: Vec<String> = report.per_context.iter().map(|c| context_header(c.context_len)).collect();
    let cells: Vec<String> = report
        .per_context
        .iter()
        .zip(&headers)
        .map(|(c, h)| format!("{:>w$.1}", 100.0 * c.accuracy, w = h.len()))
        .collect();
    let label = "Clip length in frames (seconds)";
    println!("{label} | {}", headers.join(" | "));
    println!("{:<w$} | {}", "Accuracy (%)", cells.join(" | "), w = label.len());
    let counts: Vec<String> = report
        .per_context
        .iter()
        .zip(&headers)
        .map(|(c, h)| format!("{:>w$}", c.n, w = h.len()))
        .collect();
    println!("{:<w$} | {}", "Windows", counts.join(" | "), w = label.len());
}

fn eval(cfg: &CliConfig, manifest: &Path, checkpoint: &Path, split: Split, report_path: &Path) -> CmdResult {
    let manifest = load_manifest(manifest)?;
    let model = load_model(checkpoint)?;
    let frontend = MelFrontend::new(Default::default())?;
    let entries = manifest.split(split);
    if entries.is_empty() {
        let report = EvaluationReport::empty(&cfg.eval, format!("the {split} split is empty"));
        report.write_json(report_path)?;
        print_table(&report);
        return Err(Failure {
            code: 3,
            message: format!("the {split} split of the manifest is empty; wrote {}", report_path.display()),
        });
    }
    let clips = load_entries(&entries, &frontend)?;
    let report = evaluate_clips(&ModelScorer::new(&model), &clips, &cfg.eval, &frontend)?;
    report.write_json(report_path)?;
    print_table(&report);
    if !report.skipped.is_empty() {
        println!("{} windows skipped (see report)", report.skipped.len());
    }
    println!("report: {}", report_path.display());
    Ok(())
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn count_frames(dir: &Path) -> Result<usize, Failure> {
    let listing = std::fs::read_dir(dir).map_err(|e| io_error(dir, e))?;
    let mut n = 0;
    for entry in listing {
        let entry = entry.map_err(|e| io_error(dir, e))?;
        let is_image = entry
            .path()
            .extension()
            .and_then(|x| x.to_str())
            .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"));
        n += usize::from(is_image);
    }
    Ok(n)
}

fn offset(
    cfg: &CliConfig,
    frames: &Path,
    audio: &Path,
    checkpoint: &Path,
    context: Option<usize>,
    fix: Option<&Path>,
) -> CmdResult {
    let model = load_model(checkpoint)?;
    let frontend = MelFrontend::new(Default::default())?;
    let entry = ManifestEntry {
        clip_id: frames
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "clip".into()),
        frames_path: frames.to_path_buf(),
        audio_path: audio.to_path_buf(),
        num_frames: count_frames(frames)?,
        split: Split::Test,
    };
    let (clip, waveform) = lipsync::av_data::load_clip(&entry)?;
    let clip = PreparedClip::new(clip, waveform, &frontend)?;
    let search = cfg.eval.search.with_context(context.unwrap_or(cfg.eval.search.window_len));
    search.validate()?;
    let found = estimate_clip_offset(&ModelScorer::new(&model), &clip, &search)?;
    let global = found.offset;
    println!("offset: {global:+} frames (median of {} windows)", found.n_windows);
    println!("mean score curve:");
    for (k, s) in search.offsets().iter().zip(&found.mean_curve) {
        println!("{k:+4} {s:.4}");
    }
    if let Some(out) = fix {
        write_wav(out, &delay_audio(&clip.waveform, -global))?;
        println!("corrected audio: {}", out.display());
    }
    Ok(())
}

fn export_features(manifest: &Path, checkpoint: &Path, out: &Path) -> CmdResult {
    let manifest = load_manifest(manifest)?;
    let ck = Checkpoint::load(checkpoint)?;
    let model = LipSyncModel::new(ck.header.model.clone(), 0, DType::F32)?;
    ck.apply(&model, &[ModelPart::VisualEncoder])?;
    std::fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    for entry in &manifest.entries {
        let (clip, _) = lipsync::av_data::load_clip(entry)?;
        let path = out.join(format!("{}.feat", entry.clip_id));
        let features = export_visual_features(model.visual_encoder(), &clip, &path)?;
        log::info!("{}: {} frames -> {}", entry.clip_id, features.frames, path.display());
    }
    println!("exported {} feature files to {}", manifest.entries.len(), out.display());
    Ok(())
}
