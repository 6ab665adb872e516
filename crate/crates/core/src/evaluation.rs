//! Offset estimation by sliding search, context-window averaging and
//! tolerance-based accuracy over a test split.

use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::av_data::{check_window, AVWindowSpec, MelFrontend, PreparedClip};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::sync_model::{audio_batch, visual_batch, LipSyncModel};
use crate::training::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OffsetSearchConfig {
    /// Offsets `-search_range..=search_range` are scored.
    pub search_range: usize,
    pub window_len: usize,
    /// A prediction within this many frames of the truth counts as correct.
    pub tolerance: usize,
    pub context_len: usize,
    /// Spacing of sub-window starts inside a context window.
    pub stride: usize,
}

impl Default for OffsetSearchConfig {
    fn default() -> Self {
        Self {
            search_range: 15,
            window_len: 5,
            tolerance: 1,
            context_len: 5,
            stride: 1,
        }
    }
}

impl OffsetSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.stride == 0 {
            return Err(Error::Config("window_len and stride must be positive".into()));
        }
        if self.tolerance > self.search_range {
            return Err(Error::Config(format!(
                "tolerance {} exceeds search_range {}",
                self.tolerance, self.search_range
            )));
        }
        if self.context_len < self.window_len {
            return Err(Error::Config(format!(
                "context_len {} is shorter than window_len {}",
                self.context_len, self.window_len
            )));
        }
        Ok(())
    }

    pub fn with_context(&self, context_len: usize) -> Self {
        Self { context_len, ..*self }
    }

    /// The searched offsets in curve order.
    pub fn offsets(&self) -> Vec<i32> {
        let r = self.search_range as i32;
        (-r..=r).collect()
    }

    pub fn curve_len(&self) -> usize {
        2 * self.search_range + 1
    }

    /// Sub-window starts relative to the context start.
    pub fn sub_window_starts(&self) -> Vec<usize> {
        (0..=self.context_len - self.window_len).step_by(self.stride).collect()
    }
}

/// Anything that can score one visual window against a set of audio offsets.
pub trait PairScorer {
    /// Scores in `(0, 1)`-like units, one per entry of `offsets`.
    fn score_window(&self, clip: &PreparedClip, visual_start: usize, window_len: usize, offsets: &[i32]) -> Result<Vec<f64>>;
}

/// Scores with a trained model in inference mode. The visual window is
/// encoded once and paired with every candidate audio window in one batch.
pub struct ModelScorer<'a> {
    model: &'a LipSyncModel,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a LipSyncModel) -> Self {
        Self { model }
    }
}

impl PairScorer for ModelScorer<'_> {
    fn score_window(&self, clip: &PreparedClip, visual_start: usize, window_len: usize, offsets: &[i32]) -> Result<Vec<f64>> {
        if offsets.is_empty() {
            return Ok(Vec::new());
        }
        let dtype = self.model.dtype();
        let mut visual = None;
        let mut audio = Vec::with_capacity(offsets.len());
        for &k in offsets {
            let (v, a) = clip.slice(&AVWindowSpec {
                visual_start,
                visual_len: window_len,
                audio_offset_frames: k,
            })?;
            visual.get_or_insert(v);
            audio.push(a);
        }
        let visual = self.model.encode_visual(&visual_batch(&[visual.as_ref().unwrap()], dtype)?, &Mode::Eval)?;
        let audio = self
            .model
            .encode_audio(&audio_batch(&audio.iter().collect::<Vec<_>>(), dtype)?, &Mode::Eval)?;
        let visual = visual.broadcast_as((offsets.len(), visual.dim(1)?, visual.dim(2)?))?.contiguous()?;
        let logits = self.model.score_features(&audio, &visual, &mut Mode::Eval)?;
        Ok(logits
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?
            .into_iter()
            .map(sigmoid)
            .collect())
    }
}

/// Adapts a function of `(clip, visual_start, offset)` into a scorer.
pub struct FnScorer<F>(pub F);

impl<F: Fn(&PreparedClip, usize, i32) -> f64> PairScorer for FnScorer<F> {
    fn score_window(&self, clip: &PreparedClip, visual_start: usize, _window_len: usize, offsets: &[i32]) -> Result<Vec<f64>> {
        Ok(offsets.iter().map(|&k| (self.0)(clip, visual_start, k)).collect())
    }
}

/// Checks that `len` frames at `visual_start` and their audio at every
/// searched offset fit inside the clip.
pub fn check_search_window(clip: &PreparedClip, visual_start: usize, len: usize, cfg: &OffsetSearchConfig) -> Result<()> {
    let r = cfg.search_range as i32;
    for k in [-r, r] {
        let spec = AVWindowSpec {
            visual_start,
            visual_len: len,
            audio_offset_frames: k,
        };
        check_window(clip.clip.n_frames(), clip.mel.n_frames(), &spec).map_err(|e| {
            Error::ClipTooShort(format!(
                "{}: window at frame {visual_start} of length {len} with ±{r} search: {e}",
                clip.clip_id()
            ))
        })?;
    }
    Ok(())
}

/// Score curve over offsets `-range..=range` for one window of `cfg.window_len` frames.
pub fn score_offsets(scorer: &dyn PairScorer, clip: &PreparedClip, visual_start: usize, cfg: &OffsetSearchConfig) -> Result<Vec<f64>> {
    check_search_window(clip, visual_start, cfg.window_len, cfg)?;
    let curve = scorer.score_window(clip, visual_start, cfg.window_len, &cfg.offsets())?;
    if curve.len() != cfg.curve_len() {
        return Err(Error::Shape(format!(
            "scorer returned {} scores for {} offsets",
            curve.len(),
            cfg.curve_len()
        )));
    }
    Ok(curve)
}

/// Signed offset of the curve maximum. Ties go to the smallest `|offset|`,
/// then to the negative side; NaN entries never win.
pub fn estimate_offset(curve: &[f64], cfg: &OffsetSearchConfig) -> Result<i32> {
    if curve.len() != cfg.curve_len() {
        return Err(Error::InvalidInput(format!(
            "score curve has {} entries, expected {}",
            curve.len(),
            cfg.curve_len()
        )));
    }
    let r = cfg.search_range as i32;
    let mut best: Option<(i32, f64)> = None;
    for mag in 0..=r {
        for k in if mag == 0 { vec![0] } else { vec![-mag, mag] } {
            let s = curve[(k + r) as usize];
            if s.is_nan() {
                continue;
            }
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((k, s));
            }
        }
    }
    Ok(best.map_or(0, |(k, _)| k))
}

/// Element-wise mean of equal-length curves, summed in the given order.
pub fn average_curves(curves: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = curves.first() else {
        return Err(Error::InvalidInput("no curves to average".into()));
    };
    if curves.iter().any(|c| c.len() != first.len()) {
        return Err(Error::InvalidInput("curves differ in length".into()));
    }
    let n = curves.len() as f64;
    Ok((0..first.len())
        .map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / n)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OffsetPrediction {
    pub clip_id: String,
    pub visual_start: usize,
    pub predicted_offset: i32,
    /// Scores for offsets `-range..=range`.
    pub score_curve: Vec<f64>,
}

/// Averages the curves of every sub-window inside the context window at
/// `visual_start`, then takes the maximum.
pub fn estimate_offset_context(
    scorer: &dyn PairScorer,
    clip: &PreparedClip,
    visual_start: usize,
    cfg: &OffsetSearchConfig,
) -> Result<OffsetPrediction> {
    cfg.validate()?;
    check_search_window(clip, visual_start, cfg.context_len, cfg)?;
    let curves = cfg
        .sub_window_starts()
        .into_iter()
        .map(|s| score_offsets(scorer, clip, visual_start + s, cfg))
        .collect::<Result<Vec<_>>>()?;
    let score_curve = average_curves(&curves)?;
    Ok(OffsetPrediction {
        clip_id: clip.clip_id().to_string(),
        visual_start,
        predicted_offset: estimate_offset(&score_curve, cfg)?,
        score_curve,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContextAccuracy {
    pub context_len: usize,
    /// Windows attempted, evaluated and skipped at this context length.
    pub n_attempted: usize,
    pub n: usize,
    pub n_skipped: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub mean_predicted_offset: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedWindow {
    pub clip_id: String,
    pub visual_start: usize,
    pub context_len: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyReport {
    pub n_evaluated: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub per_context: Vec<ContextAccuracy>,
    pub skipped: Vec<SkippedWindow>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Counts predictions within `tolerance` of the truth.
pub fn sync_accuracy(predicted: &[i32], truth: &[i32], tolerance: usize) -> Result<AccuracyReport> {
    if predicted.len() != truth.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} true offsets",
            predicted.len(),
            truth.len()
        )));
    }
    let n_correct = predicted
        .iter()
        .zip(truth)
        .filter(|(p, t)| p.abs_diff(**t) as usize <= tolerance)
        .count();
    Ok(AccuracyReport {
        n_evaluated: predicted.len(),
        n_correct,
        accuracy: ratio(n_correct, predicted.len()),
        per_context: Vec::new(),
        skipped: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub search: OffsetSearchConfig,
    /// Context lengths to report, in frames.
    pub contexts: Vec<usize>,
    /// Audio delay applied to every clip before evaluation; it is also the true offset.
    pub injected_offset: i32,
    pub histogram_bins: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            search: OffsetSearchConfig::default(),
            contexts: vec![5, 7, 9, 11, 13, 15],
            injected_offset: 0,
            histogram_bins: 10,
        }
    }
}

impl EvaluationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.contexts.is_empty() {
            return Err(Error::Config("no context lengths requested".into()));
        }
        for &c in &self.contexts {
            self.search.with_context(c).validate()?;
        }
        if self.injected_offset.unsigned_abs() as usize > self.search.search_range {
            return Err(Error::Config(format!(
                "injected offset {} is outside the ±{} search",
                self.injected_offset, self.search.search_range
            )));
        }
        if self.histogram_bins == 0 {
            return Err(Error::Config("histogram_bins must be positive".into()));
        }
        Ok(())
    }
}

/// Counts of averaged scores in equal-width bins over `[0, 1]`, split by
/// whether the score sits at the true offset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreHistogram {
    pub bin_edges: Vec<f64>,
    pub at_true_offset: Vec<usize>,
    pub elsewhere: Vec<usize>,
}

impl ScoreHistogram {
    fn new(bins: usize) -> Self {
        Self {
            bin_edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
            at_true_offset: vec![0; bins],
            elsewhere: vec![0; bins],
        }
    }

    fn add(&mut self, score: f64, at_truth: bool) {
        let bins = self.at_true_offset.len();
        let b = ((score.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        if at_truth {
            self.at_true_offset[b] += 1;
        } else {
            self.elsewhere[b] += 1;
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub config: EvaluationConfig,
    pub per_context: Vec<ContextAccuracy>,
    pub skipped: Vec<SkippedWindow>,
    pub score_histogram: ScoreHistogram,
    pub predictions: Vec<(usize, OffsetPrediction)>,
    pub warning: Option<String>,
}

impl EvaluationReport {
    /// A report with zero evaluated windows at every requested context length.
    pub fn empty(cfg: &EvaluationConfig, warning: impl Into<String>) -> Self {
        Self {
            config: cfg.clone(),
            per_context: cfg
                .contexts
                .iter()
                .map(|&context_len| ContextAccuracy {
                    context_len,
                    n_attempted: 0,
                    n: 0,
                    n_skipped: 0,
                    n_correct: 0,
                    accuracy: 0.0,
                    mean_predicted_offset: None,
                })
                .collect(),
            skipped: Vec::new(),
            score_histogram: ScoreHistogram::new(cfg.histogram_bins.max(1)),
            predictions: Vec::new(),
            warning: Some(warning.into()),
        }
    }

    pub fn accuracy(&self) -> AccuracyReport {
        let n_evaluated = self.per_context.iter().map(|c| c.n).sum();
        let n_correct = self.per_context.iter().map(|c| c.n_correct).sum();
        AccuracyReport {
            n_evaluated,
            n_correct,
            accuracy: ratio(n_correct, n_evaluated),
            per_context: self.per_context.clone(),
            skipped: self.skipped.clone(),
        }
    }

    pub fn context(&self, context_len: usize) -> Option<&ContextAccuracy> {
        self.per_context.iter().find(|c| c.context_len == context_len)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Context windows placed every `context_len` frames from frame
/// `search_range` onwards. A clip with room for none still contributes one
/// attempted window, so it shows up as skipped.
pub fn window_starts(n_frames: usize, cfg: &OffsetSearchConfig) -> Vec<usize> {
    let r = cfg.search_range;
    let mut starts: Vec<usize> = (r..)
        .step_by(cfg.context_len)
        .take_while(|s| s + cfg.context_len + r <= n_frames)
        .collect();
    if starts.is_empty() {
        starts.push(r);
    }
    starts
}

/// One offset for a whole clip: the lower median of its per-window predictions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClipOffset {
    pub offset: i32,
    pub n_windows: usize,
    /// Mean of the per-window score curves.
    pub mean_curve: Vec<f64>,
}

/// Searches every context window of `clip` and combines the predictions.
/// Fails with [`Error::ClipTooShort`] when no window fits.
pub fn estimate_clip_offset(scorer: &dyn PairScorer, clip: &PreparedClip, cfg: &OffsetSearchConfig) -> Result<ClipOffset> {
    cfg.validate()?;
    let mut predictions = Vec::new();
    for start in window_starts(clip.clip.n_frames(), cfg) {
        match estimate_offset_context(scorer, clip, start, cfg) {
            Ok(p) => predictions.push(p),
            Err(Error::ClipTooShort(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if predictions.is_empty() {
        return Err(Error::ClipTooShort(format!(
            "{}: {} frames leave no room for a {}-frame window with a ±{} search",
            clip.clip_id(),
            clip.clip.n_frames(),
            cfg.context_len,
            cfg.search_range
        )));
    }
    let mut offsets: Vec<i32> = predictions.iter().map(|p| p.predicted_offset).collect();
    offsets.sort_unstable();
    let curves: Vec<Vec<f64>> = predictions.into_iter().map(|p| p.score_curve).collect();
    Ok(ClipOffset {
        offset: offsets[(offsets.len() - 1) / 2],
        n_windows: offsets.len(),
        mean_curve: average_curves(&curves)?,
    })
}

/// Runs the offset search on every context window of every clip. Clips are
/// scored as given; use [`evaluate_clips`] to inject a shift first.
pub fn evaluate_dataset(scorer: &dyn PairScorer, clips: &[PreparedClip], cfg: &EvaluationConfig) -> Result<EvaluationReport> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::InvalidInput("evaluation split is empty".into()));
    }
    let truth = cfg.injected_offset;
    let r = cfg.search.search_range as i32;
    let mut per_context = Vec::new();
    let mut skipped = Vec::new();
    let mut predictions = Vec::new();
    let mut histogram = ScoreHistogram::new(cfg.histogram_bins);
    for &context_len in &cfg.contexts {
        let search = cfg.search.with_context(context_len);
        let (mut attempted, mut predicted) = (0usize, Vec::new());
        for clip in clips {
            for start in window_starts(clip.clip.n_frames(), &search) {
                attempted += 1;
                match estimate_offset_context(scorer, clip, start, &search) {
                    Ok(p) => {
                        for (i, &s) in p.score_curve.iter().enumerate() {
                            histogram.add(s, i as i32 - r == truth);
                        }
                        predicted.push(p.predicted_offset);
                        predictions.push((context_len, p));
                    }
                    Err(Error::ClipTooShort(reason)) => skipped.push(SkippedWindow {
                        clip_id: clip.clip_id().to_string(),
                        visual_start: start,
                        context_len,
                        reason,
                    }),
                    Err(e) => return Err(e),
                }
            }
        }
        let report = sync_accuracy(&predicted, &vec![truth; predicted.len()], search.tolerance)?;
        per_context.push(ContextAccuracy {
            context_len,
            n_attempted: attempted,
            n: report.n_evaluated,
            n_skipped: attempted - report.n_evaluated,
            n_correct: report.n_correct,
            accuracy: report.accuracy,
            mean_predicted_offset: (!predicted.is_empty())
                .then(|| predicted.iter().map(|&p| p as f64).sum::<f64>() / predicted.len() as f64),
        });
    }
    let warning = per_context.iter().all(|c| c.n == 0).then(|| {
        let msg = "every evaluation window was skipped; no accuracy could be measured".to_string();
        log::warn!("{msg}");
        msg
    });
    Ok(EvaluationReport {
        config: cfg.clone(),
        per_context,
        skipped,
        score_histogram: histogram,
        predictions,
        warning,
    })
}

/// Applies the configured audio delay to every clip, then evaluates.
pub fn evaluate_clips(
    scorer: &dyn PairScorer,
    clips: &[PreparedClip],
    cfg: &EvaluationConfig,
    frontend: &MelFrontend,
) -> Result<EvaluationReport> {
    if cfg.injected_offset == 0 {
        return evaluate_dataset(scorer, clips, cfg);
    }
    let shifted = clips
        .iter()
        .map(|c| c.with_audio_delay(cfg.injected_offset, frontend))
        .collect::<Result<Vec<_>>>()?;
    evaluate_dataset(scorer, &shifted, cfg)
}
