//! Evaluation metrics: frame-level VAD precision/recall/F-score, clamped
//! mean absolute error for the regression heads, correctness-conditioned
//! value distributions, and quantile-binned outcome reports.
//!
//! Everything operates at the pipeline's 16 ms frame resolution using the
//! same strictly-more-than-half rasterization rule as label generation, so
//! a hypothesis scored here is judged against exactly the frames a model
//! was trained on.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activity::SpeechActivity;
use crate::audio::PIPELINE_SAMPLE_RATE;
use crate::contamination::FrameGrid;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("sequence lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("duration must be positive and finite, got {0}")]
    InvalidDuration(f64),
    #[error("frame duration must be positive and finite, got {0}")]
    InvalidFrameDuration(f64),
    #[error("collar must be non-negative and finite, got {0}")]
    InvalidCollar(f64),
    #[error("clamp range requires low < high, got ({low}, {high})")]
    InvalidClamp { low: f64, high: f64 },
    #[error("no evaluated frames (empty input or all-false mask)")]
    NoEvaluatedFrames,
    #[error("non-finite {what} at index {index}")]
    NonFiniteValue { what: &'static str, index: usize },
    #[error("histogram bin width must be positive and finite, got {0}")]
    InvalidBinWidth(f64),
    #[error("the {class} outcome class is empty")]
    EmptyClass { class: &'static str },
    #[error("bin count must be at least 1, got {0}")]
    InvalidBinCount(usize),
    #[error("{items} items cannot fill {bins} bins")]
    TooFewItems { items: usize, bins: usize },
    #[error("conditioning values are tied across the boundary of bin {bin}; quantile edges would not be strictly increasing")]
    TiedBinEdge { bin: usize },
}

/// Frame-level confusion counts for speech detection.
///
/// Counts are mergeable across utterances, so corpus totals are an
/// associative fold over per-file counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DetectionCounts {
    pub true_positive: u64,
    pub false_positive: u64,
    pub false_negative: u64,
    pub true_negative: u64,
}

impl DetectionCounts {
    pub fn total(&self) -> u64 {
        self.true_positive + self.false_positive + self.false_negative + self.true_negative
    }

    /// `tp / (tp + fp)`; 1.0 when the hypothesis marks nothing as speech
    /// (no positive claims means no false ones).
    pub fn precision(&self) -> f64 {
        let denom = self.true_positive + self.false_positive;
        if denom == 0 {
            1.0
        } else {
            self.true_positive as f64 / denom as f64
        }
    }

    /// `tp / (tp + fn)`; 1.0 when the reference contains no speech.
    pub fn recall(&self) -> f64 {
        let denom = self.true_positive + self.false_negative;
        if denom == 0 {
            1.0
        } else {
            self.true_positive as f64 / denom as f64
        }
    }

    /// Harmonic mean `2pr / (p + r)`; 0.0 when both are zero.
    pub fn f_score(&self) -> f64 {
        let p = self.precision();
        let r = self.recall();
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn merge(&mut self, other: &DetectionCounts) {
        self.true_positive += other.true_positive;
        self.false_positive += other.false_positive;
        self.false_negative += other.false_negative;
        self.true_negative += other.true_negative;
    }
}

/// Scores a VAD hypothesis against a reference at 16 ms frame resolution
/// with no forgiveness collar. See [`vad_fscore_with_collar`].
pub fn vad_fscore(
    reference: &SpeechActivity,
    hypothesis: &SpeechActivity,
    duration_s: f64,
    frame_s: f64,
) -> Result<DetectionCounts, MetricsError> {
    vad_fscore_with_collar(reference, hypothesis, duration_s, frame_s, 0.0)
}

/// Rasterizes both activities onto the frame grid (a frame is speech iff
/// strictly more than half its samples are inside a region) and counts the
/// confusion matrix.
///
/// When `collar_s > 0`, frames whose center lies strictly within
/// `collar_s` seconds of any reference region boundary are excluded from
/// counting, forgiving small boundary disagreements. The default collar of
/// zero evaluates every frame.
pub fn vad_fscore_with_collar(
    reference: &SpeechActivity,
    hypothesis: &SpeechActivity,
    duration_s: f64,
    frame_s: f64,
    collar_s: f64,
) -> Result<DetectionCounts, MetricsError> {
    if !duration_s.is_finite() || duration_s <= 0.0 {
        return Err(MetricsError::InvalidDuration(duration_s));
    }
    if !collar_s.is_finite() || collar_s < 0.0 {
        return Err(MetricsError::InvalidCollar(collar_s));
    }
    let rate = PIPELINE_SAMPLE_RATE;
    let num_samples = (duration_s * rate as f64).round() as usize;
    let grid = FrameGrid::new(frame_s, rate, num_samples)
        .map_err(|_| MetricsError::InvalidFrameDuration(frame_s))?;
    let ref_frames = grid.rasterize(reference, rate);
    let hyp_frames = grid.rasterize(hypothesis, rate);

    let boundaries: Vec<f64> = reference
        .regions()
        .iter()
        .flat_map(|r| [r.onset, r.offset])
        .collect();
    let spf = grid.samples_per_frame() as f64;
    let mut counts = DetectionCounts::default();
    for k in 0..grid.num_frames() {
        if collar_s > 0.0 {
            let center = (k as f64 * spf + spf / 2.0) / rate as f64;
            if boundaries.iter().any(|b| (center - b).abs() < collar_s) {
                continue;
            }
        }
        match (ref_frames[k], hyp_frames[k]) {
            (true, true) => counts.true_positive += 1,
            (false, true) => counts.false_positive += 1,
            (true, false) => counts.false_negative += 1,
            (false, false) => counts.true_negative += 1,
        }
    }
    Ok(counts)
}

/// Mean absolute error in dB over evaluated frames.
///
/// When `mask` is given, only mask-true frames are evaluated (regression
/// errors are meaningful on speech frames only). When `clamp` is given,
/// both prediction and gold are clamped into the range before taking the
/// difference, so an overshoot beyond the range costs no more than the
/// range edge does.
pub fn mae(
    pred: &[f64],
    gold: &[f64],
    mask: Option<&[bool]>,
    clamp: Option<(f64, f64)>,
) -> Result<f64, MetricsError> {
    if pred.len() != gold.len() {
        return Err(MetricsError::LengthMismatch { left: pred.len(), right: gold.len() });
    }
    if let Some(m) = mask {
        if m.len() != pred.len() {
            return Err(MetricsError::LengthMismatch { left: m.len(), right: pred.len() });
        }
    }
    if let Some((low, high)) = clamp {
        if !low.is_finite() || !high.is_finite() || low >= high {
            return Err(MetricsError::InvalidClamp { low, high });
        }
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..pred.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        if !pred[i].is_finite() {
            return Err(MetricsError::NonFiniteValue { what: "prediction", index: i });
        }
        if !gold[i].is_finite() {
            return Err(MetricsError::NonFiniteValue { what: "gold value", index: i });
        }
        let (p, g) = match clamp {
            Some((low, high)) => (pred[i].clamp(low, high), gold[i].clamp(low, high)),
            None => (pred[i], gold[i]),
        };
        sum += (p - g).abs();
        count += 1;
    }
    if count == 0 {
        return Err(MetricsError::NoEvaluatedFrames);
    }
    Ok(sum / count as f64)
}

/// One histogram cell covering `[low, high)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
}

/// Fixed-width histogram with cells aligned to multiples of `bin_width`,
/// contiguous from the first populated cell to the last. Empty input gives
/// an empty histogram.
pub fn histogram(values: &[f64], bin_width: f64) -> Result<Vec<HistogramBin>, MetricsError> {
    if !bin_width.is_finite() || bin_width <= 0.0 {
        return Err(MetricsError::InvalidBinWidth(bin_width));
    }
    for (index, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(MetricsError::NonFiniteValue { what: "value", index });
        }
    }
    if values.is_empty() {
        return Ok(Vec::new());
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let first_cell = (min / bin_width).floor() as i64;
    let last_cell = (max / bin_width).floor() as i64;
    let mut bins: Vec<HistogramBin> = (first_cell..=last_cell)
        .map(|i| HistogramBin {
            low: i as f64 * bin_width,
            high: (i + 1) as f64 * bin_width,
            count: 0,
        })
        .collect();
    for &v in values {
        let cell = ((v / bin_width).floor() as i64 - first_cell) as usize;
        bins[cell].count += 1;
    }
    Ok(bins)
}

/// Quartiles by linear interpolation at rank `h = (n-1)·p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Distribution summary for one outcome class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassSummary {
    pub count: usize,
    pub quartiles: Quartiles,
    /// Contiguous fixed-width cells from the first to the last populated
    /// one; interior cells may hold zero.
    pub histogram: Vec<HistogramBin>,
}

/// Per-class distributions of a value conditioned on a binary outcome
/// (for example: predicted SNR conditioned on whether a downstream system
/// got the utterance right).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionedDistributions {
    pub bin_width: f64,
    pub positive: ClassSummary,
    pub negative: ClassSummary,
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if frac == 0.0 || lo + 1 >= n {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

fn summarize_class(values: &[f64], bin_width: f64) -> ClassSummary {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let quartiles = Quartiles {
        q1: quantile_sorted(&sorted, 0.25),
        median: quantile_sorted(&sorted, 0.5),
        q3: quantile_sorted(&sorted, 0.75),
    };
    let histogram =
        histogram(&sorted, bin_width).expect("inputs validated by the caller");
    ClassSummary { count: values.len(), quartiles, histogram }
}

/// Splits `values` by the binary `outcomes` and summarizes each class with
/// a fixed-width histogram (width `bin_width`, cells aligned to multiples
/// of the width) plus quartiles.
pub fn conditioned_distribution(
    values: &[f64],
    outcomes: &[bool],
    bin_width: f64,
) -> Result<ConditionedDistributions, MetricsError> {
    if values.len() != outcomes.len() {
        return Err(MetricsError::LengthMismatch { left: values.len(), right: outcomes.len() });
    }
    if !bin_width.is_finite() || bin_width <= 0.0 {
        return Err(MetricsError::InvalidBinWidth(bin_width));
    }
    for (index, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(MetricsError::NonFiniteValue { what: "value", index });
        }
    }
    let mut positive = Vec::new();
    let mut negative = Vec::new();
    for (&v, &o) in values.iter().zip(outcomes) {
        if o {
            positive.push(v);
        } else {
            negative.push(v);
        }
    }
    if positive.is_empty() {
        return Err(MetricsError::EmptyClass { class: "positive" });
    }
    if negative.is_empty() {
        return Err(MetricsError::EmptyClass { class: "negative" });
    }
    Ok(ConditionedDistributions {
        bin_width,
        positive: summarize_class(&positive, bin_width),
        negative: summarize_class(&negative, bin_width),
    })
}

/// One equal-count bin of a quantile report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuantileBin {
    pub count: usize,
    pub mean_outcome: f64,
    /// Standard error of the bin mean: sample standard deviation over
    /// `sqrt(count)`; zero for single-item bins.
    pub std_error: f64,
}

/// Outcome means binned by equal-count quantiles of a conditioning value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantileReport {
    /// `bins + 1` strictly increasing edges: the smallest conditioning
    /// value, the midpoints between adjacent bins, and the largest value.
    pub bin_edges: Vec<f64>,
    pub bins: Vec<QuantileBin>,
}

/// [`bin_report`] with the standard 10 bins.
pub fn decile_report(cond: &[f64], outcome: &[f64]) -> Result<QuantileReport, MetricsError> {
    bin_report(cond, outcome, 10)
}

/// Sorts items by conditioning value (stable: ties keep input order) and
/// partitions them into `num_bins` equal-count bins — the first
/// `n mod num_bins` bins take one extra item — then reports each bin's
/// mean outcome and its standard error.
pub fn bin_report(
    cond: &[f64],
    outcome: &[f64],
    num_bins: usize,
) -> Result<QuantileReport, MetricsError> {
    if num_bins == 0 {
        return Err(MetricsError::InvalidBinCount(num_bins));
    }
    if cond.len() != outcome.len() {
        return Err(MetricsError::LengthMismatch { left: cond.len(), right: outcome.len() });
    }
    if cond.len() < num_bins {
        return Err(MetricsError::TooFewItems { items: cond.len(), bins: num_bins });
    }
    for (index, c) in cond.iter().enumerate() {
        if !c.is_finite() {
            return Err(MetricsError::NonFiniteValue { what: "conditioning value", index });
        }
    }
    for (index, o) in outcome.iter().enumerate() {
        if !o.is_finite() {
            return Err(MetricsError::NonFiniteValue { what: "outcome", index });
        }
    }

    let mut order: Vec<usize> = (0..cond.len()).collect();
    order.sort_by(|&a, &b| cond[a].total_cmp(&cond[b]));
    let sorted_cond: Vec<f64> = order.iter().map(|&i| cond[i]).collect();
    let sorted_outcome: Vec<f64> = order.iter().map(|&i| outcome[i]).collect();

    let n = cond.len();
    let base = n / num_bins;
    let remainder = n % num_bins;
    let mut bin_edges = Vec::with_capacity(num_bins + 1);
    let mut bins = Vec::with_capacity(num_bins);
    bin_edges.push(sorted_cond[0]);
    let mut start = 0usize;
    for b in 0..num_bins {
        let size = base + usize::from(b < remainder);
        let end = start + size;
        let slice = &sorted_outcome[start..end];
        let mean = slice.iter().sum::<f64>() / size as f64;
        let std_error = if size < 2 {
            0.0
        } else {
            let ss: f64 = slice.iter().map(|o| (o - mean) * (o - mean)).sum();
            (ss / (size - 1) as f64).sqrt() / (size as f64).sqrt()
        };
        bins.push(QuantileBin { count: size, mean_outcome: mean, std_error });
        let edge = if b + 1 == num_bins {
            sorted_cond[n - 1]
        } else {
            (sorted_cond[end - 1] + sorted_cond[end]) / 2.0
        };
        if edge <= *bin_edges.last().expect("edges start non-empty") {
            return Err(MetricsError::TiedBinEdge { bin: b });
        }
        bin_edges.push(edge);
        start = end;
    }
    Ok(QuantileReport { bin_edges, bins })
}
