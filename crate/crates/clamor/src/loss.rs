//! Multi-task training objective: binary cross-entropy for VAD plus
//! max-normalized mean-squared errors for SNR and C50, with SNR masked to
//! speech frames, bounded sigmoid output activations, and analytic
//! gradients for every raw prediction.
//!
//! No network lives here. The kernel consumes arbitrary per-frame raw
//! predictions so a toy trainer or a full framework can sit on top; the
//! binary classification output uses a single logit through the logistic
//! function (equivalent to a two-class softmax).

use serde::Serialize;
use thiserror::Error;

use crate::contamination::SNR_CLAMP_DB;
use crate::rir::C50_CLAMP_DB;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("{field} has {got} frames, expected {expected}")]
    LengthMismatch {
        field: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("non-finite {what} at frame {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("speech frame {index} has an undefined SNR target")]
    UndefinedSnrTarget { index: usize },
    #[error("activation bounds require low < high, got ({low}, {high})")]
    InvalidBounds { low: f64, high: f64 },
    #[error("norms must be positive and finite, got ({snr}, {c50})")]
    InvalidNorms { snr: f64, c50: f64 },
    #[error("calibration requires exactly 10 batches, got {0}")]
    CalibrationBatchCount(usize),
}

/// An output activation range in dB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bounds {
    pub low: f64,
    pub high: f64,
}

impl Bounds {
    pub fn new(low: f64, high: f64) -> Result<Self, LossError> {
        if !low.is_finite() || !high.is_finite() || low >= high {
            return Err(LossError::InvalidBounds { low, high });
        }
        Ok(Self { low, high })
    }

    pub fn span(&self) -> f64 {
        self.high - self.low
    }
}

/// Activation ranges for the two regression heads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ActivationBounds {
    pub snr: Bounds,
    pub c50: Bounds,
}

impl Default for ActivationBounds {
    fn default() -> Self {
        Self {
            snr: Bounds { low: SNR_CLAMP_DB.0, high: SNR_CLAMP_DB.1 },
            c50: Bounds { low: C50_CLAMP_DB.0, high: C50_CLAMP_DB.1 },
        }
    }
}

/// Raw (pre-activation) model outputs for one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionFrame {
    pub vad_logit: f64,
    pub snr_raw: f64,
    pub c50_raw: f64,
}

/// Per-frame training targets, borrowed from the caller.
///
/// `snr_db` may be `NaN` exactly where `vad` is false (the SNR is undefined
/// on non-speech frames and never enters the loss there).
#[derive(Debug, Clone, Copy)]
pub struct FrameTargets<'a> {
    pub vad: &'a [bool],
    pub snr_db: &'a [f64],
    pub c50_db: &'a [f64],
}

/// MSE normalizers for the two regression losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossNorms {
    pub snr: f64,
    pub c50: f64,
}

impl Default for LossNorms {
    fn default() -> Self {
        Self { snr: 1.0, c50: 1.0 }
    }
}

impl LossNorms {
    fn validate(&self) -> Result<(), LossError> {
        let ok = |n: f64| n.is_finite() && n > 0.0;
        if !ok(self.snr) || !ok(self.c50) {
            return Err(LossError::InvalidNorms { snr: self.snr, c50: self.c50 });
        }
        Ok(())
    }
}

/// The three per-task losses and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBundle {
    pub l_vad: f64,
    pub l_snr: f64,
    pub l_c50: f64,
    pub total: f64,
    pub norm_snr: f64,
    pub norm_c50: f64,
}

/// Gradient of the total loss with respect to one frame's raw predictions.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FrameGradient {
    pub vad_logit: f64,
    pub snr_raw: f64,
    pub c50_raw: f64,
}

/// Loss values plus per-frame gradients.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub losses: LossBundle,
    pub gradients: Vec<FrameGradient>,
    pub speech_frames: usize,
    /// True when the batch had zero speech frames: `l_snr` is 0 with zero
    /// gradients rather than an undefined mean.
    pub zero_speech_batch: bool,
}

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid squashed into `(low, high)`: `low + (high-low)·σ(raw)`.
///
/// Strictly monotone; saturates toward the bounds only at the resolution of
/// `f64` (|raw| beyond ~37 rounds to the bound itself).
pub fn bounded_activation(raw: f64, bounds: Bounds) -> f64 {
    bounds.low + bounds.span() * logistic(raw)
}

/// Analytic derivative of [`bounded_activation`]:
/// `(high-low)·σ(raw)·(1-σ(raw))`.
pub fn bounded_activation_derivative(raw: f64, bounds: Bounds) -> f64 {
    let s = logistic(raw);
    bounds.span() * s * (1.0 - s)
}

/// Stable binary cross-entropy of a logit against a {0,1} target:
/// `max(z,0) - z·y + ln(1 + e^(-|z|))`.
fn bce_from_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn validate_inputs(
    preds: &[PredictionFrame],
    targets: &FrameTargets<'_>,
) -> Result<(), LossError> {
    if preds.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let expected = preds.len();
    if targets.vad.len() != expected {
        return Err(LossError::LengthMismatch {
            field: "vad targets",
            got: targets.vad.len(),
            expected,
        });
    }
    if targets.snr_db.len() != expected {
        return Err(LossError::LengthMismatch {
            field: "snr targets",
            got: targets.snr_db.len(),
            expected,
        });
    }
    if targets.c50_db.len() != expected {
        return Err(LossError::LengthMismatch {
            field: "c50 targets",
            got: targets.c50_db.len(),
            expected,
        });
    }
    for (index, p) in preds.iter().enumerate() {
        if !(p.vad_logit.is_finite() && p.snr_raw.is_finite() && p.c50_raw.is_finite()) {
            return Err(LossError::NonFinite { what: "prediction", index });
        }
    }
    for (index, c) in targets.c50_db.iter().enumerate() {
        if !c.is_finite() {
            return Err(LossError::NonFinite { what: "c50 target", index });
        }
    }
    for (index, (&speech, s)) in targets.vad.iter().zip(targets.snr_db).enumerate() {
        if speech && !s.is_finite() {
            return Err(LossError::UndefinedSnrTarget { index });
        }
    }
    Ok(())
}

/// Computes `L = L_vad + L_snr + L_c50` over a batch, with gradients.
///
/// - `l_vad`: mean BCE over all frames.
/// - `l_snr`: mean squared error over speech frames only, divided by
///   `norms.snr`. A batch with no speech frames yields 0 with zero
///   gradients (flagged in the output).
/// - `l_c50`: mean squared error over all frames (the utterance-level C50
///   broadcast per frame), divided by `norms.c50`.
///
/// Each normalized quantity is computed as `unnormalized / norm` in a
/// single final division, so rescaling a norm rescales the loss and its
/// gradients exactly.
pub fn multitask_loss(
    preds: &[PredictionFrame],
    targets: &FrameTargets<'_>,
    bounds: &ActivationBounds,
    norms: LossNorms,
) -> Result<LossOutput, LossError> {
    validate_inputs(preds, targets)?;
    norms.validate()?;
    let n = preds.len() as f64;
    let speech_frames = targets.vad.iter().filter(|&&v| v).count();

    let mut bce_sum = 0.0;
    let mut snr_sq_sum = 0.0;
    let mut c50_sq_sum = 0.0;
    let mut gradients = vec![FrameGradient::default(); preds.len()];

    for (i, p) in preds.iter().enumerate() {
        let y = f64::from(u8::from(targets.vad[i]));
        bce_sum += bce_from_logit(p.vad_logit, y);
        gradients[i].vad_logit = (logistic(p.vad_logit) - y) / n;

        let c50_diff = bounded_activation(p.c50_raw, bounds.c50) - targets.c50_db[i];
        c50_sq_sum += c50_diff * c50_diff;
        gradients[i].c50_raw = 2.0 * c50_diff * bounded_activation_derivative(p.c50_raw, bounds.c50)
            / n
            / norms.c50;

        if targets.vad[i] {
            let snr_diff = bounded_activation(p.snr_raw, bounds.snr) - targets.snr_db[i];
            snr_sq_sum += snr_diff * snr_diff;
            gradients[i].snr_raw = 2.0
                * snr_diff
                * bounded_activation_derivative(p.snr_raw, bounds.snr)
                / speech_frames as f64
                / norms.snr;
        }
    }

    let l_vad = bce_sum / n;
    let l_snr = if speech_frames == 0 {
        0.0
    } else {
        snr_sq_sum / speech_frames as f64 / norms.snr
    };
    let l_c50 = c50_sq_sum / n / norms.c50;

    Ok(LossOutput {
        losses: LossBundle {
            l_vad,
            l_snr,
            l_c50,
            total: l_vad + l_snr + l_c50,
            norm_snr: norms.snr,
            norm_c50: norms.c50,
        },
        gradients,
        speech_frames,
        zero_speech_batch: speech_frames == 0,
    })
}

/// An owned batch of predictions and targets.
#[derive(Debug, Clone)]
pub struct Batch {
    pub preds: Vec<PredictionFrame>,
    pub vad: Vec<bool>,
    pub snr_db: Vec<f64>,
    pub c50_db: Vec<f64>,
}

impl Batch {
    pub fn targets(&self) -> FrameTargets<'_> {
        FrameTargets {
            vad: &self.vad,
            snr_db: &self.snr_db,
            c50_db: &self.c50_db,
        }
    }
}

/// Result of [`calibrate_norms`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Calibration {
    pub norms: LossNorms,
    /// True when every calibration batch had zero SNR loss, in which case
    /// the SNR norm stays 1 (a no-op).
    pub snr_degenerate: bool,
    pub c50_degenerate: bool,
}

/// Number of batches the normalization pass runs over.
pub const CALIBRATION_BATCHES: usize = 10;

/// Sets each regression norm to the maximum unnormalized loss observed over
/// exactly [`CALIBRATION_BATCHES`] batches, so the normalized calibration
/// losses land in (0, 1] with the maximum at exactly 1.0.
///
/// A task whose maximum is zero (nothing to normalize against) keeps a norm
/// of 1 and logs a warning.
pub fn calibrate_norms(
    batches: &[Batch],
    bounds: &ActivationBounds,
) -> Result<Calibration, LossError> {
    if batches.len() != CALIBRATION_BATCHES {
        return Err(LossError::CalibrationBatchCount(batches.len()));
    }
    let mut max_snr = 0.0f64;
    let mut max_c50 = 0.0f64;
    for batch in batches {
        let out = multitask_loss(&batch.preds, &batch.targets(), bounds, LossNorms::default())?;
        max_snr = max_snr.max(out.losses.l_snr);
        max_c50 = max_c50.max(out.losses.l_c50);
    }
    let snr_degenerate = max_snr == 0.0;
    let c50_degenerate = max_c50 == 0.0;
    if snr_degenerate {
        log::warn!("calibration batches all have zero SNR loss; norm_snr stays 1");
    }
    if c50_degenerate {
        log::warn!("calibration batches all have zero C50 loss; norm_c50 stays 1");
    }
    Ok(Calibration {
        norms: LossNorms {
            snr: if snr_degenerate { 1.0 } else { max_snr },
            c50: if c50_degenerate { 1.0 } else { max_c50 },
        },
        snr_degenerate,
        c50_degenerate,
    })
}

/// Composite validation score: the average of the VAD F-score and the two
/// MAE terms rescaled so 0 error maps to 1 and `max_err` (or worse) to 0.
/// Higher is better; range [0, 1].
///
/// # Panics
///
/// Panics if `f` is outside [0, 1], an MAE is negative, or a max error is
/// not positive — those are caller bugs, not data conditions.
pub fn validation_score(f: f64, mae_snr: f64, mae_c50: f64, max_err: (f64, f64)) -> f64 {
    assert!((0.0..=1.0).contains(&f), "F-score {f} outside [0, 1]");
    assert!(mae_snr >= 0.0 && mae_c50 >= 0.0, "MAE must be non-negative");
    assert!(max_err.0 > 0.0 && max_err.1 > 0.0, "max errors must be positive");
    let snr_ratio = (mae_snr / max_err.0).clamp(0.0, 1.0);
    let c50_ratio = (mae_c50 / max_err.1).clamp(0.0, 1.0);
    (f + (1.0 - snr_ratio) + (1.0 - c50_ratio)) / 3.0
}

/// Central finite-difference gradients of the total loss, treating
/// [`multitask_loss`] as a black box: `(L(x+h) - L(x-h)) / 2h` per raw
/// prediction. This is the reference the analytic gradients are validated
/// against; it exercises none of their code.
pub fn finite_difference_gradients(
    preds: &[PredictionFrame],
    targets: &FrameTargets<'_>,
    bounds: &ActivationBounds,
    norms: LossNorms,
    step: f64,
) -> Result<Vec<FrameGradient>, LossError> {
    let mut work = preds.to_vec();
    let mut out = Vec::with_capacity(preds.len());
    let eval = |work: &[PredictionFrame]| -> Result<f64, LossError> {
        Ok(multitask_loss(work, targets, bounds, norms)?.losses.total)
    };
    for i in 0..preds.len() {
        let mut grad = FrameGradient::default();
        for field in 0..3 {
            let original = match field {
                0 => preds[i].vad_logit,
                1 => preds[i].snr_raw,
                _ => preds[i].c50_raw,
            };
            let set = |work: &mut [PredictionFrame], value: f64| match field {
                0 => work[i].vad_logit = value,
                1 => work[i].snr_raw = value,
                _ => work[i].c50_raw = value,
            };
            set(&mut work, original + step);
            let plus = eval(&work)?;
            set(&mut work, original - step);
            let minus = eval(&work)?;
            set(&mut work, original);
            let d = (plus - minus) / (2.0 * step);
            match field {
                0 => grad.vad_logit = d,
                1 => grad.snr_raw = d,
                _ => grad.c50_raw = d,
            }
        }
        out.push(grad);
    }
    Ok(out)
}

/// Outcome of a randomized analytic-vs-finite-difference sweep.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GradientCheckReport {
    pub batches: usize,
    pub frames_checked: usize,
    pub zero_speech_batches: usize,
    pub max_rel_error_vad: f64,
    pub max_rel_error_snr: f64,
    pub max_rel_error_c50: f64,
    /// Largest |analytic SNR gradient| seen on zero-speech batches; must be
    /// exactly zero (no gradient may leak through the speech mask).
    pub max_snr_grad_on_zero_speech: f64,
}

impl GradientCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.max_rel_error_vad
            .max(self.max_rel_error_snr)
            .max(self.max_rel_error_c50)
    }
}

/// Relative disagreement with a small-magnitude floor: differences below
/// `1e-6` are treated as agreement so that near-zero gradients do not blow
/// up the ratio.
fn relative_error(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff <= 1e-6 {
        0.0
    } else {
        diff / a.abs().max(b.abs())
    }
}

/// Runs `num_batches` random batches (sizes 16–256; every tenth batch has
/// zero speech frames) and compares analytic gradients against central
/// finite differences with step `1e-5`.
pub fn gradient_check(seed: u64, num_batches: usize) -> GradientCheckReport {
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, StandardNormal};

    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let bounds = ActivationBounds::default();
    let mut report = GradientCheckReport {
        batches: num_batches,
        frames_checked: 0,
        zero_speech_batches: 0,
        max_rel_error_vad: 0.0,
        max_rel_error_snr: 0.0,
        max_rel_error_c50: 0.0,
        max_snr_grad_on_zero_speech: 0.0,
    };
    for b in 0..num_batches {
        let size = rng.random_range(16..=256usize);
        let zero_speech = b % 10 == 9;
        let vad: Vec<bool> = (0..size)
            .map(|_| !zero_speech && rng.random::<f64>() < 0.6)
            .collect();
        let snr_db: Vec<f64> = vad
            .iter()
            .map(|&v| {
                if v {
                    rng.random_range(SNR_CLAMP_DB.0..SNR_CLAMP_DB.1)
                } else {
                    f64::NAN
                }
            })
            .collect();
        let c50_db: Vec<f64> = (0..size)
            .map(|_| rng.random_range(C50_CLAMP_DB.0..C50_CLAMP_DB.1))
            .collect();
        let preds: Vec<PredictionFrame> = (0..size)
            .map(|_| PredictionFrame {
                vad_logit: 2.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng),
                snr_raw: 2.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng),
                c50_raw: 2.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng),
            })
            .collect();
        let norms = LossNorms {
            snr: rng.random_range(0.5..500.0),
            c50: rng.random_range(0.5..500.0),
        };
        let targets = FrameTargets { vad: &vad, snr_db: &snr_db, c50_db: &c50_db };
        let analytic = multitask_loss(&preds, &targets, &bounds, norms)
            .expect("generated batch is valid");
        let fd = finite_difference_gradients(&preds, &targets, &bounds, norms, 1e-5)
            .expect("generated batch is valid");

        if zero_speech {
            report.zero_speech_batches += 1;
            for g in &analytic.gradients {
                report.max_snr_grad_on_zero_speech =
                    report.max_snr_grad_on_zero_speech.max(g.snr_raw.abs());
            }
        }
        report.frames_checked += size;
        for (a, f) in analytic.gradients.iter().zip(&fd) {
            report.max_rel_error_vad = report
                .max_rel_error_vad
                .max(relative_error(a.vad_logit, f.vad_logit));
            report.max_rel_error_snr = report
                .max_rel_error_snr
                .max(relative_error(a.snr_raw, f.snr_raw));
            report.max_rel_error_c50 = report
                .max_rel_error_c50
                .max(relative_error(a.c50_raw, f.c50_raw));
        }
    }
    report
}
