//! Room impulse response analysis: direct-path onset detection, the C50
//! speech-clarity measure, and synthetic exponential-decay responses for
//! testing.
//!
//! C50 is the ratio, in dB, of the energy in the first 50 ms after the
//! direct-path arrival to everything that comes later. Anchoring the window
//! at the detected onset (rather than at sample zero) makes the measure
//! invariant to propagation delay.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::audio::{AudioBuffer, PIPELINE_SAMPLE_RATE};

/// Length of the "early" energy window in seconds.
pub const EARLY_WINDOW_S: f64 = 0.050;

/// Onset threshold as a fraction of the peak magnitude (−20 dB relative).
pub const ONSET_THRESHOLD: f64 = 0.1;

/// Clamp range for C50 labels in dB. Zero-late-energy (anechoic) responses
/// map to the upper clamp instead of +infinity.
pub const C50_CLAMP_DB: (f64, f64) = (-10.0, 60.0);

#[derive(Debug, Error)]
pub enum RirError {
    #[error("silent impulse response")]
    SilentImpulseResponse,
    #[error("tau must be positive, got {0}")]
    NonPositiveTau(f64),
    #[error("duration must be positive, got {0}")]
    NonPositiveDuration(f64),
    #[error("delay must be non-negative, got {0}")]
    NegativeDelay(f64),
    #[error("delay {delay} s leaves no samples within duration {duration} s")]
    DelayConsumesDuration { delay: f64, duration: f64 },
}

/// Speech clarity in decibels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClarityValue {
    pub c50_db: f64,
}

impl ClarityValue {
    /// The value clamped to the label range [`C50_CLAMP_DB`], which is what
    /// the pipeline stores as ground truth.
    pub fn clamped_label(self) -> ClarityValue {
        ClarityValue {
            c50_db: self.c50_db.clamp(C50_CLAMP_DB.0, C50_CLAMP_DB.1),
        }
    }
}

/// An impulse response together with its cached direct-path onset.
///
/// Construction runs onset detection, so holding a value of this type
/// guarantees the response is non-silent and `onset_index` is in range.
#[derive(Debug, Clone, PartialEq)]
pub struct RoomImpulseResponse {
    ir: AudioBuffer,
    onset_index: usize,
}

impl RoomImpulseResponse {
    pub fn new(ir: AudioBuffer) -> Result<Self, RirError> {
        let onset_index = detect_onset(&ir)?;
        Ok(Self { ir, onset_index })
    }

    pub fn ir(&self) -> &AudioBuffer {
        &self.ir
    }

    pub fn onset_index(&self) -> usize {
        self.onset_index
    }
}

/// First index whose magnitude reaches [`ONSET_THRESHOLD`] of the peak.
pub fn detect_onset(ir: &AudioBuffer) -> Result<usize, RirError> {
    let peak = ir.samples().iter().fold(0.0f64, |acc, s| acc.max(s.abs()));
    if peak == 0.0 {
        return Err(RirError::SilentImpulseResponse);
    }
    let threshold = ONSET_THRESHOLD * peak;
    ir.samples()
        .iter()
        .position(|s| s.abs() >= threshold)
        .ok_or(RirError::SilentImpulseResponse)
}

/// C50: early-to-late energy ratio in dB, with the early window anchored at
/// the detected onset.
///
/// The window boundary sample at `onset + N50` belongs to the late window
/// (the early window is half-open). Responses with zero late energy return
/// the upper clamp of [`C50_CLAMP_DB`].
///
/// Infallible by construction: a valid [`RoomImpulseResponse`] has a
/// super-threshold onset sample, so early energy is always positive.
pub fn compute_c50(rir: &RoomImpulseResponse) -> ClarityValue {
    let samples = rir.ir().samples();
    let onset = rir.onset_index();
    let n50 = (EARLY_WINDOW_S * rir.ir().sample_rate() as f64).round() as usize;
    let split = (onset + n50).min(samples.len());

    let early: f64 = samples[onset..split].iter().map(|s| s * s).sum();
    let late: f64 = samples[split..].iter().map(|s| s * s).sum();

    if late == 0.0 {
        return ClarityValue { c50_db: C50_CLAMP_DB.1 };
    }
    ClarityValue {
        c50_db: 10.0 * (early / late).log10(),
    }
}

/// Closed-form C50 for a response whose squared-amplitude envelope is
/// `e^(-t/tau)`, assuming an infinite tail: `10·log10(e^(0.050/tau) - 1)`.
///
/// Used as the analytic oracle for [`synth_exponential_rir`].
pub fn exponential_envelope_c50(tau: f64) -> f64 {
    10.0 * ((EARLY_WINDOW_S / tau).exp() - 1.0).log10()
}

/// Samples per normalization block in [`synth_exponential_rir`]; divides the
/// 800-sample early window evenly at 16 kHz.
const ENVELOPE_BLOCK: usize = 50;

/// Synthesizes a Gaussian-noise impulse response whose squared-amplitude
/// envelope is `e^(-t/tau)` starting at `delay`, at the pipeline rate.
///
/// The noise is renormalized in short blocks so each block carries exactly
/// the envelope's energy; this pins the measured C50 to the closed form
/// [`exponential_envelope_c50`] far more tightly than raw i.i.d. draws
/// would, while keeping the fine structure random. Deterministic for a
/// given seed.
pub fn synth_exponential_rir(
    tau: f64,
    duration: f64,
    delay: f64,
    seed: u64,
) -> Result<RoomImpulseResponse, RirError> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(RirError::NonPositiveTau(tau));
    }
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(RirError::NonPositiveDuration(duration));
    }
    if !(delay >= 0.0) || !delay.is_finite() {
        return Err(RirError::NegativeDelay(delay));
    }
    let rate = PIPELINE_SAMPLE_RATE;
    let len = (duration * rate as f64).round() as usize;
    let start = (delay * rate as f64).round() as usize;
    if start >= len {
        return Err(RirError::DelayConsumesDuration { delay, duration });
    }

    // Envelope decay constant in samples: squared amplitude at sample i
    // (relative to the delay) is e^(-i/s).
    let s = tau * rate as f64;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let active = len - start;
    let noise: Vec<f64> = (0..active)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();

    let mut samples = vec![0.0; len];
    let mut block_start = 0usize;
    while block_start < active {
        let block_end = (block_start + ENVELOPE_BLOCK).min(active);
        let target: f64 = (block_start..block_end).map(|i| (-(i as f64) / s).exp()).sum();
        let raw: f64 = noise[block_start..block_end].iter().map(|g| g * g).sum();
        if raw > 0.0 {
            let scale = (target / raw).sqrt();
            for i in block_start..block_end {
                samples[start + i] = noise[i] * scale;
            }
        } else {
            // Degenerate all-zero block (probability ~0): fall back to the
            // deterministic envelope amplitude.
            for i in block_start..block_end {
                samples[start + i] = (-(i as f64) / (2.0 * s)).exp();
            }
        }
        block_start = block_end;
    }

    let buffer = AudioBuffer::new(samples, rate).expect("synthesized samples are finite");
    RoomImpulseResponse::new(buffer)
}
