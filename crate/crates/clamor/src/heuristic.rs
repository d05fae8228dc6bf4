//! Oracle-VAD heuristic SNR baseline: estimate each speech frame's SNR from
//! windowed mean powers of speech and non-speech frames.
//!
//! The heuristic sees only the mixture, so on speech frames it measures
//! speech-plus-noise power. That gives it a known upward bias of
//! `10·log10(1 + 10^(-x/10))` dB at true SNR `x` — about 0.41 dB at 10 dB
//! and negligible above 20 dB. The bias is documented, not corrected: this
//! is a naive baseline, not an estimator to tune.

use thiserror::Error;

use crate::audio::AudioBuffer;
use crate::contamination::{FrameGrid, SNR_CLAMP_DB};

/// Default analysis window: frames within ±3 s of the target frame.
pub const DEFAULT_HEURISTIC_WINDOW_S: f64 = 6.0;

#[derive(Debug, Error)]
pub enum HeuristicError {
    #[error("window must be positive, got {0} s")]
    InvalidWindow(f64),
    #[error("vad mask has {vad} frames but the grid has {grid}")]
    VadGridMismatch { vad: usize, grid: usize },
    #[error("grid covers {grid_samples} samples but audio has {audio_samples}")]
    GridExceedsAudio { grid_samples: usize, audio_samples: usize },
}

/// Estimator configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeuristicConfig {
    /// Window length in seconds, centered on each speech frame.
    pub window: f64,
    /// Value returned for speech frames whose window contains no non-speech
    /// frame (e.g. fully-speech utterances), in dB.
    pub fallback_db: f64,
}

impl HeuristicConfig {
    pub fn new(window: f64, fallback_db: f64) -> Self {
        Self { window, fallback_db }
    }

    pub fn with_fallback(fallback_db: f64) -> Self {
        Self {
            window: DEFAULT_HEURISTIC_WINDOW_S,
            fallback_db,
        }
    }
}

/// Tally of frames that could not be estimated from window powers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HeuristicDiagnostics {
    /// Speech frames with no non-speech frame in the window (fallback used).
    pub fallback_frames: usize,
    /// Speech frames whose window's noise power was zero (ceiling clamp).
    pub zero_noise_windows: usize,
    /// Speech frames whose window's speech power was zero (floor clamp).
    pub zero_speech_windows: usize,
}

/// Estimates per-frame SNR from the mixture and an oracle VAD mask.
///
/// For each speech frame: speech power is the mean power of speech frames
/// within the window, noise power the mean power of non-speech frames in
/// the same window (edge-clipped, never padded); the estimate is their
/// ratio in dB, clamped to [`SNR_CLAMP_DB`]. Non-speech frames carry `NaN`.
pub fn heuristic_snr(
    audio: &AudioBuffer,
    vad: &[bool],
    grid: &FrameGrid,
    config: &HeuristicConfig,
) -> Result<(Vec<f64>, HeuristicDiagnostics), HeuristicError> {
    if !config.window.is_finite() || config.window <= 0.0 {
        return Err(HeuristicError::InvalidWindow(config.window));
    }
    if vad.len() != grid.num_frames() {
        return Err(HeuristicError::VadGridMismatch {
            vad: vad.len(),
            grid: grid.num_frames(),
        });
    }
    let grid_samples = grid.num_frames() * grid.samples_per_frame();
    if grid_samples > audio.len() {
        return Err(HeuristicError::GridExceedsAudio {
            grid_samples,
            audio_samples: audio.len(),
        });
    }

    let num_frames = grid.num_frames();
    let samples = audio.samples();

    // Mean power of each frame, then prefix sums split by VAD class so each
    // window query is O(1).
    let mut cum_speech_power = vec![0.0f64; num_frames + 1];
    let mut cum_speech_count = vec![0usize; num_frames + 1];
    let mut cum_noise_power = vec![0.0f64; num_frames + 1];
    let mut cum_noise_count = vec![0usize; num_frames + 1];
    for k in 0..num_frames {
        let (start, end) = grid.frame_span(k);
        let power: f64 = samples[start..end].iter().map(|s| s * s).sum::<f64>()
            / (end - start) as f64;
        let speech = vad[k];
        cum_speech_power[k + 1] = cum_speech_power[k] + if speech { power } else { 0.0 };
        cum_speech_count[k + 1] = cum_speech_count[k] + usize::from(speech);
        cum_noise_power[k + 1] = cum_noise_power[k] + if speech { 0.0 } else { power };
        cum_noise_count[k + 1] = cum_noise_count[k] + usize::from(!speech);
    }

    // A frame j is inside the window of frame k when |j - k| frames span at
    // most half the window.
    let frame_duration = grid.samples_per_frame() as f64 / audio.sample_rate() as f64;
    let half_frames = (config.window / 2.0 / frame_duration).floor() as usize;

    let mut out = Vec::with_capacity(num_frames);
    let mut diagnostics = HeuristicDiagnostics::default();
    for k in 0..num_frames {
        if !vad[k] {
            out.push(f64::NAN);
            continue;
        }
        let lo = k.saturating_sub(half_frames);
        let hi = (k + half_frames + 1).min(num_frames);
        let noise_count = cum_noise_count[hi] - cum_noise_count[lo];
        if noise_count == 0 {
            out.push(config.fallback_db);
            diagnostics.fallback_frames += 1;
            continue;
        }
        let speech_count = cum_speech_count[hi] - cum_speech_count[lo];
        debug_assert!(speech_count > 0, "frame {k} is speech, so its window has one");
        let p_speech = (cum_speech_power[hi] - cum_speech_power[lo]) / speech_count as f64;
        let p_noise = (cum_noise_power[hi] - cum_noise_power[lo]) / noise_count as f64;
        if p_speech <= 0.0 {
            out.push(SNR_CLAMP_DB.0);
            diagnostics.zero_speech_windows += 1;
            continue;
        }
        if p_noise <= 0.0 {
            out.push(SNR_CLAMP_DB.1);
            diagnostics.zero_noise_windows += 1;
            continue;
        }
        let snr = 10.0 * (p_speech / p_noise).log10();
        out.push(snr.clamp(SNR_CLAMP_DB.0, SNR_CLAMP_DB.1));
    }
    Ok((out, diagnostics))
}

/// The heuristic's inherent bias at true SNR `x` dB: it reports
/// `x + 10·log10(1 + 10^(-x/10))` on stationary mixtures because speech
/// frames contain the noise as well.
pub fn heuristic_bias_db(true_snr_db: f64) -> f64 {
    10.0 * (1.0 + 10f64.powf(-true_snr_db / 10.0)).log10()
}
