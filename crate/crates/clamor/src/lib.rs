//! Synthesis and evaluation tooling for joint voice-activity, SNR, and
//! room-acoustics (C50) estimation from audio.
//!
//! The crate builds labeled training corpora by contaminating clean speech
//! with real noise and room impulse responses, producing three exact
//! ground-truth tracks per utterance:
//!
//! - a frame-level speech/non-speech mask on a 16 ms grid,
//! - a frame-level signal-to-noise ratio measured from the stored speech
//!   and noise components with a 2-second sliding window, and
//! - an utterance-level C50 speech-clarity value computed from the applied
//!   impulse response.
//!
//! Around that pipeline it provides the matching evaluation stack
//! (precision/recall/F-score for detection, clamped MAE for regression,
//! conditioned distributions, and quantile-bin reports), a windowed-power
//! heuristic SNR estimator that serves as a classical baseline, and a
//! multi-task loss kernel with bounded activations and analytic gradients
//! verified against finite differences.
//!
//! # Layout
//!
//! | Module | Contents |
//! |---|---|
//! | [`audio`] | `AudioBuffer`, power measurement, gain, convolution |
//! | [`activity`] | Speech regions and sample/frame rasterization |
//! | [`wav`] | Float32/PCM16 mono WAV reading and float32 writing |
//! | [`rir`] | C50 analysis and synthetic impulse-response generation |
//! | [`contamination`] | The corpus-synthesis pipeline and its recipes |
//! | [`heuristic`] | The oracle-VAD windowed-power SNR baseline |
//! | [`loss`] | Multi-task objective, gradients, norm calibration |
//! | [`metrics`] | F-score, MAE, distributions, quantile reports |
//! | [`corpus`] | Manifests, RTTM/CSV formats, splits, parallel runner |
//!
//! # Example
//!
//! Measure the speech clarity of a synthetic room impulse response:
//!
//! ```
//! use clamor::rir::{compute_c50, exponential_envelope_c50, synth_exponential_rir};
//!
//! // A room whose energy decays by half every 50 ms has C50 = 0 dB.
//! let tau = 0.050 / std::f64::consts::LN_2;
//! let rir = synth_exponential_rir(tau, 1.0, 0.0, 7)?;
//! let measured = compute_c50(&rir);
//! let ideal = exponential_envelope_c50(tau);
//! assert!((measured.c50_db - ideal).abs() < 0.3);
//! # Ok::<(), clamor::rir::RirError>(())
//! ```

pub mod activity;
pub mod audio;
pub mod contamination;
pub mod corpus;
pub mod heuristic;
pub mod loss;
pub mod metrics;
pub mod rir;
pub mod wav;

pub use activity::{Region, SpeechActivity};
pub use audio::{AudioBuffer, PIPELINE_SAMPLE_RATE};
pub use contamination::{
    contaminate, AssetStore, ContaminationOutput, ContaminationRecipe, FrameGrid,
    LabeledUtterance, RecipeParams,
};
pub use corpus::{run_synthesis, CorpusManifest, RunConfig, RunSummary, Split};
pub use heuristic::{heuristic_snr, HeuristicConfig};
pub use loss::{calibrate_norms, multitask_loss, ActivationBounds, LossNorms, PredictionFrame};
pub use metrics::{bin_report, mae, vad_fscore, DetectionCounts};
pub use rir::{compute_c50, synth_exponential_rir, ClarityValue, RoomImpulseResponse};
pub use wav::{read_wav, write_wav};

/// Compiles and runs every code block in the guide (`book/`) as doctests,
/// so the documentation cannot drift from the library.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/audio-and-activity.md")]
    mod audio_and_activity {}
    #[doc = include_str!("../../../book/src/speech-clarity.md")]
    mod speech_clarity {}
    #[doc = include_str!("../../../book/src/contamination.md")]
    mod contamination {}
    #[doc = include_str!("../../../book/src/snr-estimation.md")]
    mod snr_estimation {}
    #[doc = include_str!("../../../book/src/multitask-loss.md")]
    mod multitask_loss {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/command-line.md")]
    mod command_line {}
}
