//! The contamination pipeline: extend clean speech with silence, reverberate
//! speech and noise independently with probability `p_rir`, mix at a target
//! SNR, and emit exact frame-level VAD/SNR labels plus the utterance-level
//! C50 of the speech-side impulse response.
//!
//! Everything here is a pure function of its inputs plus a recipe; recipes
//! are drawn from per-utterance seeded generators derived by hashing
//! `(master_seed, utterance_id, context)`, so corpus order and worker
//! parallelism can never change an output.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::activity::{ActivityError, Region, SpeechActivity};
use crate::audio::{self, AudioBuffer, AudioError};
use crate::rir::{compute_c50, ClarityValue, RirError, RoomImpulseResponse, C50_CLAMP_DB};

/// Label and evaluation resolution in seconds (256 samples at 16 kHz).
pub const FRAME_DURATION_S: f64 = 0.016;

/// Length of the sliding window used to recompute frame-level SNR, seconds.
pub const SNR_WINDOW_S: f64 = 2.0;

/// Clamp range for frame SNR labels in dB.
pub const SNR_CLAMP_DB: (f64, f64) = (-15.0, 80.0);

/// Default probability that each of speech and noise gets reverberated.
pub const DEFAULT_P_RIR: f64 = 0.9;

/// Default range the per-utterance target SNR is drawn from, dB.
pub const DEFAULT_SNR_RANGE_DB: (f64, f64) = (0.0, 30.0);

/// Default non-speech fraction ensured by silence extension.
pub const DEFAULT_NS_RATIO: f64 = 0.3;

#[derive(Debug, Error)]
pub enum ContaminationError {
    #[error("utterance {utterance_id}: {source}")]
    Utterance {
        utterance_id: String,
        #[source]
        source: Box<ContaminationError>,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Activity(#[from] ActivityError),
    #[error(transparent)]
    Rir(#[from] RirError),
    #[error("p_rir must lie in [0, 1], got {0}")]
    InvalidPRir(f64),
    #[error("SNR range must be finite with low <= high, got [{0}, {1}]")]
    InvalidSnrRange(f64, f64),
    #[error("non-speech ratio must lie in [0, 1), got {0}")]
    InvalidNsRatio(f64),
    #[error("target SNR {target} dB outside the recipe range [{low}, {high}] dB")]
    TargetOutsideRange { target: f64, low: f64, high: f64 },
    #[error("frame duration {0} s yields no samples per frame")]
    InvalidFrameDuration(f64),
    #[error("window must be positive, got {0} s")]
    InvalidWindow(f64),
    #[error("length mismatch: speech {speech} vs noise {noise} samples")]
    LengthMismatch { speech: usize, noise: usize },
    #[error("noise ({noise} samples) is shorter than speech ({speech} samples)")]
    NoiseShorterThanSpeech { noise: usize, speech: usize },
    #[error("zero speech power over the active samples")]
    ZeroSpeechPower,
    #[error("zero noise power over the mixing span")]
    ZeroNoisePower,
    #[error("target SNR {0} dB produces a non-representable noise gain")]
    UnrepresentableGain(f64),
    #[error("unknown noise asset '{0}'")]
    UnknownNoise(String),
    #[error("unknown RIR asset '{0}'")]
    UnknownRir(String),
    #[error("duplicate asset id '{0}'")]
    DuplicateAssetId(String),
    #[error("noise asset '{0}' is empty")]
    EmptyNoiseAsset(String),
    #[error("no noise assets available to draw from")]
    NoNoiseAssets,
    #[error("p_rir > 0 but no RIR assets available to draw from")]
    NoRirAssets,
}

/// Derives a per-utterance, per-purpose seed from the corpus master seed.
///
/// Hashing `(master_seed, utterance_id, context)` gives every utterance an
/// independent stream for each randomized decision ("recipe", "silence",
/// "noise-crop", ...), which is what makes synthesis order- and
/// parallelism-independent.
pub fn derive_seed(master_seed: u64, utterance_id: &str, context: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(utterance_id.as_bytes());
    hasher.update([0u8]);
    hasher.update(context.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

fn derive_rng(master_seed: u64, utterance_id: &str, context: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(master_seed, utterance_id, context))
}

/// Fixed-duration frame grid over a signal.
///
/// Frame `k` covers `[k*frame_duration, (k+1)*frame_duration)`; a trailing
/// partial frame is dropped, so `num_frames = floor(duration / frame_duration)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameGrid {
    samples_per_frame: usize,
    num_frames: usize,
}

impl FrameGrid {
    pub fn new(
        frame_duration: f64,
        sample_rate: u32,
        num_samples: usize,
    ) -> Result<Self, ContaminationError> {
        if !frame_duration.is_finite() || frame_duration <= 0.0 {
            return Err(ContaminationError::InvalidFrameDuration(frame_duration));
        }
        let samples_per_frame = (frame_duration * sample_rate as f64).round() as usize;
        if samples_per_frame == 0 {
            return Err(ContaminationError::InvalidFrameDuration(frame_duration));
        }
        Ok(Self {
            samples_per_frame,
            num_frames: num_samples / samples_per_frame,
        })
    }

    /// The default 16 ms grid over a buffer.
    pub fn for_buffer(buffer: &AudioBuffer) -> Self {
        Self::new(FRAME_DURATION_S, buffer.sample_rate(), buffer.len())
            .expect("default frame duration is valid")
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn samples_per_frame(&self) -> usize {
        self.samples_per_frame
    }

    /// Half-open sample range covered by frame `k`.
    pub fn frame_span(&self, frame: usize) -> (usize, usize) {
        let start = frame * self.samples_per_frame;
        (start, start + self.samples_per_frame)
    }

    /// Center sample of frame `k`, where the SNR window is anchored.
    pub fn frame_center_sample(&self, frame: usize) -> usize {
        frame * self.samples_per_frame + self.samples_per_frame / 2
    }

    /// Frame onset in seconds.
    pub fn frame_onset(&self, frame: usize, sample_rate: u32) -> f64 {
        (frame * self.samples_per_frame) as f64 / sample_rate as f64
    }

    /// Rasterizes speech activity onto the grid: a frame is speech iff
    /// strictly more than half of its samples fall in a speech region.
    pub fn rasterize(&self, activity: &SpeechActivity, sample_rate: u32) -> Vec<bool> {
        let mut overlap = vec![0usize; self.num_frames];
        let covered = self.num_frames * self.samples_per_frame;
        for region in activity.regions() {
            let (start, end) = SpeechActivity::sample_span(region, sample_rate, covered);
            if start >= end {
                continue;
            }
            let first = start / self.samples_per_frame;
            let last = (end - 1) / self.samples_per_frame;
            for k in first..=last {
                let (fs, fe) = self.frame_span(k);
                overlap[k] += end.min(fe) - start.max(fs);
            }
        }
        overlap.iter().map(|&o| 2 * o > self.samples_per_frame).collect()
    }
}

/// Tunable knobs for drawing recipes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecipeParams {
    pub p_rir: f64,
    pub snr_range_db: (f64, f64),
    pub ns_ratio: f64,
}

impl Default for RecipeParams {
    fn default() -> Self {
        Self {
            p_rir: DEFAULT_P_RIR,
            snr_range_db: DEFAULT_SNR_RANGE_DB,
            ns_ratio: DEFAULT_NS_RATIO,
        }
    }
}

impl RecipeParams {
    pub fn validate(&self) -> Result<(), ContaminationError> {
        if !self.p_rir.is_finite() || !(0.0..=1.0).contains(&self.p_rir) {
            return Err(ContaminationError::InvalidPRir(self.p_rir));
        }
        let (low, high) = self.snr_range_db;
        if !low.is_finite() || !high.is_finite() || low > high {
            return Err(ContaminationError::InvalidSnrRange(low, high));
        }
        if !self.ns_ratio.is_finite() || !(0.0..1.0).contains(&self.ns_ratio) {
            return Err(ContaminationError::InvalidNsRatio(self.ns_ratio));
        }
        Ok(())
    }
}

/// Everything needed to reproduce one contaminated utterance bit for bit.
///
/// The optional RIR ids are `None` exactly when the corresponding
/// Bernoulli(`p_rir`) draw came up false. Serialization order is the struct
/// order, so the JSON form is canonical and hashable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContaminationRecipe {
    pub utterance_id: String,
    pub master_seed: u64,
    pub p_rir: f64,
    pub speech_rir_id: Option<String>,
    pub noise_rir_id: Option<String>,
    pub noise_id: String,
    pub target_snr_db: f64,
    pub snr_range_db: (f64, f64),
    pub ns_ratio: f64,
}

impl ContaminationRecipe {
    /// Draws a recipe for one utterance. The draw order (speech RIR
    /// Bernoulli and index, noise RIR Bernoulli and index, noise index,
    /// target SNR) is fixed and versioned by this function.
    pub fn draw(
        utterance_id: &str,
        master_seed: u64,
        params: &RecipeParams,
        noise_ids: &[String],
        rir_ids: &[String],
    ) -> Result<Self, ContaminationError> {
        params.validate()?;
        if noise_ids.is_empty() {
            return Err(ContaminationError::NoNoiseAssets);
        }
        if params.p_rir > 0.0 && rir_ids.is_empty() {
            return Err(ContaminationError::NoRirAssets);
        }
        let mut rng = derive_rng(master_seed, utterance_id, "recipe");
        let draw_rir = |rng: &mut ChaCha12Rng| -> Option<String> {
            if rng.random::<f64>() < params.p_rir {
                Some(rir_ids[rng.random_range(0..rir_ids.len())].clone())
            } else {
                None
            }
        };
        let speech_rir_id = draw_rir(&mut rng);
        let noise_rir_id = draw_rir(&mut rng);
        let noise_id = noise_ids[rng.random_range(0..noise_ids.len())].clone();
        let (low, high) = params.snr_range_db;
        let target_snr_db = if low == high { low } else { rng.random_range(low..high) };
        Ok(Self {
            utterance_id: utterance_id.to_string(),
            master_seed,
            p_rir: params.p_rir,
            speech_rir_id,
            noise_rir_id,
            noise_id: noise_id.clone(),
            target_snr_db,
            snr_range_db: params.snr_range_db,
            ns_ratio: params.ns_ratio,
        })
    }

    pub fn validate(&self) -> Result<(), ContaminationError> {
        let params = RecipeParams {
            p_rir: self.p_rir,
            snr_range_db: self.snr_range_db,
            ns_ratio: self.ns_ratio,
        };
        params.validate()?;
        let (low, high) = self.snr_range_db;
        if !(low..=high).contains(&self.target_snr_db) {
            return Err(ContaminationError::TargetOutsideRange {
                target: self.target_snr_db,
                low,
                high,
            });
        }
        Ok(())
    }

    /// Canonical JSON form: field order fixed by the struct, floats in
    /// shortest-roundtrip notation.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("recipe serializes to JSON")
    }

    /// Hex SHA-256 of the canonical JSON; changing any knob changes the
    /// hash, which is what invalidates stale outputs on resume.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        let mut out = String::with_capacity(64);
        for byte in digest {
            use std::fmt::Write;
            write!(out, "{byte:02x}").expect("writing to String cannot fail");
        }
        out
    }
}

/// A contaminated utterance with its exact labels.
///
/// `snr_db` is aligned with `vad` on the 16 ms grid of `audio`; non-speech
/// frames carry `NaN` (the SNR is undefined there). Every speech frame's
/// value is finite and clamped to [`SNR_CLAMP_DB`].
#[derive(Debug, Clone)]
pub struct LabeledUtterance {
    pub audio: AudioBuffer,
    pub vad: Vec<bool>,
    pub snr_db: Vec<f64>,
    pub c50: ClarityValue,
    pub recipe: ContaminationRecipe,
}

/// Tally of clamp events during frame-SNR recomputation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSnrDiagnostics {
    /// Speech frames whose window held zero active speech power (floored).
    pub zero_speech_windows: usize,
    /// Speech frames whose window held zero noise power (ceilinged).
    pub zero_noise_windows: usize,
}

/// Full output of [`contaminate`]: the labeled mixture plus the stored
/// components the labels were measured from, for round-trip verification.
#[derive(Debug, Clone)]
pub struct ContaminationOutput {
    pub utterance: LabeledUtterance,
    /// s2: silence-extended, possibly reverberated speech.
    pub speech_component: AudioBuffer,
    /// g·n2: the noise that was actually added to form the mixture.
    pub noise_component: AudioBuffer,
    /// Speech segmentation after silence extension.
    pub activity: SpeechActivity,
    pub noise_gain: f64,
    pub diagnostics: FrameSnrDiagnostics,
}

/// Read-only collection of noise recordings and impulse responses,
/// resolved by id. Immutable once loaded, so it is shared freely across
/// synthesis workers.
#[derive(Debug, Default)]
pub struct AssetStore {
    noises: HashMap<String, AudioBuffer>,
    rirs: HashMap<String, RoomImpulseResponse>,
}

impl AssetStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_noise(
        &mut self,
        id: impl Into<String>,
        buffer: AudioBuffer,
    ) -> Result<(), ContaminationError> {
        let id = id.into();
        if self.noises.contains_key(&id) {
            return Err(ContaminationError::DuplicateAssetId(id));
        }
        if buffer.is_empty() {
            return Err(ContaminationError::EmptyNoiseAsset(id));
        }
        self.noises.insert(id, buffer);
        Ok(())
    }

    pub fn insert_rir(
        &mut self,
        id: impl Into<String>,
        rir: RoomImpulseResponse,
    ) -> Result<(), ContaminationError> {
        let id = id.into();
        if self.rirs.contains_key(&id) {
            return Err(ContaminationError::DuplicateAssetId(id));
        }
        self.rirs.insert(id, rir);
        Ok(())
    }

    pub fn noise(&self, id: &str) -> Result<&AudioBuffer, ContaminationError> {
        self.noises
            .get(id)
            .ok_or_else(|| ContaminationError::UnknownNoise(id.to_string()))
    }

    pub fn rir(&self, id: &str) -> Result<&RoomImpulseResponse, ContaminationError> {
        self.rirs
            .get(id)
            .ok_or_else(|| ContaminationError::UnknownRir(id.to_string()))
    }

    /// Noise ids in sorted order (stable regardless of insertion order).
    pub fn noise_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.noises.keys().cloned().collect();
        ids.sort();
        ids
    }

    /// RIR ids in sorted order.
    pub fn rir_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.rirs.keys().cloned().collect();
        ids.sort();
        ids
    }
}

/// Inserts zero-valued gaps at region boundaries until the non-speech
/// fraction reaches `target_ns_ratio`.
///
/// Gap positions are the existing region boundaries; the total inserted
/// length is spread over them with seeded random weights. Original samples
/// are preserved in order, and region boundaries in the output are snapped
/// to the sample grid so the shifted activity rasterizes to exactly the
/// shifted sample spans. Returns the input unchanged when the ratio is
/// already satisfied (or when there is no speech at all, in which case the
/// ratio cannot be raised by adding silence).
pub fn extend_with_silence(
    speech: &AudioBuffer,
    activity: &SpeechActivity,
    target_ns_ratio: f64,
    seed: u64,
) -> Result<(AudioBuffer, SpeechActivity), ContaminationError> {
    if !target_ns_ratio.is_finite() || !(0.0..1.0).contains(&target_ns_ratio) {
        return Err(ContaminationError::InvalidNsRatio(target_ns_ratio));
    }
    activity.check_within(speech.duration(), speech.sample_rate())?;

    let len = speech.len();
    let rate = speech.sample_rate();
    let speech_samples = activity.active_samples(len, rate);
    if len == 0 || speech_samples == 0 {
        return Ok((speech.clone(), activity.clone()));
    }
    let non_speech = len - speech_samples;
    if non_speech as f64 >= target_ns_ratio * len as f64 {
        return Ok((speech.clone(), activity.clone()));
    }

    // Smallest total length whose non-speech fraction reaches the target,
    // with a guard against the division rounding the requirement down.
    let mut required = (speech_samples as f64 / (1.0 - target_ns_ratio)).ceil() as usize;
    if (required as f64) * (1.0 - target_ns_ratio) < speech_samples as f64 {
        required += 1;
    }
    let insert_total = required - len;

    // Candidate gap positions: every region boundary, in samples.
    let mut candidates: Vec<usize> = Vec::with_capacity(activity.regions().len() * 2);
    for region in activity.regions() {
        let (start, end) = SpeechActivity::sample_span(region, rate, len);
        candidates.push(start);
        candidates.push(end);
    }
    candidates.sort_unstable();
    candidates.dedup();

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let weights: Vec<f64> = candidates.iter().map(|_| rng.random::<f64>()).collect();
    let allocations = largest_remainder_allocation(&weights, insert_total);

    // Splice the gaps in.
    let mut samples = Vec::with_capacity(required);
    let mut cursor = 0usize;
    for (&position, &gap) in candidates.iter().zip(&allocations) {
        samples.extend_from_slice(&speech.samples()[cursor..position]);
        samples.extend(std::iter::repeat(0.0).take(gap));
        cursor = position;
    }
    samples.extend_from_slice(&speech.samples()[cursor..]);
    debug_assert_eq!(samples.len(), required);

    // Shift regions by the silence inserted at or before their onset.
    let mut shifted = Vec::with_capacity(activity.regions().len());
    let mut cumulative: Vec<usize> = Vec::with_capacity(allocations.len() + 1);
    let mut acc = 0usize;
    cumulative.push(0);
    for &gap in &allocations {
        acc += gap;
        cumulative.push(acc);
    }
    for region in activity.regions() {
        let (start, end) = SpeechActivity::sample_span(region, rate, len);
        let inserted_before = cumulative[candidates.partition_point(|&p| p <= start)];
        shifted.push(Region::new(
            (start + inserted_before) as f64 / rate as f64,
            (end + inserted_before) as f64 / rate as f64,
        ));
    }

    let extended = AudioBuffer::from_validated(samples, rate);
    let activity = SpeechActivity::new(shifted)?;
    Ok((extended, activity))
}

/// Splits `total` units across slots proportionally to `weights` using
/// largest-remainder rounding (ties to the earlier slot), so the parts
/// always sum to `total` exactly.
fn largest_remainder_allocation(weights: &[f64], total: usize) -> Vec<usize> {
    assert!(!weights.is_empty(), "allocation needs at least one slot");
    let weight_sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = if weight_sum > 0.0 {
        weights.iter().map(|w| w / weight_sum * total as f64).collect()
    } else {
        vec![total as f64 / weights.len() as f64; weights.len()]
    };
    let mut base: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = base.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &slot in order.iter().take(total - assigned) {
        base[slot] += 1;
    }
    base
}

/// Scales noise to hit `target_snr_db` against the speech and mixes.
///
/// Speech power is measured over speech-active samples only; noise power
/// over the full span the speech occupies. Returns the mixture and the
/// linear noise gain `g`, so callers can store `g·noise` alongside.
pub fn mix_at_snr(
    speech: &AudioBuffer,
    activity: &SpeechActivity,
    noise: &AudioBuffer,
    target_snr_db: f64,
) -> Result<(AudioBuffer, f64), ContaminationError> {
    if speech.sample_rate() != noise.sample_rate() {
        return Err(AudioError::SampleRateMismatch {
            left: speech.sample_rate(),
            right: noise.sample_rate(),
        }
        .into());
    }
    if noise.len() < speech.len() {
        return Err(ContaminationError::NoiseShorterThanSpeech {
            noise: noise.len(),
            speech: speech.len(),
        });
    }
    let len = speech.len();
    let rate = speech.sample_rate();
    let mask = activity.sample_mask(len, rate);
    let p_speech = match audio::mean_power(speech, Some(&mask)) {
        Some(p) if p > 0.0 => p,
        _ => return Err(ContaminationError::ZeroSpeechPower),
    };
    let noise_span = &noise.samples()[..len];
    let p_noise = {
        let sum: f64 = noise_span.iter().map(|n| n * n).sum();
        sum / len as f64
    };
    if p_noise <= 0.0 {
        return Err(ContaminationError::ZeroNoisePower);
    }
    let gain = (p_speech / (p_noise * 10f64.powf(target_snr_db / 10.0))).sqrt();
    if !gain.is_finite() || gain == 0.0 {
        return Err(ContaminationError::UnrepresentableGain(target_snr_db));
    }
    // `s + (g*n)` with the product rounded first, so the mixture equals
    // speech plus apply_gain(noise, g) bit for bit.
    let samples: Vec<f64> = speech
        .samples()
        .iter()
        .zip(noise_span)
        .map(|(s, n)| s + gain * n)
        .collect();
    Ok((AudioBuffer::from_validated(samples, rate), gain))
}

/// Recomputes SNR per 16 ms frame with a sliding window centered on each
/// frame.
///
/// For each speech frame, speech power is the mean square of `speech_rev`
/// over speech-active samples inside the window and noise power is the mean
/// square of `noise_scaled` over the whole (edge-clipped) window. Non-speech
/// frames carry `NaN`. Values clamp to [`SNR_CLAMP_DB`]; windows with zero
/// active speech power floor at the low clamp and windows with zero noise
/// power ceiling at the high clamp, each counted in the diagnostics.
pub fn frame_snr(
    speech_rev: &AudioBuffer,
    noise_scaled: &AudioBuffer,
    activity: &SpeechActivity,
    grid: &FrameGrid,
    window: f64,
) -> Result<(Vec<f64>, FrameSnrDiagnostics), ContaminationError> {
    if speech_rev.sample_rate() != noise_scaled.sample_rate() {
        return Err(AudioError::SampleRateMismatch {
            left: speech_rev.sample_rate(),
            right: noise_scaled.sample_rate(),
        }
        .into());
    }
    if speech_rev.len() != noise_scaled.len() {
        return Err(ContaminationError::LengthMismatch {
            speech: speech_rev.len(),
            noise: noise_scaled.len(),
        });
    }
    if !window.is_finite() || window <= 0.0 {
        return Err(ContaminationError::InvalidWindow(window));
    }

    let len = speech_rev.len();
    let rate = speech_rev.sample_rate();
    let mask = activity.sample_mask(len, rate);
    let vad = grid.rasterize(activity, rate);

    // Prefix sums make each window O(1); at corpus-realistic lengths the
    // cancellation error stays orders of magnitude under the label tolerances.
    let mut cum_speech_sq = vec![0.0f64; len + 1];
    let mut cum_active = vec![0usize; len + 1];
    let mut cum_noise_sq = vec![0.0f64; len + 1];
    let speech_samples = speech_rev.samples();
    let noise_samples = noise_scaled.samples();
    for i in 0..len {
        cum_speech_sq[i + 1] = cum_speech_sq[i]
            + if mask[i] { speech_samples[i] * speech_samples[i] } else { 0.0 };
        cum_active[i + 1] = cum_active[i] + usize::from(mask[i]);
        cum_noise_sq[i + 1] = cum_noise_sq[i] + noise_samples[i] * noise_samples[i];
    }

    let half = (window / 2.0 * rate as f64).round() as usize;
    let mut out = Vec::with_capacity(grid.num_frames());
    let mut diagnostics = FrameSnrDiagnostics::default();
    for k in 0..grid.num_frames() {
        if !vad[k] {
            out.push(f64::NAN);
            continue;
        }
        let center = grid.frame_center_sample(k);
        let lo = center.saturating_sub(half);
        let hi = (center + half).min(len);
        let active = cum_active[hi] - cum_active[lo];
        let speech_energy = cum_speech_sq[hi] - cum_speech_sq[lo];
        if active == 0 || speech_energy <= 0.0 {
            out.push(SNR_CLAMP_DB.0);
            diagnostics.zero_speech_windows += 1;
            continue;
        }
        let noise_energy = cum_noise_sq[hi] - cum_noise_sq[lo];
        if noise_energy <= 0.0 {
            out.push(SNR_CLAMP_DB.1);
            diagnostics.zero_noise_windows += 1;
            continue;
        }
        let p_speech = speech_energy / active as f64;
        let p_noise = noise_energy / (hi - lo) as f64;
        let snr = 10.0 * (p_speech / p_noise).log10();
        out.push(snr.clamp(SNR_CLAMP_DB.0, SNR_CLAMP_DB.1));
    }
    Ok((out, diagnostics))
}

/// Loops `noise` end-to-start until it covers `len` samples, then crops a
/// window of exactly `len` at a seeded uniform offset.
fn crop_noise(
    noise: &AudioBuffer,
    id: &str,
    len: usize,
    seed: u64,
) -> Result<AudioBuffer, ContaminationError> {
    if noise.is_empty() {
        return Err(ContaminationError::EmptyNoiseAsset(id.to_string()));
    }
    let mut looped: Vec<f64> = Vec::with_capacity(len.max(noise.len()));
    looped.extend_from_slice(noise.samples());
    while looped.len() < len {
        let missing = len - looped.len();
        let take = missing.min(noise.len());
        looped.extend_from_slice(&noise.samples()[..take]);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let max_offset = looped.len() - len;
    let offset = if max_offset == 0 { 0 } else { rng.random_range(0..=max_offset) };
    let samples = looped[offset..offset + len].to_vec();
    Ok(AudioBuffer::from_validated(samples, noise.sample_rate()))
}

/// Runs the full pipeline for one utterance, in order: silence extension,
/// speech reverberation (if drawn), noise crop + reverberation (if drawn),
/// SNR-targeted mixing, and label production.
///
/// Deterministic given `(recipe.master_seed, recipe.utterance_id)` and the
/// referenced assets. Any sub-step error is wrapped with the utterance id.
pub fn contaminate(
    speech: &AudioBuffer,
    activity: &SpeechActivity,
    assets: &AssetStore,
    recipe: &ContaminationRecipe,
) -> Result<ContaminationOutput, ContaminationError> {
    contaminate_inner(speech, activity, assets, recipe).map_err(|source| {
        ContaminationError::Utterance {
            utterance_id: recipe.utterance_id.clone(),
            source: Box::new(source),
        }
    })
}

fn contaminate_inner(
    speech: &AudioBuffer,
    activity: &SpeechActivity,
    assets: &AssetStore,
    recipe: &ContaminationRecipe,
) -> Result<ContaminationOutput, ContaminationError> {
    recipe.validate()?;
    let silence_seed = derive_seed(recipe.master_seed, &recipe.utterance_id, "silence");
    let (s1, activity) = extend_with_silence(speech, activity, recipe.ns_ratio, silence_seed)?;

    let (s2, c50) = match &recipe.speech_rir_id {
        Some(id) => {
            let rir = assets.rir(id)?;
            (audio::convolve(&s1, rir.ir())?, compute_c50(rir).clamped_label())
        }
        None => (s1, ClarityValue { c50_db: C50_CLAMP_DB.1 }),
    };

    let noise_asset = assets.noise(&recipe.noise_id)?;
    let crop_seed = derive_seed(recipe.master_seed, &recipe.utterance_id, "noise-crop");
    let n1 = crop_noise(noise_asset, &recipe.noise_id, s2.len(), crop_seed)?;
    let n2 = match &recipe.noise_rir_id {
        Some(id) => audio::convolve(&n1, assets.rir(id)?.ir())?,
        None => n1,
    };

    let (mixed, noise_gain) = mix_at_snr(&s2, &activity, &n2, recipe.target_snr_db)?;
    let noise_scaled = audio::apply_gain(&n2, noise_gain)?;

    let grid = FrameGrid::for_buffer(&mixed);
    let vad = grid.rasterize(&activity, mixed.sample_rate());
    let (snr_db, diagnostics) = frame_snr(&s2, &noise_scaled, &activity, &grid, SNR_WINDOW_S)?;

    Ok(ContaminationOutput {
        utterance: LabeledUtterance {
            audio: mixed,
            vad,
            snr_db,
            c50,
            recipe: recipe.clone(),
        },
        speech_component: s2,
        noise_component: noise_scaled,
        activity,
        noise_gain,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::PIPELINE_SAMPLE_RATE;

    fn buf(samples: Vec<f64>) -> AudioBuffer {
        AudioBuffer::new(samples, PIPELINE_SAMPLE_RATE).unwrap()
    }

    fn full_activity(duration: f64) -> SpeechActivity {
        SpeechActivity::new(vec![Region::new(0.0, duration)]).unwrap()
    }

    // --- FrameGrid ---

    #[test]
    fn grid_floors_partial_frames() {
        let grid = FrameGrid::new(0.016, 16_000, 256 * 10 + 255).unwrap();
        assert_eq!(grid.num_frames(), 10);
        assert_eq!(grid.samples_per_frame(), 256);
        assert_eq!(grid.frame_span(3), (768, 1024));
        assert_eq!(grid.frame_center_sample(0), 128);
    }

    #[test]
    fn rasterize_requires_strict_majority() {
        let grid = FrameGrid::new(0.016, 16_000, 256 * 4).unwrap();
        // Exactly half of frame 0 (128 of 256 samples): not speech.
        let half = SpeechActivity::new(vec![Region::new(0.0, 128.0 / 16_000.0)]).unwrap();
        assert_eq!(grid.rasterize(&half, 16_000), vec![false, false, false, false]);
        // One sample more: speech.
        let over = SpeechActivity::new(vec![Region::new(0.0, 129.0 / 16_000.0)]).unwrap();
        assert_eq!(grid.rasterize(&over, 16_000), vec![true, false, false, false]);
    }

    #[test]
    fn rasterize_mass_conservation() {
        // Frame count * frame duration tracks total speech within one frame
        // per region boundary.
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for _ in 0..50 {
            let mut regions = Vec::new();
            let mut t = 0.0;
            let count = rng.random_range(1..8usize);
            for _ in 0..count {
                t += rng.random_range(0.05..0.5);
                let on = t;
                t += rng.random_range(0.05..1.5);
                regions.push(Region::new(on, t));
            }
            let activity = SpeechActivity::new(regions).unwrap();
            let duration = t + 0.3;
            let num_samples = (duration * 16_000.0).ceil() as usize;
            let grid = FrameGrid::new(0.016, 16_000, num_samples).unwrap();
            let vad = grid.rasterize(&activity, 16_000);
            let labeled = vad.iter().filter(|&&v| v).count() as f64 * 0.016;
            let tolerance = 2.0 * activity.regions().len() as f64 * 0.016;
            assert!(
                (labeled - activity.total_speech()).abs() <= tolerance,
                "labeled {labeled} vs speech {} (tolerance {tolerance})",
                activity.total_speech()
            );
        }
    }

    // --- extend_with_silence ---

    #[test]
    fn silence_unchanged_when_ratio_met() {
        // 30% non-speech already: 0.7 s speech in 1.0 s.
        let speech = buf(vec![0.5; 16_000]);
        let activity = SpeechActivity::new(vec![Region::new(0.0, 0.7)]).unwrap();
        let (out, act) = extend_with_silence(&speech, &activity, 0.3, 7).unwrap();
        assert_eq!(out.samples(), speech.samples());
        assert_eq!(act, activity);
    }

    #[test]
    fn silence_extends_fully_speech_input() {
        // 10 s of speech active everywhere, target 30% non-speech.
        let speech = buf(vec![0.5; 160_000]);
        let activity = full_activity(10.0);
        let (out, act) = extend_with_silence(&speech, &activity, 0.3, 7).unwrap();
        assert!(out.duration() >= 10.0 / 0.7 - 1e-9, "duration {}", out.duration());
        let active = act.active_samples(out.len(), 16_000);
        let ns_ratio = (out.len() - active) as f64 / out.len() as f64;
        assert!(ns_ratio >= 0.3, "ratio {ns_ratio}");
        // Original samples preserved in order: strip the zeros.
        let kept: Vec<f64> = out.samples().iter().copied().filter(|&s| s != 0.0).collect();
        assert_eq!(kept, speech.samples());
        // All inserted samples are digital zeros.
        assert_eq!(out.samples().iter().filter(|&&s| s == 0.0).count(), out.len() - 160_000);
    }

    #[test]
    fn silence_insertion_is_deterministic() {
        let speech = buf((0..32_000).map(|i| ((i % 97) as f64 - 48.0) / 50.0).collect());
        let activity = SpeechActivity::new(vec![
            Region::new(0.1, 0.9),
            Region::new(1.2, 1.9),
        ])
        .unwrap();
        let (a, act_a) = extend_with_silence(&speech, &activity, 0.5, 123).unwrap();
        let (b, act_b) = extend_with_silence(&speech, &activity, 0.5, 123).unwrap();
        assert_eq!(a.samples(), b.samples());
        assert_eq!(act_a, act_b);
        let (c, _) = extend_with_silence(&speech, &activity, 0.5, 124).unwrap();
        assert_eq!(c.len(), a.len());
        assert_ne!(c.samples(), a.samples(), "different seed should move the gaps");
    }

    #[test]
    fn silence_shifted_activity_stays_on_speech() {
        // The shifted regions must still cover exactly the original speech
        // samples (which are nonzero here by construction).
        let speech = buf(vec![0.25; 48_000]);
        let activity = SpeechActivity::new(vec![
            Region::new(0.0, 1.0),
            Region::new(1.5, 3.0),
        ])
        .unwrap();
        let (out, act) = extend_with_silence(&speech, &activity, 0.6, 5).unwrap();
        let mask = act.sample_mask(out.len(), 16_000);
        for (i, (&m, &s)) in mask.iter().zip(out.samples()).enumerate() {
            if m {
                assert_ne!(s, 0.0, "active sample {i} should be original speech");
            }
        }
        let active = act.active_samples(out.len(), 16_000);
        assert_eq!(active, activity.active_samples(48_000, 16_000));
    }

    #[test]
    fn silence_rejects_activity_beyond_audio() {
        let speech = buf(vec![0.5; 16_000]);
        let activity = SpeechActivity::new(vec![Region::new(0.0, 2.0)]).unwrap();
        assert!(matches!(
            extend_with_silence(&speech, &activity, 0.3, 1),
            Err(ContaminationError::Activity(ActivityError::BeyondAudio { .. }))
        ));
    }

    #[test]
    fn silence_rejects_bad_ratio() {
        let speech = buf(vec![0.5; 100]);
        let activity = full_activity(100.0 / 16_000.0);
        assert!(matches!(
            extend_with_silence(&speech, &activity, 1.0, 1),
            Err(ContaminationError::InvalidNsRatio(_))
        ));
    }

    // --- mix_at_snr ---

    #[test]
    fn mix_equal_powers_at_zero_db_gain_one() {
        let speech = buf(vec![0.5; 16_000]);
        let noise = buf(vec![-0.5; 16_000]);
        let activity = full_activity(1.0);
        let (mixed, gain) = mix_at_snr(&speech, &activity, &noise, 0.0).unwrap();
        assert!((gain - 1.0).abs() < 1e-12, "gain {gain}");
        assert!(mixed.samples().iter().all(|&s| s.abs() < 1e-12));
    }

    #[test]
    fn mix_twenty_db_gain_tenth() {
        let speech = buf(vec![0.5; 16_000]);
        let noise = buf(vec![0.5; 16_000]);
        let activity = full_activity(1.0);
        let (_, gain) = mix_at_snr(&speech, &activity, &noise, 20.0).unwrap();
        assert!((gain - 0.1).abs() < 1e-12, "gain {gain}");
    }

    #[test]
    fn mix_round_trip_hits_target() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let len = 40_000;
        let speech = buf((0..len).map(|_| rng.random_range(-0.8..0.8)).collect());
        let noise = buf((0..len).map(|_| rng.random_range(-0.3..0.3)).collect());
        let activity = SpeechActivity::new(vec![Region::new(0.3, 1.7)]).unwrap();
        let (_, gain) = mix_at_snr(&speech, &activity, &noise, 13.7).unwrap();
        let scaled = audio::apply_gain(&noise, gain).unwrap();
        let mask = activity.sample_mask(len, 16_000);
        let p_s = audio::mean_power(&speech, Some(&mask)).unwrap();
        let p_n = audio::mean_power(&scaled, None).unwrap();
        let measured = 10.0 * (p_s / p_n).log10();
        assert!((measured - 13.7).abs() < 1e-6, "measured {measured}");
    }

    #[test]
    fn mix_uses_speech_span_of_longer_noise() {
        // Noise longer than speech: only the first speech-length samples
        // enter the power measurement and the mixture.
        let speech = buf(vec![0.5; 8_000]);
        let noise_samples: Vec<f64> =
            (0..16_000).map(|i| if i < 8_000 { 0.5 } else { 100.0 }).collect();
        let noise = buf(noise_samples);
        let activity = full_activity(0.5);
        let (mixed, gain) = mix_at_snr(&speech, &activity, &noise, 0.0).unwrap();
        assert_eq!(mixed.len(), 8_000);
        assert!((gain - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mix_errors_on_degenerate_inputs() {
        let silence = buf(vec![0.0; 1_000]);
        let noise = buf(vec![0.5; 1_000]);
        let activity = full_activity(1_000.0 / 16_000.0);
        assert!(matches!(
            mix_at_snr(&silence, &activity, &noise, 10.0),
            Err(ContaminationError::ZeroSpeechPower)
        ));
        let speech = buf(vec![0.5; 1_000]);
        let zero_noise = buf(vec![0.0; 1_000]);
        assert!(matches!(
            mix_at_snr(&speech, &activity, &zero_noise, 10.0),
            Err(ContaminationError::ZeroNoisePower)
        ));
        let short_noise = buf(vec![0.5; 999]);
        assert!(matches!(
            mix_at_snr(&speech, &activity, &short_noise, 10.0),
            Err(ContaminationError::NoiseShorterThanSpeech { .. })
        ));
    }

    // --- frame_snr ---

    #[test]
    fn frame_snr_stationary_matches_utterance_snr() {
        // Constant 1.0 speech and constant 10^(-1/2) noise: 10 dB everywhere.
        let len = 64_000;
        let speech = buf(vec![1.0; len]);
        let noise = buf(vec![10f64.powf(-0.5); len]);
        let activity = full_activity(4.0);
        let grid = FrameGrid::new(0.016, 16_000, len).unwrap();
        let (snr, diag) = frame_snr(&speech, &noise, &activity, &grid, 2.0).unwrap();
        assert_eq!(diag, FrameSnrDiagnostics::default());
        for (k, v) in snr.iter().enumerate() {
            assert!((v - 10.0).abs() < 1e-6, "frame {k}: {v}");
        }
    }

    #[test]
    fn frame_snr_nan_on_all_nonspeech() {
        let len = 16_000;
        let speech = buf(vec![0.3; len]);
        let noise = buf(vec![0.1; len]);
        let grid = FrameGrid::new(0.016, 16_000, len).unwrap();
        let (snr, _) = frame_snr(&speech, &noise, &SpeechActivity::empty(), &grid, 2.0).unwrap();
        assert!(snr.iter().all(|v| v.is_nan()));
    }

    #[test]
    fn frame_snr_matches_brute_force_oracle() {
        // Non-stationary construction: amplitude-modulated speech and a
        // noise that switches level mid-utterance.
        let len = 96_000;
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let speech_samples: Vec<f64> = (0..len)
            .map(|i| {
                let env = 0.2 + 0.8 * (i as f64 / len as f64);
                rng.random_range(-1.0..1.0) * env
            })
            .collect();
        let noise_samples: Vec<f64> = (0..len)
            .map(|i| {
                let level = if i < len / 2 { 0.05 } else { 0.4 };
                rng.random_range(-1.0..1.0) * level
            })
            .collect();
        let speech = buf(speech_samples.clone());
        let noise = buf(noise_samples.clone());
        let activity = SpeechActivity::new(vec![
            Region::new(0.25, 2.0),
            Region::new(2.5, 5.5),
        ])
        .unwrap();
        let grid = FrameGrid::new(0.016, 16_000, len).unwrap();
        let (snr, _) = frame_snr(&speech, &noise, &activity, &grid, 2.0).unwrap();

        // Independent oracle: literal windowed sums per frame.
        let mask = activity.sample_mask(len, 16_000);
        let vad = grid.rasterize(&activity, 16_000);
        for k in 0..grid.num_frames() {
            if !vad[k] {
                assert!(snr[k].is_nan());
                continue;
            }
            let center = k * 256 + 128;
            let lo = center.saturating_sub(16_000);
            let hi = (center + 16_000).min(len);
            let mut speech_energy = 0.0;
            let mut active = 0usize;
            let mut noise_energy = 0.0;
            for i in lo..hi {
                if mask[i] {
                    speech_energy += speech_samples[i] * speech_samples[i];
                    active += 1;
                }
                noise_energy += noise_samples[i] * noise_samples[i];
            }
            let expected = 10.0
                * ((speech_energy / active as f64) / (noise_energy / (hi - lo) as f64)).log10();
            let expected = expected.clamp(-15.0, 80.0);
            assert!(
                (snr[k] - expected).abs() < 1e-9,
                "frame {k}: {} vs oracle {expected}",
                snr[k]
            );
        }
    }

    #[test]
    fn frame_snr_decreases_when_noise_ramps_up() {
        // Silent noise for 2 s, then loud: SNR must strictly decrease across
        // the transition window.
        let len = 80_000;
        let speech = buf(vec![0.5; len]);
        let noise_samples: Vec<f64> = (0..len)
            .map(|i| if i < 32_000 { 0.0 } else { 0.5 })
            .collect();
        let noise = buf(noise_samples);
        let activity = full_activity(5.0);
        let grid = FrameGrid::new(0.016, 16_000, len).unwrap();
        let (snr, _) = frame_snr(&speech, &noise, &activity, &grid, 2.0).unwrap();
        // Frames whose window straddles the 2 s transition: centers from
        // 16000 to 48000 samples.
        let first = (16_000 + 128) / 256;
        let last = (48_000 - 128) / 256;
        for k in first..last {
            assert!(
                snr[k + 1] < snr[k],
                "expected strict decrease at frame {k}: {} -> {}",
                snr[k],
                snr[k + 1]
            );
        }
    }

    #[test]
    fn frame_snr_clamps_and_tallies_degenerate_windows() {
        // Speech region whose samples are all zero: floor clamp + tally.
        let len = 64_000;
        let speech = buf(vec![0.0; len]);
        let noise = buf(vec![0.1; len]);
        let activity = full_activity(4.0);
        let grid = FrameGrid::new(0.016, 16_000, len).unwrap();
        let (snr, diag) = frame_snr(&speech, &noise, &activity, &grid, 2.0).unwrap();
        assert!(snr.iter().all(|&v| v == -15.0));
        assert_eq!(diag.zero_speech_windows, grid.num_frames());

        // Zero noise: ceiling clamp + tally.
        let speech = buf(vec![0.5; len]);
        let silence = buf(vec![0.0; len]);
        let (snr, diag) = frame_snr(&speech, &silence, &activity, &grid, 2.0).unwrap();
        assert!(snr.iter().all(|&v| v == 80.0));
        assert_eq!(diag.zero_noise_windows, grid.num_frames());
    }

    // --- recipes ---

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}-{i:03}")).collect()
    }

    #[test]
    fn recipe_draw_is_deterministic_and_in_range() {
        let noise_ids = ids("noise", 12);
        let rir_ids = ids("rir", 30);
        let params = RecipeParams::default();
        let a = ContaminationRecipe::draw("utt-1", 7, &params, &noise_ids, &rir_ids).unwrap();
        let b = ContaminationRecipe::draw("utt-1", 7, &params, &noise_ids, &rir_ids).unwrap();
        assert_eq!(a, b);
        assert!(noise_ids.contains(&a.noise_id));
        assert!(a.target_snr_db >= 0.0 && a.target_snr_db < 30.0);
        a.validate().unwrap();

        let c = ContaminationRecipe::draw("utt-2", 7, &params, &noise_ids, &rir_ids).unwrap();
        assert_ne!(a.target_snr_db, c.target_snr_db);
    }

    #[test]
    fn recipe_bernoulli_rate_tracks_p_rir() {
        let noise_ids = ids("noise", 3);
        let rir_ids = ids("rir", 5);
        let params = RecipeParams::default(); // p_rir = 0.9
        let mut speech_hits = 0;
        let mut noise_hits = 0;
        let n = 2_000;
        for i in 0..n {
            let r = ContaminationRecipe::draw(
                &format!("utt-{i}"),
                11,
                &params,
                &noise_ids,
                &rir_ids,
            )
            .unwrap();
            speech_hits += usize::from(r.speech_rir_id.is_some());
            noise_hits += usize::from(r.noise_rir_id.is_some());
        }
        // Binomial(2000, 0.9): five sigmas is ~0.034.
        for hits in [speech_hits, noise_hits] {
            let rate = hits as f64 / n as f64;
            assert!((rate - 0.9).abs() < 0.034, "rate {rate}");
        }
    }

    #[test]
    fn recipe_p_rir_zero_never_draws_and_needs_no_rirs() {
        let noise_ids = ids("noise", 2);
        let params = RecipeParams { p_rir: 0.0, ..RecipeParams::default() };
        let r = ContaminationRecipe::draw("utt", 3, &params, &noise_ids, &[]).unwrap();
        assert_eq!(r.speech_rir_id, None);
        assert_eq!(r.noise_rir_id, None);
    }

    #[test]
    fn recipe_draw_validates_assets() {
        let params = RecipeParams::default();
        assert!(matches!(
            ContaminationRecipe::draw("utt", 3, &params, &[], &ids("rir", 1)),
            Err(ContaminationError::NoNoiseAssets)
        ));
        assert!(matches!(
            ContaminationRecipe::draw("utt", 3, &params, &ids("noise", 1), &[]),
            Err(ContaminationError::NoRirAssets)
        ));
    }

    #[test]
    fn recipe_hash_changes_with_any_knob() {
        let noise_ids = ids("noise", 4);
        let rir_ids = ids("rir", 4);
        let params = RecipeParams::default();
        let a = ContaminationRecipe::draw("utt", 1, &params, &noise_ids, &rir_ids).unwrap();
        let mut b = a.clone();
        assert_eq!(a.content_hash(), b.content_hash());
        b.target_snr_db += 1e-9;
        assert_ne!(a.content_hash(), b.content_hash());
        let mut c = a.clone();
        c.ns_ratio = 0.31;
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn recipe_json_roundtrips() {
        let noise_ids = ids("noise", 4);
        let rir_ids = ids("rir", 4);
        let a =
            ContaminationRecipe::draw("utt", 1, &RecipeParams::default(), &noise_ids, &rir_ids)
                .unwrap();
        let json = a.canonical_json();
        let back: ContaminationRecipe = serde_json::from_str(&json).unwrap();
        assert_eq!(a, back);
    }

    // --- contaminate ---

    fn desk_assets() -> AssetStore {
        let mut assets = AssetStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(500);
        for i in 0..3 {
            let len = 20_000 + i * 7_000;
            let noise = buf((0..len).map(|_| rng.random_range(-0.2..0.2)).collect());
            assets.insert_noise(format!("noise-{i}"), noise).unwrap();
        }
        for i in 0..3 {
            let tau = 0.03 + 0.05 * i as f64;
            let rir = crate::rir::synth_exponential_rir(tau, 0.4, 0.0, 900 + i as u64).unwrap();
            assets.insert_rir(format!("rir-{i}"), rir).unwrap();
        }
        assets
    }

    fn desk_speech(seed: u64) -> (AudioBuffer, SpeechActivity) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let len = 48_000;
        let activity = SpeechActivity::new(vec![
            Region::new(0.2, 1.3),
            Region::new(1.6, 2.8),
        ])
        .unwrap();
        let mask = activity.sample_mask(len, PIPELINE_SAMPLE_RATE);
        let samples: Vec<f64> = mask
            .iter()
            .map(|&m| if m { rng.random_range(-0.6..0.6) } else { 0.0 })
            .collect();
        (buf(samples), activity)
    }

    #[test]
    fn contaminate_degenerate_p_rir_zero() {
        // Constant signals, no reverb: s3 = speech + g*noise with all
        // speech-frame SNRs at the target and the anechoic C50 clamp.
        let mut assets = AssetStore::new();
        assets.insert_noise("n", buf(vec![0.5; 64_000])).unwrap();
        let speech = buf(vec![0.5; 64_000]);
        let activity = full_activity(4.0);
        let recipe = ContaminationRecipe {
            utterance_id: "deg".into(),
            master_seed: 1,
            p_rir: 0.0,
            speech_rir_id: None,
            noise_rir_id: None,
            noise_id: "n".into(),
            target_snr_db: 0.0,
            snr_range_db: (0.0, 30.0),
            ns_ratio: 0.0,
        };
        let out = contaminate(&speech, &activity, &assets, &recipe).unwrap();
        assert_eq!(out.utterance.c50.c50_db, 60.0);
        assert!((out.noise_gain - 1.0).abs() < 1e-12);
        for (k, (&v, s)) in out.utterance.vad.iter().zip(&out.utterance.snr_db).enumerate() {
            assert!(v, "frame {k} should be speech");
            assert!((s - 0.0).abs() < 1e-6, "frame {k}: {s}");
        }
        // s3 = speech + g*noise elementwise.
        for ((m, s), n) in out
            .utterance
            .audio
            .samples()
            .iter()
            .zip(speech.samples())
            .zip(out.noise_component.samples())
        {
            assert_eq!(*m, s + n);
        }
    }

    #[test]
    fn contaminate_unit_impulse_rirs_match_degenerate_case() {
        let mut assets = AssetStore::new();
        assets.insert_noise("n", buf(vec![0.5; 64_000])).unwrap();
        let mut impulse = vec![0.0; 256];
        impulse[0] = 1.0;
        let rir = RoomImpulseResponse::new(buf(impulse)).unwrap();
        assets.insert_rir("delta", rir).unwrap();

        let speech = buf(vec![0.5; 64_000]);
        let activity = full_activity(4.0);
        let base = ContaminationRecipe {
            utterance_id: "imp".into(),
            master_seed: 1,
            p_rir: 0.0,
            speech_rir_id: None,
            noise_rir_id: None,
            noise_id: "n".into(),
            target_snr_db: 5.0,
            snr_range_db: (0.0, 30.0),
            ns_ratio: 0.0,
        };
        let plain = contaminate(&speech, &activity, &assets, &base).unwrap();

        let with_impulse = ContaminationRecipe {
            p_rir: 1.0,
            speech_rir_id: Some("delta".into()),
            noise_rir_id: Some("delta".into()),
            ..base
        };
        let through = contaminate(&speech, &activity, &assets, &with_impulse).unwrap();

        // Convolving with a unit impulse is the identity up to transform
        // round-off, so the two mixtures agree to 1e-9 absolute.
        assert_eq!(plain.utterance.audio.len(), through.utterance.audio.len());
        for (a, b) in plain
            .utterance
            .audio
            .samples()
            .iter()
            .zip(through.utterance.audio.samples())
        {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert_eq!(plain.utterance.vad, through.utterance.vad);
        assert_eq!(plain.utterance.c50.c50_db, 60.0);
        // Unit impulse has zero late energy, so its C50 is also the clamp.
        assert_eq!(through.utterance.c50.c50_db, 60.0);
    }

    #[test]
    fn contaminate_is_bit_deterministic() {
        let assets = desk_assets();
        let (speech, activity) = desk_speech(3);
        let recipe = ContaminationRecipe::draw(
            "utt-det",
            42,
            &RecipeParams::default(),
            &assets.noise_ids(),
            &assets.rir_ids(),
        )
        .unwrap();
        let a = contaminate(&speech, &activity, &assets, &recipe).unwrap();
        let b = contaminate(&speech, &activity, &assets, &recipe).unwrap();
        assert_eq!(a.utterance.audio.samples(), b.utterance.audio.samples());
        assert_eq!(a.utterance.vad, b.utterance.vad);
        let bits_a: Vec<u64> = a.utterance.snr_db.iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = b.utterance.snr_db.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
        assert_eq!(a.utterance.c50.c50_db.to_bits(), b.utterance.c50.c50_db.to_bits());
    }

    #[test]
    fn contaminate_round_trip_snr_within_tolerance() {
        let assets = desk_assets();
        for seed in 0..10u64 {
            let (speech, activity) = desk_speech(seed);
            let recipe = ContaminationRecipe::draw(
                &format!("utt-rt-{seed}"),
                911,
                &RecipeParams::default(),
                &assets.noise_ids(),
                &assets.rir_ids(),
            )
            .unwrap();
            let out = contaminate(&speech, &activity, &assets, &recipe).unwrap();
            let mask = out
                .activity
                .sample_mask(out.speech_component.len(), PIPELINE_SAMPLE_RATE);
            let p_s = audio::mean_power(&out.speech_component, Some(&mask)).unwrap();
            let p_n = audio::mean_power(&out.noise_component, None).unwrap();
            let measured = 10.0 * (p_s / p_n).log10();
            assert!(
                (measured - recipe.target_snr_db).abs() < 1e-6,
                "seed {seed}: measured {measured} vs target {}",
                recipe.target_snr_db
            );
        }
    }

    #[test]
    fn contaminate_c50_label_matches_rir_analysis_exactly() {
        let assets = desk_assets();
        let (speech, activity) = desk_speech(1);
        let recipe = ContaminationRecipe {
            utterance_id: "c50".into(),
            master_seed: 8,
            p_rir: 1.0,
            speech_rir_id: Some("rir-1".into()),
            noise_rir_id: None,
            noise_id: "noise-0".into(),
            target_snr_db: 12.0,
            snr_range_db: (0.0, 30.0),
            ns_ratio: 0.3,
        };
        let out = contaminate(&speech, &activity, &assets, &recipe).unwrap();
        let expected = compute_c50(assets.rir("rir-1").unwrap()).clamped_label();
        assert_eq!(out.utterance.c50.c50_db.to_bits(), expected.c50_db.to_bits());
    }

    #[test]
    fn contaminate_wraps_errors_with_utterance_id() {
        let assets = AssetStore::new();
        let (speech, activity) = desk_speech(1);
        let recipe = ContaminationRecipe {
            utterance_id: "missing-noise".into(),
            master_seed: 8,
            p_rir: 0.0,
            speech_rir_id: None,
            noise_rir_id: None,
            noise_id: "nope".into(),
            target_snr_db: 12.0,
            snr_range_db: (0.0, 30.0),
            ns_ratio: 0.3,
        };
        let err = contaminate(&speech, &activity, &assets, &recipe).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("missing-noise"), "message: {msg}");
        match err {
            ContaminationError::Utterance { utterance_id, source } => {
                assert_eq!(utterance_id, "missing-noise");
                assert!(matches!(*source, ContaminationError::UnknownNoise(_)));
            }
            other => panic!("expected utterance context, got {other:?}"),
        }
    }

    #[test]
    fn crop_noise_loops_short_assets() {
        let noise = buf(vec![1.0, 2.0, 3.0]);
        let cropped = crop_noise(&noise, "n", 8, 17).unwrap();
        assert_eq!(cropped.len(), 8);
        // Looped buffer is 1,2,3,1,2,3,1,2 (exactly 8): offset must be 0.
        assert_eq!(cropped.samples(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0]);
    }

    #[test]
    fn crop_noise_offset_is_seeded() {
        let noise = buf((0..1_000).map(|i| i as f64).collect());
        let a = crop_noise(&noise, "n", 100, 5).unwrap();
        let b = crop_noise(&noise, "n", 100, 5).unwrap();
        assert_eq!(a.samples(), b.samples());
        // Offsets stay within bounds and windows are contiguous slices.
        assert_eq!(a.samples()[99] - a.samples()[0], 99.0);
    }

    #[test]
    fn derive_seed_separates_contexts_and_ids() {
        let a = derive_seed(1, "utt", "recipe");
        assert_eq!(a, derive_seed(1, "utt", "recipe"));
        assert_ne!(a, derive_seed(1, "utt", "silence"));
        assert_ne!(a, derive_seed(1, "utt2", "recipe"));
        assert_ne!(a, derive_seed(2, "utt", "recipe"));
    }
}
