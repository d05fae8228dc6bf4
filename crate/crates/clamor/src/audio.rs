//! Mono audio buffers and the power/gain/convolution primitives the
//! contamination pipeline is built on.
//!
//! Samples are stored as `f64` in linear amplitude. Keeping the in-memory
//! representation at full double precision is what lets the power and gain
//! identities hold to the tolerances the rest of the crate promises
//! (`mean_power(apply_gain(x, g))` matches `g^2 * mean_power(x)` to a few
//! ulps); file I/O narrows to float32 only at the WAV boundary.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

/// Sample rate shared by every pipeline input and output, in Hz.
///
/// Clean speech, noise, and impulse responses are all expected at this rate;
/// ingestion rejects anything else rather than resampling.
pub const PIPELINE_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("sample rate must be positive")]
    ZeroSampleRate,
    #[error("non-finite sample at index {0}")]
    NonFiniteSample(usize),
    #[error("sample rate mismatch: {left} Hz vs {right} Hz")]
    SampleRateMismatch { left: u32, right: u32 },
    #[error("impulse response must not be empty")]
    EmptyImpulseResponse,
    #[error("gain must be finite and non-negative, got {0}")]
    InvalidGain(f64),
}

/// A mono signal: linear-amplitude samples at a fixed sample rate.
///
/// Construction validates that every sample is finite and the rate is
/// positive, so downstream code can rely on both without re-checking.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::ZeroSampleRate);
        }
        if let Some(idx) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::NonFiniteSample(idx));
        }
        Ok(Self { samples, sample_rate })
    }

    /// Builds a buffer from samples already known to be finite (outputs of
    /// arithmetic on validated buffers), skipping the validation scan.
    pub(crate) fn from_validated(samples: Vec<f64>, sample_rate: u32) -> Self {
        debug_assert!(samples.iter().all(|s| s.is_finite()));
        Self { samples, sample_rate }
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Result<Self, AudioError> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Duration in seconds.
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Mean squared amplitude over a buffer, optionally restricted to the
/// samples where `mask` is true.
///
/// Returns `None` when the selection is empty (no samples at all, or a mask
/// that selects nothing) — an empty selection has no mean power, and callers
/// that need to treat it as an error can do so explicitly.
///
/// # Panics
///
/// Panics if `mask` is provided with a length different from the signal;
/// that is a caller bug, not a data condition.
pub fn mean_power(signal: &AudioBuffer, mask: Option<&[bool]>) -> Option<f64> {
    match mask {
        None => {
            if signal.is_empty() {
                None
            } else {
                let sum: f64 = signal.samples.iter().map(|s| s * s).sum();
                Some(sum / signal.len() as f64)
            }
        }
        Some(mask) => {
            assert_eq!(
                mask.len(),
                signal.len(),
                "mask length {} does not match signal length {}",
                mask.len(),
                signal.len()
            );
            let mut sum = 0.0;
            let mut count = 0usize;
            for (s, &keep) in signal.samples.iter().zip(mask) {
                if keep {
                    sum += s * s;
                    count += 1;
                }
            }
            if count == 0 {
                None
            } else {
                Some(sum / count as f64)
            }
        }
    }
}

/// Scales every sample by `gain` (a linear factor, not decibels).
pub fn apply_gain(signal: &AudioBuffer, gain: f64) -> Result<AudioBuffer, AudioError> {
    if !gain.is_finite() || gain < 0.0 {
        return Err(AudioError::InvalidGain(gain));
    }
    let samples = signal.samples.iter().map(|s| s * gain).collect();
    Ok(AudioBuffer::from_validated(samples, signal.sample_rate))
}

/// Linear convolution of `signal` with `ir`, truncated to `signal.len()`.
///
/// The output length matches the input so that sample indices (and thus
/// frame labels) stay aligned before and after reverberation; the
/// reverberant tail that would extend past the end is dropped.
///
/// Semantically this is always the direct sum
/// `out[i] = Σ_j ir[j] · signal[i-j]`; an FFT path is used when the
/// direct sum would be expensive, and agrees with it to well under 1e-6
/// relative error.
pub fn convolve(signal: &AudioBuffer, ir: &AudioBuffer) -> Result<AudioBuffer, AudioError> {
    if signal.sample_rate != ir.sample_rate {
        return Err(AudioError::SampleRateMismatch {
            left: signal.sample_rate,
            right: ir.sample_rate,
        });
    }
    if ir.is_empty() {
        return Err(AudioError::EmptyImpulseResponse);
    }
    let n = signal.len();
    let m = ir.len();
    let samples = if use_fft(n, m) {
        fft_convolve_truncated(&signal.samples, &ir.samples)
    } else {
        direct_convolve_truncated(&signal.samples, &ir.samples)
    };
    Ok(AudioBuffer::from_validated(samples, signal.sample_rate))
}

/// The direct sum costs n·m multiplies; the FFT path costs roughly
/// 3·N·log2(N) over N = next_pow2(n+m-1). Crossover chosen so that short
/// impulse responses (where the direct sum is both fast and exact) stay on
/// the direct path.
fn use_fft(n: usize, m: usize) -> bool {
    m >= 64 && n.saturating_mul(m) >= (1 << 20)
}

fn direct_convolve_truncated(signal: &[f64], ir: &[f64]) -> Vec<f64> {
    let n = signal.len();
    (0..n)
        .map(|i| {
            let jmax = ir.len().min(i + 1);
            (0..jmax).map(|j| ir[j] * signal[i - j]).sum()
        })
        .collect()
}

fn fft_convolve_truncated(signal: &[f64], ir: &[f64]) -> Vec<f64> {
    let n = signal.len();
    let size = (n + ir.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(size);
    let ifft = planner.plan_fft_inverse(size);

    let mut a: Vec<Complex<f64>> = signal
        .iter()
        .map(|&s| Complex::new(s, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    let mut b: Vec<Complex<f64>> = ir
        .iter()
        .map(|&s| Complex::new(s, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();

    fft.process(&mut a);
    fft.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= *y;
    }
    ifft.process(&mut a);

    // rustfft leaves the inverse transform unnormalized.
    let scale = 1.0 / size as f64;
    a[..n].iter().map(|c| c.re * scale).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn buf(samples: Vec<f64>) -> AudioBuffer {
        AudioBuffer::new(samples, PIPELINE_SAMPLE_RATE).unwrap()
    }

    #[test]
    fn new_rejects_non_finite_samples() {
        let err = AudioBuffer::new(vec![0.0, f64::NAN], 16_000).unwrap_err();
        assert!(matches!(err, AudioError::NonFiniteSample(1)));
        let err = AudioBuffer::new(vec![f64::INFINITY], 16_000).unwrap_err();
        assert!(matches!(err, AudioError::NonFiniteSample(0)));
    }

    #[test]
    fn new_rejects_zero_sample_rate() {
        assert!(matches!(
            AudioBuffer::new(vec![0.0], 0),
            Err(AudioError::ZeroSampleRate)
        ));
    }

    #[test]
    fn duration_counts_samples_over_rate() {
        let b = AudioBuffer::zeros(32_000, 16_000).unwrap();
        assert_eq!(b.duration(), 2.0);
    }

    #[test]
    fn mean_power_of_constant_signal() {
        // Every sample 0.5 -> mean square exactly 0.25.
        let b = buf(vec![0.5; 1000]);
        assert_eq!(mean_power(&b, None), Some(0.25));
    }

    #[test]
    fn mean_power_empty_selection_is_none() {
        let empty = buf(vec![]);
        assert_eq!(mean_power(&empty, None), None);

        let b = buf(vec![1.0, 2.0]);
        assert_eq!(mean_power(&b, Some(&[false, false])), None);
    }

    #[test]
    fn mean_power_masked_selects_samples() {
        let b = buf(vec![3.0, 0.0, 4.0, 0.0]);
        // Only the two nonzero samples: (9 + 16) / 2.
        let p = mean_power(&b, Some(&[true, false, true, false])).unwrap();
        assert_eq!(p, 12.5);
    }

    #[test]
    #[should_panic(expected = "mask length")]
    fn mean_power_panics_on_mask_length_mismatch() {
        let b = buf(vec![1.0, 2.0]);
        mean_power(&b, Some(&[true]));
    }

    #[test]
    fn apply_gain_rejects_bad_gains() {
        let b = buf(vec![1.0]);
        assert!(matches!(apply_gain(&b, -1.0), Err(AudioError::InvalidGain(_))));
        assert!(matches!(apply_gain(&b, f64::NAN), Err(AudioError::InvalidGain(_))));
        assert!(matches!(
            apply_gain(&b, f64::INFINITY),
            Err(AudioError::InvalidGain(_))
        ));
    }

    #[test]
    fn convolve_rejects_rate_mismatch_and_empty_ir() {
        let a = buf(vec![1.0, 2.0]);
        let b = AudioBuffer::new(vec![1.0], 8_000).unwrap();
        assert!(matches!(
            convolve(&a, &b),
            Err(AudioError::SampleRateMismatch { left: 16_000, right: 8_000 })
        ));
        let empty = buf(vec![]);
        assert!(matches!(
            convolve(&a, &empty),
            Err(AudioError::EmptyImpulseResponse)
        ));
    }

    #[test]
    fn convolve_with_unit_impulse_is_identity() {
        let mut rng_state = 0x2545F4914F6CDD1Du64;
        let mut next = || {
            // xorshift64* is plenty for test data.
            rng_state ^= rng_state >> 12;
            rng_state ^= rng_state << 25;
            rng_state ^= rng_state >> 27;
            (rng_state.wrapping_mul(0x2545F4914F6CDD1D) >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let signal = buf((0..5000).map(|_| next()).collect());
        let delta = buf(vec![1.0]);
        let out = convolve(&signal, &delta).unwrap();
        for (a, b) in out.samples().iter().zip(signal.samples()) {
            assert!((a - b).abs() <= 1e-9, "identity violated: {a} vs {b}");
        }
    }

    #[test]
    fn convolve_truncates_to_signal_length() {
        let signal = buf(vec![1.0, 0.0, 0.0]);
        let ir = buf(vec![0.5, 0.25, 0.125, 0.0625]);
        let out = convolve(&signal, &ir).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out.samples(), &[0.5, 0.25, 0.125]);
    }

    #[test]
    fn convolve_delayed_impulse_shifts_signal() {
        let signal = buf(vec![1.0, 2.0, 3.0, 4.0]);
        let ir = buf(vec![0.0, 0.0, 1.0]);
        let out = convolve(&signal, &ir).unwrap();
        assert_eq!(out.samples(), &[0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn fft_path_matches_direct_sum() {
        // 4096-sample signal with a 512-tap response crosses the FFT
        // threshold; the oracle is the literal direct sum.
        let n = 4096;
        let m = 512;
        assert!(use_fft(n, m), "test must exercise the FFT path");
        let mut state = 0x9E3779B97F4A7C15u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let signal: Vec<f64> = (0..n).map(|_| next()).collect();
        let ir: Vec<f64> = (0..m).map(|_| next() * 0.1).collect();

        let direct = direct_convolve_truncated(&signal, &ir);
        let fft = fft_convolve_truncated(&signal, &ir);
        let scale = direct.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
        for (i, (d, f)) in direct.iter().zip(&fft).enumerate() {
            assert!(
                (d - f).abs() <= 1e-6 * scale,
                "index {i}: direct {d} vs fft {f}"
            );
        }
    }

    proptest! {
        #[test]
        fn gain_scales_power_quadratically(
            samples in proptest::collection::vec(-1.0f64..1.0, 1..512),
            gain in 0.0f64..8.0,
        ) {
            let b = buf(samples);
            let scaled = apply_gain(&b, gain).unwrap();
            let p0 = mean_power(&b, None).unwrap();
            let p1 = mean_power(&scaled, None).unwrap();
            let expected = gain * gain * p0;
            // Relative tolerance 1e-9; f64 keeps this to a few ulps.
            prop_assert!((p1 - expected).abs() <= 1e-9 * expected.max(1e-300));
        }

        #[test]
        fn convolution_is_linear_in_the_signal(
            a in proptest::collection::vec(-1.0f64..1.0, 32),
            b in proptest::collection::vec(-1.0f64..1.0, 32),
            ir in proptest::collection::vec(-1.0f64..1.0, 1..8),
        ) {
            let ir = buf(ir);
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let ca = convolve(&buf(a), &ir).unwrap();
            let cb = convolve(&buf(b), &ir).unwrap();
            let csum = convolve(&buf(sum), &ir).unwrap();
            for ((x, y), z) in ca.samples().iter().zip(cb.samples()).zip(csum.samples()) {
                prop_assert!((x + y - z).abs() <= 1e-9);
            }
        }

        #[test]
        fn mean_power_is_nonnegative(
            samples in proptest::collection::vec(-10.0f64..10.0, 0..256),
        ) {
            let b = buf(samples);
            if let Some(p) = mean_power(&b, None) {
                prop_assert!(p >= 0.0);
            } else {
                prop_assert!(b.is_empty());
            }
        }
    }
}
