//! Speech activity: which time spans of an utterance contain speech.
//!
//! Activity is kept in seconds as a sorted list of non-overlapping regions.
//! Everything that needs a sample- or frame-level view (silence insertion,
//! SNR measurement, label rasterization) derives it from the same rounding
//! convention, [`SpeechActivity::sample_span`], so the different stages of
//! the pipeline can never disagree about which samples are speech.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ActivityError {
    #[error("region {index}: requires 0 <= onset < offset, got onset {onset} offset {offset}")]
    InvalidRegion { index: usize, onset: f64, offset: f64 },
    #[error("region {index} starts at {onset} before the previous region ends at {prev_offset}")]
    OverlappingRegions { index: usize, onset: f64, prev_offset: f64 },
    #[error("speech activity ends at {end} s, beyond the audio duration {duration} s")]
    BeyondAudio { end: f64, duration: f64 },
}

/// One contiguous span of speech, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub onset: f64,
    pub offset: f64,
}

impl Region {
    pub fn new(onset: f64, offset: f64) -> Self {
        Self { onset, offset }
    }

    pub fn duration(&self) -> f64 {
        self.offset - self.onset
    }
}

/// Sorted, non-overlapping speech regions for one utterance.
///
/// Adjacent regions may touch (`prev.offset == next.onset`) but never
/// overlap; construction enforces this so consumers can scan linearly.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpeechActivity {
    regions: Vec<Region>,
}

impl SpeechActivity {
    /// Validates that regions are well-formed, sorted, and non-overlapping.
    pub fn new(regions: Vec<Region>) -> Result<Self, ActivityError> {
        let mut prev_offset = 0.0f64;
        for (index, r) in regions.iter().enumerate() {
            let ok = r.onset.is_finite() && r.offset.is_finite() && r.onset >= 0.0 && r.onset < r.offset;
            if !ok {
                return Err(ActivityError::InvalidRegion {
                    index,
                    onset: r.onset,
                    offset: r.offset,
                });
            }
            if index > 0 && r.onset < prev_offset {
                return Err(ActivityError::OverlappingRegions {
                    index,
                    onset: r.onset,
                    prev_offset,
                });
            }
            prev_offset = r.offset;
        }
        Ok(Self { regions })
    }

    /// Builds activity from regions that may be unsorted or overlapping
    /// (e.g. several speakers annotated independently), merging them into
    /// their union.
    pub fn from_overlapping(mut regions: Vec<Region>) -> Result<Self, ActivityError> {
        for (index, r) in regions.iter().enumerate() {
            let ok = r.onset.is_finite() && r.offset.is_finite() && r.onset >= 0.0 && r.onset < r.offset;
            if !ok {
                return Err(ActivityError::InvalidRegion {
                    index,
                    onset: r.onset,
                    offset: r.offset,
                });
            }
        }
        regions.sort_by(|a, b| a.onset.total_cmp(&b.onset));
        let mut merged: Vec<Region> = Vec::with_capacity(regions.len());
        for r in regions {
            match merged.last_mut() {
                Some(last) if r.onset <= last.offset => {
                    last.offset = last.offset.max(r.offset);
                }
                _ => merged.push(r),
            }
        }
        Ok(Self { regions: merged })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Total speech time in seconds.
    pub fn total_speech(&self) -> f64 {
        self.regions.iter().map(Region::duration).sum()
    }

    /// End of the last region in seconds, 0 if there is none.
    pub fn end(&self) -> f64 {
        self.regions.last().map_or(0.0, |r| r.offset)
    }

    /// Errors if any region extends past `duration` (with half a sample of
    /// slack so that boundaries that round onto the final sample pass).
    pub fn check_within(&self, duration: f64, sample_rate: u32) -> Result<(), ActivityError> {
        let slack = 0.5 / sample_rate as f64;
        if self.end() > duration + slack {
            return Err(ActivityError::BeyondAudio {
                end: self.end(),
                duration,
            });
        }
        Ok(())
    }

    /// The half-open sample range `[start, end)` a region covers at the
    /// given rate, clipped to `num_samples`.
    ///
    /// Boundaries round to the nearest sample. This is the single
    /// rounding convention shared by every consumer in the crate.
    pub fn sample_span(region: &Region, sample_rate: u32, num_samples: usize) -> (usize, usize) {
        let rate = sample_rate as f64;
        let start = (region.onset * rate).round() as usize;
        let end = (region.offset * rate).round() as usize;
        (start.min(num_samples), end.min(num_samples))
    }

    /// Per-sample speech mask of length `num_samples`.
    pub fn sample_mask(&self, num_samples: usize, sample_rate: u32) -> Vec<bool> {
        let mut mask = vec![false; num_samples];
        for r in &self.regions {
            let (start, end) = Self::sample_span(r, sample_rate, num_samples);
            for m in &mut mask[start..end] {
                *m = true;
            }
        }
        mask
    }

    /// Count of speech samples in a buffer of `num_samples`.
    pub fn active_samples(&self, num_samples: usize, sample_rate: u32) -> usize {
        self.regions
            .iter()
            .map(|r| {
                let (start, end) = Self::sample_span(r, sample_rate, num_samples);
                end - start
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_inverted_and_negative_regions() {
        let err = SpeechActivity::new(vec![Region::new(2.0, 1.0)]).unwrap_err();
        assert!(matches!(err, ActivityError::InvalidRegion { index: 0, .. }));
        let err = SpeechActivity::new(vec![Region::new(-0.5, 1.0)]).unwrap_err();
        assert!(matches!(err, ActivityError::InvalidRegion { index: 0, .. }));
        let err = SpeechActivity::new(vec![Region::new(1.0, 1.0)]).unwrap_err();
        assert!(matches!(err, ActivityError::InvalidRegion { index: 0, .. }));
    }

    #[test]
    fn new_rejects_overlap_but_allows_touching() {
        let err =
            SpeechActivity::new(vec![Region::new(0.0, 1.0), Region::new(0.9, 2.0)]).unwrap_err();
        assert!(matches!(err, ActivityError::OverlappingRegions { index: 1, .. }));
        // Touching regions are fine.
        SpeechActivity::new(vec![Region::new(0.0, 1.0), Region::new(1.0, 2.0)]).unwrap();
    }

    #[test]
    fn from_overlapping_merges_union() {
        let a = SpeechActivity::from_overlapping(vec![
            Region::new(3.0, 4.0),
            Region::new(0.0, 1.5),
            Region::new(1.0, 2.0),
        ])
        .unwrap();
        assert_eq!(a.regions(), &[Region::new(0.0, 2.0), Region::new(3.0, 4.0)]);
        assert_eq!(a.total_speech(), 3.0);
    }

    #[test]
    fn sample_span_rounds_to_nearest() {
        // 0.1 s at 16 kHz is sample 1600; 0.10003 s rounds to 1600 as well
        // (1600.48), while 0.100031+ rounds to 1601.
        let r = Region::new(0.1, 0.2);
        assert_eq!(SpeechActivity::sample_span(&r, 16_000, 10_000), (1600, 3200));
        let r = Region::new(0.100_04, 0.2);
        assert_eq!(SpeechActivity::sample_span(&r, 16_000, 10_000), (1601, 3200));
    }

    #[test]
    fn sample_mask_counts_match_active_samples() {
        let a = SpeechActivity::new(vec![Region::new(0.01, 0.02), Region::new(0.5, 0.6)]).unwrap();
        let mask = a.sample_mask(16_000, 16_000);
        let count = mask.iter().filter(|&&m| m).count();
        assert_eq!(count, a.active_samples(16_000, 16_000));
        // 10 ms + 100 ms of speech at 16 kHz.
        assert_eq!(count, 160 + 1600);
    }

    #[test]
    fn spans_clip_to_buffer_end() {
        let a = SpeechActivity::new(vec![Region::new(0.5, 2.0)]).unwrap();
        assert_eq!(a.active_samples(16_000, 16_000), 16_000 - 8_000);
    }

    #[test]
    fn check_within_allows_half_sample_slack() {
        let a = SpeechActivity::new(vec![Region::new(0.0, 1.000_02)]).unwrap();
        a.check_within(1.0, 16_000).unwrap();
        let a = SpeechActivity::new(vec![Region::new(0.0, 1.001)]).unwrap();
        assert!(matches!(
            a.check_within(1.0, 16_000),
            Err(ActivityError::BeyondAudio { .. })
        ));
    }
}
