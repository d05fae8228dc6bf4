//! WAV file ingestion and emission.
//!
//! Readers accept mono 16 kHz files encoded as 16-bit PCM or 32-bit float
//! and reject everything else by naming the offending property — silently
//! resampling or downmixing would corrupt the ground-truth labels. The
//! writer always emits 32-bit float so synthesized mixtures round-trip
//! without quantization on top of the float32 narrowing itself.

use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::audio::{AudioBuffer, AudioError, PIPELINE_SAMPLE_RATE};
use thiserror::Error;

/// Divisor mapping 16-bit PCM integers onto [-1.0, 1.0).
const PCM16_SCALE: f64 = 32_768.0;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("{path}: channels={channels} unsupported, mono required")]
    UnsupportedChannels { path: PathBuf, channels: u16 },
    #[error("{path}: sample rate {rate} Hz unsupported, {PIPELINE_SAMPLE_RATE} Hz required")]
    UnsupportedRate { path: PathBuf, rate: u32 },
    #[error("{path}: {bits}-bit {format} encoding unsupported, 16-bit PCM or 32-bit float required")]
    UnsupportedEncoding {
        path: PathBuf,
        bits: u16,
        format: &'static str,
    },
    #[error("{path}: {source}")]
    InvalidAudio {
        path: PathBuf,
        #[source]
        source: AudioError,
    },
}

/// Reads a mono 16 kHz WAV file into an [`AudioBuffer`].
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer, WavError> {
    let path = path.as_ref();
    let fmt_err = |source| WavError::Format { path: path.to_path_buf(), source };
    let mut reader = hound::WavReader::open(path).map_err(fmt_err)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(WavError::UnsupportedChannels {
            path: path.to_path_buf(),
            channels: spec.channels,
        });
    }
    if spec.sample_rate != PIPELINE_SAMPLE_RATE {
        return Err(WavError::UnsupportedRate {
            path: path.to_path_buf(),
            rate: spec.sample_rate,
        });
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / PCM16_SCALE))
            .collect::<Result<_, _>>()
            .map_err(fmt_err)?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()
            .map_err(fmt_err)?,
        (format, bits) => {
            return Err(WavError::UnsupportedEncoding {
                path: path.to_path_buf(),
                bits,
                format: match format {
                    hound::SampleFormat::Int => "integer",
                    hound::SampleFormat::Float => "float",
                },
            })
        }
    };
    AudioBuffer::new(samples, spec.sample_rate).map_err(|source| WavError::InvalidAudio {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a buffer as a mono 32-bit float WAV file.
///
/// Samples are narrowed from the in-memory `f64` to `f32`; values that are
/// exactly representable in `f32` (everything this crate reads back in)
/// round-trip bit for bit.
pub fn write_wav(buffer: &AudioBuffer, path: impl AsRef<Path>) -> Result<(), WavError> {
    let path = path.as_ref();
    let fmt_err = |source| WavError::Format { path: path.to_path_buf(), source };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buffer.sample_rate(),
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let file = std::fs::File::create(path)
        .map_err(|e| fmt_err(hound::Error::IoError(e)))?;
    let mut writer = hound::WavWriter::new(BufWriter::new(file), spec).map_err(fmt_err)?;
    for &s in buffer.samples() {
        writer.write_sample(s as f32).map_err(fmt_err)?;
    }
    writer.finalize().map_err(fmt_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(name);
        (dir, path)
    }

    #[test]
    fn float_roundtrip_is_bit_exact() {
        let (dir, path) = tmp("f32.wav");
        let samples: Vec<f64> = (0..1000)
            .map(|i| ((i as f32) * 0.001_f32).sin() as f64 * 0.5_f32 as f64)
            .map(|v| v as f32 as f64) // force f32-representable values
            .collect();
        let buffer = AudioBuffer::new(samples.clone(), 16_000).unwrap();
        write_wav(&buffer, &path).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.samples(), buffer.samples());
        assert_eq!(back.sample_rate(), 16_000);
        drop(dir);
    }

    #[test]
    fn pcm16_divides_by_32768() {
        let (dir, path) = tmp("pcm.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(&path, spec).unwrap();
        for v in [i16::MIN, -16_384, 0, 16_384, i16::MAX] {
            writer.write_sample(v).unwrap();
        }
        writer.finalize().unwrap();
        let buffer = read_wav(&path).unwrap();
        assert_eq!(
            buffer.samples(),
            &[-1.0, -0.5, 0.0, 0.5, 32_767.0 / 32_768.0]
        );
        drop(dir);
    }

    #[test]
    fn rejects_stereo() {
        let (dir, path) = tmp("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..4 {
            writer.write_sample(0i16).unwrap();
        }
        writer.finalize().unwrap();
        let err = read_wav(&path).unwrap_err();
        assert!(matches!(err, WavError::UnsupportedChannels { channels: 2, .. }));
        assert!(err.to_string().contains("channels=2"));
        drop(dir);
    }

    #[test]
    fn rejects_wrong_rate() {
        let (dir, path) = tmp("rate.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 44_100,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(&path, spec).unwrap();
        writer.write_sample(0i16).unwrap();
        writer.finalize().unwrap();
        let err = read_wav(&path).unwrap_err();
        assert!(matches!(err, WavError::UnsupportedRate { rate: 44_100, .. }));
        drop(dir);
    }

    #[test]
    fn rejects_unsupported_encoding() {
        let (dir, path) = tmp("pcm24.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(&path, spec).unwrap();
        writer.write_sample(0i32).unwrap();
        writer.finalize().unwrap();
        let err = read_wav(&path).unwrap_err();
        assert!(matches!(err, WavError::UnsupportedEncoding { bits: 24, .. }));
        drop(dir);
    }

    #[test]
    fn missing_file_reports_path() {
        let err = read_wav("/nonexistent/missing.wav").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/missing.wav"));
    }
}
