//! PCM WAV input: 16-bit integer and 32-bit float, downmixed to mono.

use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};

/// Read a WAV file as mono, averaging channels. Supports 16-bit PCM and
/// 32-bit IEEE float.
pub fn read_wav_mono(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Format("wav has zero channels".into()));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::Format(format!(
                "unsupported wav encoding: {bits}-bit {fmt:?}; expected 16-bit PCM or 32-bit float"
            )))
        }
    };
    let mono: Vec<f64> = samples
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    Waveform::new(mono, spec.sample_rate)
}

/// Write a mono waveform as 32-bit float WAV (testing and tooling helper).
pub fn write_wav_mono(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &w.samples {
        writer.write_sample(s as f32)?;
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let w = Waveform::new(vec![0.0, 0.5, -0.5, 0.25], 22050).unwrap();
        write_wav_mono(&path, &w).unwrap();
        let back = read_wav_mono(&path).unwrap();
        assert_eq!(back.sample_rate, 22050);
        for (a, b) in w.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn stereo_int16_is_downmixed_by_averaging() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(&path, spec).unwrap();
        // L = 16384 (0.5), R = -16384 (-0.5) -> mono 0.0; then L = R = 8192 -> 0.25
        for s in [16384i16, -16384, 8192, 8192] {
            writer.write_sample(s).unwrap();
        }
        writer.finalize().unwrap();
        let w = read_wav_mono(&path).unwrap();
        assert_eq!(w.len(), 2);
        assert!((w.samples[0]).abs() < 1e-9);
        assert!((w.samples[1] - 0.25).abs() < 1e-9);
    }
}
