//! Band-limited resampling via windowed-sinc interpolation.

use super::Waveform;
use crate::error::{Error, Result};

/// Half-width of the sinc kernel in zero crossings.
const TAPS: f64 = 32.0;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Resample to `target_rate` with a Hann-windowed sinc kernel. The kernel is
/// normalized per output sample, which preserves DC exactly and removes edge
/// droop. Output length is `round(len * target / source)`, so duration is
/// preserved within one sample period.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if w.is_empty() {
        return Err(Error::EmptyWaveform);
    }
    if target_rate == 0 {
        return Err(Error::Config("target_rate must be positive".into()));
    }
    if target_rate == w.sample_rate {
        return Ok(w.clone());
    }
    let ratio = target_rate as f64 / w.sample_rate as f64;
    // cutoff relative to the input Nyquist: anti-alias when downsampling
    let cutoff = ratio.min(1.0);
    let half_width = TAPS / cutoff;
    let n_out = ((w.len() as f64) * ratio).round().max(1.0) as usize;
    let n_in = w.len() as isize;

    let mut out = Vec::with_capacity(n_out);
    for n in 0..n_out {
        let t = n as f64 / ratio; // position in input-sample coordinates
        let lo = ((t - half_width).ceil() as isize).max(0);
        let hi = ((t + half_width).floor() as isize).min(n_in - 1);
        let mut acc = 0.0;
        let mut norm = 0.0;
        for m in lo..=hi {
            let tau = t - m as f64;
            let u = tau * cutoff / TAPS; // in [-1, 1] over the kernel support
            let window = 0.5 * (1.0 + (std::f64::consts::PI * u).cos());
            let k = cutoff * sinc(cutoff * tau) * window;
            acc += w.samples[m as usize] * k;
            norm += k;
        }
        out.push(if norm.abs() > 1e-12 { acc / norm } else { 0.0 });
    }
    Waveform::new(out, target_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::stft_magnitude;

    #[test]
    fn empty_input_is_rejected() {
        let w = Waveform::new(vec![], 44100).unwrap();
        assert!(matches!(resample(&w, 22050), Err(Error::EmptyWaveform)));
    }

    #[test]
    fn identity_rate_returns_identical_samples() {
        let samples: Vec<f64> = (0..100).map(|i| (i as f64 * 0.1).sin()).collect();
        let w = Waveform::new(samples.clone(), 22050).unwrap();
        let r = resample(&w, 22050).unwrap();
        assert_eq!(r.samples, samples);
    }

    #[test]
    fn dc_is_preserved_in_the_interior() {
        let w = Waveform::new(vec![0.5; 4410], 44100).unwrap();
        let r = resample(&w, 22050).unwrap();
        assert_eq!(r.sample_rate, 22050);
        // duration within one output sample period
        assert!((r.len() as i64 - 2205).unsigned_abs() <= 1);
        for &v in &r.samples[64..r.len() - 64] {
            assert!((v - 0.5).abs() < 1e-6, "interior sample {v}");
        }
    }

    #[test]
    fn sine_peak_bin_survives_downsampling() {
        // 440 Hz at 44100 -> 22050: the dominant STFT bin must be unchanged
        let rate_in = 44100u32;
        let rate_out = 22050u32;
        let secs = 0.6;
        let n = (rate_in as f64 * secs) as usize;
        let samples: Vec<f64> = (0..n)
            .map(|i| (std::f64::consts::TAU * 440.0 * i as f64 / rate_in as f64).sin() * 0.8)
            .collect();
        let w = Waveform::new(samples, rate_in).unwrap();

        let peak_bin = |w: &Waveform, win: usize| -> usize {
            let m = stft_magnitude(w, win, win).unwrap();
            let n_frames = m.shape()[1];
            // use the middle frame, away from edges
            let frame = n_frames / 2;
            let mut best = (0usize, f64::MIN);
            for b in 0..m.shape()[0] {
                let v = m.values()[b * n_frames + frame];
                if v > best.1 {
                    best = (b, v);
                }
            }
            best.0
        };

        // bin spacing rate/win is equal (2048 @ 44100 vs 1024 @ 22050)
        let before = peak_bin(&w, 2048);
        let after = peak_bin(&resample(&w, rate_out).unwrap(), 1024);
        assert_eq!(before, after);
        // sanity: 440 Hz should land at round(440 * 2048 / 44100) = 20
        assert_eq!(before, 20);
    }

    #[test]
    fn upsampling_preserves_dc_too() {
        let w = Waveform::new(vec![0.25; 2000], 22050).unwrap();
        let r = resample(&w, 44100).unwrap();
        assert!((r.len() as i64 - 4000).unsigned_abs() <= 1);
        for &v in &r.samples[64..r.len() - 64] {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }
}
