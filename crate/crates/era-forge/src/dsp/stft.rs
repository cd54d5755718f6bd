//! Short-time Fourier transform magnitudes.

use rustfft::{num_complex::Complex, FftPlanner};

use super::Waveform;
use crate::error::{Error, Result};
use crate::nncore::Tensor;

/// Periodic Hann window of length `n`.
fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (std::f64::consts::TAU * i as f64 / n as f64).cos()))
        .collect()
}

/// Hann-windowed magnitude spectrogram, `[(win/2 + 1) x n_frames]` with
/// frames at offsets `i * hop` and `n_frames = (len - win) / hop + 1`.
pub fn stft_magnitude(w: &Waveform, win: usize, hop: usize) -> Result<Tensor> {
    if !win.is_power_of_two() || win == 0 {
        return Err(Error::Config(format!("window size {win} must be a power of two")));
    }
    if hop == 0 || hop > win {
        return Err(Error::Config(format!("hop {hop} must satisfy 0 < hop <= win ({win})")));
    }
    if w.len() < win {
        return Err(Error::SignalTooShort { len: w.len(), min: win });
    }
    let n_frames = (w.len() - win) / hop + 1;
    let n_bins = win / 2 + 1;
    let window = hann(win);

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(win);
    let mut out = Tensor::zeros(&[n_bins, n_frames]);
    let ov = out.values_mut();
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    for frame in 0..n_frames {
        let start = frame * hop;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = Complex::new(w.samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for bin in 0..n_bins {
            ov[bin * n_frames + frame] = buf[bin].norm();
        }
    }
    Ok(out)
}
