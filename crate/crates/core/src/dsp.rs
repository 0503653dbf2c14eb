//! Small DSP building blocks shared by the generators and the analysis stages.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// Symmetric Hamming window of length `n`.
pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n).map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos()).collect()
}

/// Four-term Blackman-Harris window (about -92 dB sidelobes).
pub fn blackman_harris(n: usize) -> Vec<f64> {
    const A: [f64; 4] = [0.35875, 0.48829, 0.14128, 0.01168];
    if n == 1 {
        return vec![1.0];
    }
    let m = (n - 1) as f64;
    (0..n)
        .map(|i| {
            let x = 2.0 * PI * i as f64 / m;
            A[0] - A[1] * x.cos() + A[2] * (2.0 * x).cos() - A[3] * (3.0 * x).cos()
        })
        .collect()
}

/// Forward FFT of a real signal zero-padded (or truncated) to `n` points.
pub fn rfft(x: &[f64], n: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = (0..n).map(|i| Complex64::new(x.get(i).copied().unwrap_or(0.0), 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf
}

/// Inverse FFT returning the real part, scaled by `1/n`.
pub fn irfft(spec: &[Complex64]) -> Vec<f64> {
    let n = spec.len();
    let mut buf = spec.to_vec();
    FftPlanner::new().plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

/// Magnitude of the DFT of `x` at `freq_hz` (Goertzel recurrence).
pub fn goertzel(x: &[f64], freq_hz: f64, sample_rate_hz: f64) -> f64 {
    let w = 2.0 * PI * freq_hz / sample_rate_hz;
    let coeff = 2.0 * w.cos();
    let (mut s1, mut s2) = (0.0, 0.0);
    for &v in x {
        let s0 = v + coeff * s1 - s2;
        s2 = s1;
        s1 = s0;
    }
    let re = s1 - s2 * w.cos();
    let im = s2 * w.sin();
    (re * re + im * im).sqrt()
}

/// Windowed-sinc FIR low-pass (Hamming), `taps` odd, unity DC gain.
pub fn lowpass_fir(cutoff_hz: f64, sample_rate_hz: f64, taps: usize) -> Vec<f64> {
    let fc = cutoff_hz / sample_rate_hz;
    let mid = (taps / 2) as f64;
    let win = hamming(taps);
    let mut h: Vec<f64> = (0..taps)
        .map(|i| {
            let t = i as f64 - mid;
            let sinc = if t == 0.0 { 2.0 * fc } else { (2.0 * PI * fc * t).sin() / (PI * t) };
            sinc * win[i]
        })
        .collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= sum);
    h
}

/// Zero-phase ("same" length) convolution with an odd-length FIR.
pub fn filter_same(x: &[f64], h: &[f64]) -> Vec<f64> {
    let half = h.len() / 2;
    let n = x.len();
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for (k, &hk) in h.iter().enumerate() {
                let j = i as isize + half as isize - k as isize;
                if j >= 0 && (j as usize) < n {
                    acc += hk * x[j as usize];
                }
            }
            acc
        })
        .collect()
}

/// Correlation of `x` against `template` at lag `i`: `sum_k t[k]·x[i+k]`.
#[inline]
pub fn xcorr_at(x: &[f64], template: &[f64], i: usize) -> f64 {
    template.iter().zip(&x[i..i + template.len()]).map(|(a, b)| a * b).sum()
}

/// Valid-mode cross-correlation; output length `x.len() - template.len() + 1`.
pub fn xcorr_valid(x: &[f64], template: &[f64]) -> Vec<f64> {
    if x.len() < template.len() {
        return Vec::new();
    }
    (0..=x.len() - template.len()).map(|i| xcorr_at(x, template, i)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn energy(a: &[f64]) -> f64 {
    dot(a, a)
}

/// `round(k · period)` as a sample index; used for every periodic schedule so
/// generators and analysis agree on fractional-sample periods.
#[inline]
pub fn slot_start(k: usize, period_samples: f64) -> usize {
    (k as f64 * period_samples).round() as usize
}
