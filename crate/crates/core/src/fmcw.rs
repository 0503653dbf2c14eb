//! Reflection ranging with FMCW chirps.
//!
//! Multiplying the received chirp by the transmitted one turns every echo of
//! delay `τ` into a beat tone at `Δf = τ·B/T`. After a low-pass and an FFT the
//! spectrum reads directly as echo power against delay. The analysis window
//! for the emission starts where that spectrum falls into sustained quiet.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::buffer::SampleBuffer;
use crate::dsp;
use crate::error::{config_err, Error, Result};
use crate::signal::{gen_fmcw_chirp, ChirpConfig};

/// Delay used when a chirp never reaches sustained quiet.
pub const DEFAULT_DELAY_S: f64 = 0.012;
/// Delays past this are not searched.
pub const MAX_DELAY_S: f64 = 0.020;
pub const DEFAULT_THRESHOLD_DB: f64 = 55.0;
/// Silence between consecutive ranging chirps.
pub const CHIRP_GAP_S: f64 = 0.050;
pub const RANGING_CHIRPS: usize = 3;

const LOWPASS_TAPS: usize = 255;

/// Echo power per delay bin, in dB relative to bin 0 of a loopback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelaySpectrum {
    pub bin_delays_s: Vec<f64>,
    pub bin_power_db: Vec<f64>,
    /// Nominal resolution `1/(2B)`.
    pub resolution_s: f64,
}

impl DelaySpectrum {
    /// Power of each bin relative to bin 0 of this spectrum.
    pub fn relative_db(&self) -> impl Iterator<Item = f64> + '_ {
        let p0 = self.bin_power_db.first().copied().unwrap_or(0.0);
        self.bin_power_db.iter().map(move |p| p - p0)
    }

    /// Index of the strongest bin at or after `from`.
    pub fn argmax_from(&self, from: usize) -> Option<usize> {
        (from..self.bin_power_db.len()).max_by(|&a, &b| self.bin_power_db[a].total_cmp(&self.bin_power_db[b]))
    }

    /// Delay of the strongest echo at or after bin `from`, refined between
    /// bins by fitting a parabola to the dB values around the peak.
    pub fn peak_delay_s(&self, from: usize) -> Option<f64> {
        let k = self.argmax_from(from)?;
        let p = &self.bin_power_db;
        let step = self.bin_delays_s.get(1).map_or(0.0, |d| d - self.bin_delays_s[0]);
        if k == 0 || k + 1 >= p.len() {
            return Some(self.bin_delays_s[k]);
        }
        let (a, b, c) = (p[k - 1], p[k], p[k + 1]);
        let den = a - 2.0 * b + c;
        let shift = if den < 0.0 { (0.5 * (a - c) / den).clamp(-0.5, 0.5) } else { 0.0 };
        Some(self.bin_delays_s[k] + shift * step)
    }

    /// Moving average (in linear power) over `bins` neighbours; `bins <= 1` is a no-op.
    pub fn smoothed(&self, bins: usize) -> DelaySpectrum {
        if bins <= 1 {
            return self.clone();
        }
        let lin: Vec<f64> = self.bin_power_db.iter().map(|db| 10f64.powf(db / 10.0)).collect();
        let half = bins / 2;
        let bin_power_db = (0..lin.len())
            .map(|i| {
                let lo = i.saturating_sub(half);
                let hi = (i + half + 1).min(lin.len());
                10.0 * (lin[lo..hi].iter().sum::<f64>() / (hi - lo) as f64).log10()
            })
            .collect();
        DelaySpectrum { bin_power_db, ..self.clone() }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("delay_s,power_db\n");
        for (d, p) in self.bin_delays_s.iter().zip(&self.bin_power_db) {
            let _ = writeln!(out, "{d:.8},{p:.4}");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionEstimate {
    pub t_d_s: f64,
    pub used_default: bool,
    pub per_chirp_estimates: [f64; RANGING_CHIRPS],
}

fn fft_len(cfg: &ChirpConfig) -> usize {
    cfg.len().next_power_of_two()
}

/// Unnormalized beat power spectrum of one chirp, bins up to `MAX_DELAY_S`.
fn beat_power(tx: &[f64], rx: &[f64], cfg: &ChirpConfig) -> Vec<f64> {
    let fs = cfg.sample_rate_hz as f64;
    let mixed: Vec<f64> = tx.iter().zip(rx).map(|(a, b)| a * b).collect();
    // Beats of interest stay below MAX_DELAY_S·B/T; the sum-frequency image
    // folds down no lower than fs - 2·f1.
    let max_beat = MAX_DELAY_S * cfg.bandwidth_hz() / cfg.duration_s;
    let lp = dsp::lowpass_fir(1.2 * max_beat, fs, LOWPASS_TAPS);
    let base = dsp::filter_same(&mixed, &lp);
    // Tapering keeps leakage sidelobes below the quiet threshold.
    let win = dsp::blackman_harris(base.len());
    let windowed: Vec<f64> = base.iter().zip(&win).map(|(v, w)| v * w).collect();
    let nfft = fft_len(cfg);
    let spec = dsp::rfft(&windowed, nfft);
    let keep = max_bin(cfg) + 1;
    spec[..keep].iter().map(|c| c.norm_sqr()).collect()
}

fn bin_delay_s(k: usize, cfg: &ChirpConfig) -> f64 {
    let df = cfg.sample_rate_hz as f64 / fft_len(cfg) as f64;
    k as f64 * df * cfg.duration_s / cfg.bandwidth_hz()
}

fn max_bin(cfg: &ChirpConfig) -> usize {
    (0..).take_while(|&k| bin_delay_s(k, cfg) <= MAX_DELAY_S + 1e-12).last().unwrap_or(0)
}

/// Delay spectrum of `rx` against the transmitted chirp `tx`.
pub fn dechirp(tx: &SampleBuffer, rx: &SampleBuffer, cfg: &ChirpConfig) -> Result<DelaySpectrum> {
    cfg.validate()?;
    for b in [tx, rx] {
        if b.sample_rate_hz() != cfg.sample_rate_hz {
            return Err(Error::SampleRate(b.sample_rate_hz()));
        }
        if b.channels() != 1 {
            return config_err("dechirp expects mono buffers");
        }
    }
    if tx.len() != rx.len() {
        return Err(Error::LengthMismatch(format!("tx {} vs rx {} samples", tx.len(), rx.len())));
    }
    if tx.len() != cfg.len() {
        return Err(Error::LengthMismatch(format!("chirp is {} samples, got {}", cfg.len(), tx.len())));
    }
    let reference = beat_power(tx.samples(), tx.samples(), cfg)[0];
    if !(reference > 0.0) {
        return config_err("silent transmit chirp");
    }
    let power = beat_power(tx.samples(), rx.samples(), cfg);
    Ok(DelaySpectrum {
        bin_delays_s: (0..power.len()).map(|k| bin_delay_s(k, cfg)).collect(),
        bin_power_db: power.iter().map(|p| 10.0 * (p / reference).log10()).collect(),
        resolution_s: 1.0 / (2.0 * cfg.bandwidth_hz()),
    })
}

/// Delay of the first bin (after bin 0) from which every later bin up to
/// `MAX_DELAY_S` is at least `threshold_db` below bin 0.
pub fn quiet_delay(spectrum: &DelaySpectrum, threshold_db: f64) -> Option<f64> {
    let rel: Vec<f64> = spectrum.relative_db().collect();
    let last = spectrum.bin_delays_s.iter().rposition(|&d| d <= MAX_DELAY_S + 1e-12)?;
    if last == 0 {
        return None;
    }
    let mut first = None;
    for k in (1..=last).rev() {
        if rel[k] <= -threshold_db {
            first = Some(k);
        } else {
            break;
        }
    }
    first.map(|k| spectrum.bin_delays_s[k])
}

/// Mean quiet delay of the three ranging chirps; a chirp that never goes
/// quiet contributes `DEFAULT_DELAY_S`.
pub fn estimate_reflection_delay(spectra: &[DelaySpectrum], threshold_db: f64) -> Result<ReflectionEstimate> {
    if spectra.len() != RANGING_CHIRPS {
        return Err(Error::InsufficientData(format!("need {RANGING_CHIRPS} chirp spectra, got {}", spectra.len())));
    }
    let mut used_default = false;
    let mut per = [0.0; RANGING_CHIRPS];
    for (slot, s) in per.iter_mut().zip(spectra) {
        *slot = quiet_delay(s, threshold_db).unwrap_or_else(|| {
            used_default = true;
            DEFAULT_DELAY_S
        });
    }
    // Summing in sorted order keeps the mean independent of chirp order.
    let mut sorted = per;
    sorted.sort_by(f64::total_cmp);
    let t_d_s = if sorted[0] == sorted[RANGING_CHIRPS - 1] {
        sorted[0]
    } else {
        sorted.iter().sum::<f64>() / RANGING_CHIRPS as f64
    };
    Ok(ReflectionEstimate { t_d_s, used_default, per_chirp_estimates: per })
}

/// The chirp's sample stride within the ranging burst.
pub fn ranging_stride(cfg: &ChirpConfig) -> usize {
    cfg.len() + (CHIRP_GAP_S * cfg.sample_rate_hz as f64).round() as usize
}

/// Three chirps, each followed by `CHIRP_GAP_S` of silence.
pub fn gen_ranging_burst(cfg: &ChirpConfig) -> Result<SampleBuffer> {
    let chirp = gen_fmcw_chirp(cfg)?;
    let stride = ranging_stride(cfg);
    let mut out = vec![0.0; stride * RANGING_CHIRPS];
    for k in 0..RANGING_CHIRPS {
        out[k * stride..k * stride + chirp.len()].copy_from_slice(chirp.samples());
    }
    SampleBuffer::mono(out, cfg.sample_rate_hz)
}

/// Per-chirp delay spectra of the microphone capture of a ranging burst.
pub fn ranging_spectra(rx: &SampleBuffer, cfg: &ChirpConfig) -> Result<Vec<DelaySpectrum>> {
    let rx = if rx.channels() == 1 { rx.clone() } else { rx.channel(0)? };
    let stride = ranging_stride(cfg);
    if rx.len() < stride * (RANGING_CHIRPS - 1) + cfg.len() {
        return Err(Error::InsufficientData(format!("ranging capture of {} samples is too short", rx.len())));
    }
    let tx = gen_fmcw_chirp(cfg)?;
    (0..RANGING_CHIRPS).map(|k| dechirp(&tx, &rx.slice(k * stride, k * stride + cfg.len()), cfg)).collect()
}
