//! Stimulus generators: FMCW ranging chirps, band-limited pulses and pulse
//! trains, the {1,1,1,-3} click train, dual tones and probe-fit chirps.
//!
//! Every generator is a pure function of its configuration, so two calls
//! with the same config return bit-identical buffers.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::buffer::{SampleBuffer, FMCW_RATE_HZ, I16_MAX, PULSE_RATE_HZ};
use crate::calibration::Calibration;
use crate::dsp;
use crate::error::{config_err, Error, Result};

/// Peak level of the screening pulse.
pub const PULSE_LEVEL_DB_PESPL: f64 = 84.0;

/// Polarity/amplitude pattern of the conventional transient-evoked train.
pub const TEOAE_PATTERN: [f64; 4] = [1.0, 1.0, 1.0, -3.0];

/// Linear FMCW chirp, `f0 → f1` over `duration_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChirpConfig {
    pub f0_hz: f64,
    pub f1_hz: f64,
    pub duration_s: f64,
    pub amplitude: f64,
    pub sample_rate_hz: u32,
}

impl Default for ChirpConfig {
    fn default() -> Self {
        Self {
            f0_hz: 5_000.0,
            f1_hz: 15_000.0,
            duration_s: 0.2,
            amplitude: Calibration::default().amplitude(PULSE_LEVEL_DB_PESPL),
            sample_rate_hz: FMCW_RATE_HZ,
        }
    }
}

impl ChirpConfig {
    pub fn bandwidth_hz(&self) -> f64 {
        self.f1_hz - self.f0_hz
    }

    pub fn len(&self) -> usize {
        (self.duration_s * self.sample_rate_hz as f64).round() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate_hz as f64 / 2.0;
        if !(self.f0_hz > 0.0 && self.f0_hz < self.f1_hz && self.f1_hz <= nyquist) {
            return config_err(format!(
                "chirp needs 0 < f0 < f1 <= fs/2, got f0={} f1={} fs={}",
                self.f0_hz, self.f1_hz, self.sample_rate_hz
            ));
        }
        if !(self.duration_s > 0.0) || self.is_empty() {
            return config_err(format!("chirp duration {} s", self.duration_s));
        }
        check_amplitude(self.amplitude)
    }

    /// Instantaneous phase `2π(f0·t + B·t²/(2T))`.
    pub fn phase(&self, t: f64) -> f64 {
        2.0 * PI * (self.f0_hz * t + self.bandwidth_hz() * t * t / (2.0 * self.duration_s))
    }
}

/// Band-limited, Hamming-windowed pulse and the train built from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseConfig {
    pub pulse_duration_s: f64,
    pub band_lo_hz: f64,
    pub band_hi_hz: f64,
    /// Pulse period; the pulse occupies the head of each period.
    pub gap_s: f64,
    pub count: usize,
    pub amplitude: f64,
    pub sample_rate_hz: u32,
}

impl Default for PulseConfig {
    fn default() -> Self {
        Self {
            pulse_duration_s: 500e-6,
            band_lo_hz: 0.0,
            band_hi_hz: 5_000.0,
            gap_s: 0.020,
            count: 3300,
            amplitude: Calibration::default().amplitude(PULSE_LEVEL_DB_PESPL),
            sample_rate_hz: PULSE_RATE_HZ,
        }
    }
}

impl PulseConfig {
    pub fn pulse_len(&self) -> usize {
        (self.pulse_duration_s * self.sample_rate_hz as f64).round() as usize
    }

    /// Pulse period in (fractional) samples.
    pub fn period_samples(&self) -> f64 {
        self.gap_s * self.sample_rate_hz as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.pulse_len() < 2 {
            return config_err(format!("pulse of {} s is shorter than 2 samples", self.pulse_duration_s));
        }
        if !(self.gap_s > self.pulse_duration_s) {
            return config_err(format!("gap {} s must exceed pulse {} s", self.gap_s, self.pulse_duration_s));
        }
        let nyquist = self.sample_rate_hz as f64 / 2.0;
        if self.band_hi_hz > nyquist || self.band_lo_hz < 0.0 || self.band_lo_hz >= self.band_hi_hz {
            return config_err(format!(
                "pulse band [{}, {}] Hz invalid at fs={}",
                self.band_lo_hz, self.band_hi_hz, self.sample_rate_hz
            ));
        }
        check_amplitude(self.amplitude)
    }
}

fn check_amplitude(a: f64) -> Result<()> {
    if !(a > 0.0 && a <= I16_MAX) {
        return Err(Error::Clipping(a));
    }
    Ok(())
}

pub fn gen_fmcw_chirp(cfg: &ChirpConfig) -> Result<SampleBuffer> {
    cfg.validate()?;
    let fs = cfg.sample_rate_hz as f64;
    let samples = (0..cfg.len()).map(|i| cfg.amplitude * cfg.phase(i as f64 / fs).cos()).collect();
    SampleBuffer::mono(samples, cfg.sample_rate_hz)
}

const PULSE_FFT_LEN: usize = 1024;

/// Rounds of brick-wall filtering and truncation applied to the pulse.
const PULSE_PROJECTIONS: usize = 64;

/// The band-limited pulse before the Hamming window, scaled to unit peak.
///
/// A rectangle of `pulse_len` samples is centered in a zero-padded frame,
/// every DFT bin outside `[band_lo, band_hi]` is zeroed, and the central
/// `pulse_len` samples are kept. A single pass leaves the truncation edges
/// spraying energy out of band, so the filter-and-truncate step is repeated
/// until the short pulse settles on its most band-concentrated shape.
pub fn band_limited_pulse(cfg: &PulseConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = cfg.pulse_len();
    let nfft = PULSE_FFT_LEN.max((4 * n).next_power_of_two());
    let start = nfft / 2 - n / 2;
    let df = cfg.sample_rate_hz as f64 / nfft as f64;
    let mut core = vec![1.0; n];
    for _ in 0..PULSE_PROJECTIONS {
        let mut frame = vec![0.0; nfft];
        frame[start..start + n].copy_from_slice(&core);
        let mut spec = dsp::rfft(&frame, nfft);
        for (k, bin) in spec.iter_mut().enumerate() {
            let f = k.min(nfft - k) as f64 * df;
            if f < cfg.band_lo_hz || f > cfg.band_hi_hz {
                *bin = Default::default();
            }
        }
        core = dsp::irfft(&spec)[start..start + n].to_vec();
        let peak = core.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak == 0.0 {
            return config_err("pulse band removes all energy");
        }
        core.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(core)
}

/// One windowed stimulus pulse with peak `cfg.amplitude`.
pub fn gen_stimulus_pulse(cfg: &PulseConfig) -> Result<SampleBuffer> {
    let proto = band_limited_pulse(cfg)?;
    let win = dsp::hamming(proto.len());
    let shaped: Vec<f64> = proto.iter().zip(&win).map(|(p, w)| p * w).collect();
    let peak = shaped.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    SampleBuffer::mono(shaped.iter().map(|v| v / peak * cfg.amplitude).collect(), cfg.sample_rate_hz)
}

/// Places `pulse` scaled by `gains[k]` at the head of period `k`.
fn place_pulses(pulse: &[f64], gains: impl Iterator<Item = f64>, cfg: &PulseConfig) -> Result<SampleBuffer> {
    let period = cfg.period_samples();
    let total = dsp::slot_start(cfg.count, period);
    let mut out = vec![0.0; total];
    for (k, g) in gains.take(cfg.count).enumerate() {
        let at = dsp::slot_start(k, period);
        for (i, &p) in pulse.iter().enumerate() {
            out[at + i] = g * p;
        }
    }
    SampleBuffer::mono(out, cfg.sample_rate_hz)
}

/// `count` pulses, one at the head of each `gap_s` period.
pub fn gen_pulse_train(cfg: &PulseConfig) -> Result<SampleBuffer> {
    let pulse = gen_stimulus_pulse(cfg)?;
    place_pulses(pulse.samples(), std::iter::repeat(1.0), cfg)
}

/// Conventional click train with the {1,1,1,-3} pattern repeated.
pub fn gen_teoae_train(cfg: &PulseConfig) -> Result<SampleBuffer> {
    if !cfg.count.is_multiple_of(4) {
        return config_err(format!("TEOAE train needs a multiple of 4 pulses, got {}", cfg.count));
    }
    let pulse = gen_stimulus_pulse(cfg)?;
    let loudest = cfg.amplitude * 3.0;
    if loudest > I16_MAX {
        return Err(Error::Clipping(loudest));
    }
    place_pulses(pulse.samples(), TEOAE_PATTERN.iter().copied().cycle(), cfg)
}

/// Sum of two sinusoids at the given levels (dB SPL, `-inf` for silence).
pub fn gen_dual_tone(
    cal: &Calibration,
    f1_hz: f64,
    f2_hz: f64,
    level1_db: f64,
    level2_db: f64,
    duration_s: f64,
    sample_rate_hz: u32,
) -> Result<SampleBuffer> {
    let fs = sample_rate_hz as f64;
    if f1_hz <= 0.0 || f2_hz <= 0.0 || f1_hz.max(f2_hz) >= fs / 2.0 {
        return config_err(format!("tones {f1_hz}/{f2_hz} Hz outside (0, fs/2)"));
    }
    if !(duration_s > 0.0) {
        return config_err("dual tone duration must be positive");
    }
    let (a1, a2) = (cal.amplitude(level1_db), cal.amplitude(level2_db));
    if a1 + a2 > I16_MAX {
        return Err(Error::Clipping(a1 + a2));
    }
    let n = (duration_s * fs).round() as usize;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            a1 * (2.0 * PI * f1_hz * t).sin() + a2 * (2.0 * PI * f2_hz * t).sin()
        })
        .collect();
    SampleBuffer::mono(samples, sample_rate_hz)
}

/// Short chirps used to check whether the probe is sealed in the ear.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeChirpConfig {
    pub f0_hz: f64,
    pub f1_hz: f64,
    pub segment_s: f64,
    pub level_db_pespl: f64,
    pub sample_rate_hz: u32,
}

impl Default for ProbeChirpConfig {
    fn default() -> Self {
        Self { f0_hz: 100.0, f1_hz: 5_500.0, segment_s: 0.020, level_db_pespl: 80.0, sample_rate_hz: PULSE_RATE_HZ }
    }
}

impl ProbeChirpConfig {
    pub fn period_samples(&self) -> f64 {
        self.segment_s * self.sample_rate_hz as f64
    }

    /// Frame range `[start, end)` of segment `k`.
    pub fn segment(&self, k: usize) -> (usize, usize) {
        let p = self.period_samples();
        (dsp::slot_start(k, p), dsp::slot_start(k + 1, p))
    }
}

pub fn gen_probe_chirp_seq(count: usize) -> Result<SampleBuffer> {
    gen_probe_chirp_seq_with(&ProbeChirpConfig::default(), &Calibration::default(), count)
}

/// `count` back-to-back linear chirps; segment `k` spans `segment(k)`.
pub fn gen_probe_chirp_seq_with(cfg: &ProbeChirpConfig, cal: &Calibration, count: usize) -> Result<SampleBuffer> {
    let mut out = Vec::with_capacity(cfg.segment(count).0);
    for k in 0..count {
        let (a, b) = cfg.segment(k);
        let chirp = ChirpConfig {
            f0_hz: cfg.f0_hz,
            f1_hz: cfg.f1_hz,
            duration_s: (b - a) as f64 / cfg.sample_rate_hz as f64,
            amplitude: cal.amplitude(cfg.level_db_pespl),
            sample_rate_hz: cfg.sample_rate_hz,
        };
        out.extend_from_slice(gen_fmcw_chirp(&chirp)?.samples());
    }
    SampleBuffer::mono(out, cfg.sample_rate_hz)
}
