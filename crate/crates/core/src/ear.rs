//! Synthetic ear canal, cochlea and transducer.
//!
//! The simulator turns a stimulus buffer into what the in-ear microphone would
//! record: the stimulus passed through a (possibly nonlinear) speaker, echoed
//! by a set of discrete reflection taps, thinned at low frequencies when the
//! probe is not sealed, plus tonotopic emission bursts after every stimulus
//! onset and white background noise.
//!
//! Reflections are strictly linear in the stimulus while the emission grows as
//! `level^exponent`. That asymmetry is what both the time-gated protocol and
//! the {1,1,1,-3} summation rely on, and the tests lean on it as an oracle.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::buffer::{SampleBuffer, FMCW_RATE_HZ, I16_MAX, I16_MIN, PULSE_RATE_HZ};
use crate::calibration::Calibration;
use crate::dsp;
use crate::error::{config_err, Error, Result};
use crate::signal::PULSE_LEVEL_DB_PESPL;

/// One echo path: delay after the direct sound and linear gain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tap {
    pub delay_s: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HearingStatus {
    Normal,
    Loss,
    Fluid,
    ClosedTube,
}

/// Emission component for one clinical band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OaeBand {
    pub center_hz: f64,
    /// Level of the burst for a stimulus at the reference peak.
    pub level_db_spl: f64,
    /// Burst start after the stimulus onset.
    pub latency_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarModel {
    pub reflection_taps: Vec<Tap>,
    pub oae_bands: Vec<OaeBand>,
    pub oae_compression_exponent: f64,
    pub hearing_status: HearingStatus,
    pub noise_level_db_spl: f64,
    /// Gain below ~300 Hz. A sealed canal keeps its full low-frequency
    /// pressure (0 dB); an unsealed probe leaks it (about -20 dB).
    #[serde(default)]
    pub low_shelf_db: f64,
    /// Extra emission loss applied when `hearing_status` is `fluid`.
    #[serde(default = "default_fluid")]
    pub fluid_attenuation_db: f64,
    #[serde(default = "default_burst")]
    pub burst_duration_s: f64,
    /// Stimulus peak at which each band emits exactly `level_db_spl`.
    #[serde(default = "default_reference_peak")]
    pub reference_peak: f64,
    #[serde(default)]
    pub calibration: Calibration,
}

fn default_fluid() -> f64 {
    35.0
}
fn default_burst() -> f64 {
    0.005
}
fn default_reference_peak() -> f64 {
    Calibration::default().amplitude(PULSE_LEVEL_DB_PESPL)
}

/// Memoryless polynomial speaker: `y = FS · Σ c_k (x/FS)^(k+1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerModel {
    pub harmonic_coeffs: Vec<f64>,
}

impl SpeakerModel {
    pub fn identity() -> Self {
        Self { harmonic_coeffs: vec![1.0] }
    }

    /// Mild second- and third-order distortion typical of a low-cost driver.
    pub fn low_cost() -> Self {
        Self { harmonic_coeffs: vec![1.0, 0.05, 0.3] }
    }

    pub fn is_identity(&self) -> bool {
        self.harmonic_coeffs.first() == Some(&1.0) && self.harmonic_coeffs[1..].iter().all(|&c| c == 0.0)
    }

    pub fn drive(&self, x: f64) -> f64 {
        let u = x / I16_MAX;
        // Horner over u·(c0 + c1 u + c2 u² ...)
        let poly = self.harmonic_coeffs.iter().rev().fold(0.0, |acc, &c| acc * u + c);
        I16_MAX * u * poly
    }
}

impl Default for SpeakerModel {
    fn default() -> Self {
        Self::identity()
    }
}

/// Clinical band centers, in the order reports use.
pub const BAND_CENTERS_HZ: [f64; 5] = [1000.0, 1500.0, 2000.0, 3000.0, 4000.0];
const DEFAULT_LATENCIES_S: [f64; 5] = [0.012, 0.010, 0.008, 0.006, 0.005];

/// Run of exact silence (in seconds) that separates two stimulus onsets.
const ONSET_MIN_QUIET_S: f64 = 0.002;
/// Window after an onset over which the stimulus peak is measured.
const ONSET_PEAK_WINDOW_S: f64 = 0.001;
const ONSET_FLOOR: f64 = 1e-6 * I16_MAX;
const SHELF_CORNER_HZ: f64 = 300.0;

impl EarModel {
    pub fn validate(&self) -> Result<()> {
        for t in &self.reflection_taps {
            if !(t.delay_s >= 0.0) || !(t.gain.abs() > 0.0 && t.gain.abs() <= 1.0) {
                return config_err(format!("tap {t:?}: need delay >= 0 and |gain| in (0, 1]"));
            }
        }
        for b in &self.oae_bands {
            if !(b.latency_s > 0.0) {
                return config_err(format!("band {} Hz latency must be > 0", b.center_hz));
            }
        }
        let mut bands = self.oae_bands.clone();
        bands.sort_by(|a, b| a.center_hz.total_cmp(&b.center_hz));
        if bands.windows(2).any(|w| w[1].latency_s >= w[0].latency_s) {
            return config_err("emission latency must decrease with band frequency");
        }
        if !(self.oae_compression_exponent > 0.0 && self.oae_compression_exponent <= 1.0) {
            return config_err(format!("compression exponent {} not in (0, 1]", self.oae_compression_exponent));
        }
        if self.hearing_status == HearingStatus::Fluid && self.fluid_attenuation_db < 30.0 {
            return config_err("fluid attenuation must be at least 30 dB");
        }
        if !(self.burst_duration_s > 0.0) || !(self.reference_peak > 0.0) {
            return config_err("burst duration and reference peak must be positive");
        }
        if self.noise_level_db_spl.is_nan() {
            return config_err("noise level is NaN");
        }
        Ok(())
    }

    /// Emission level after hearing status is applied; `-inf` means none.
    pub fn effective_level_db(&self, band: &OaeBand) -> f64 {
        match self.hearing_status {
            HearingStatus::Normal => band.level_db_spl,
            HearingStatus::Fluid => band.level_db_spl - self.fluid_attenuation_db,
            HearingStatus::Loss | HearingStatus::ClosedTube => f64::NEG_INFINITY,
        }
    }

    pub fn with_noise(mut self, db_spl: f64) -> Self {
        self.noise_level_db_spl = db_spl;
        self
    }

    /// Shifts every band level by `db`.
    pub fn with_oae_offset(mut self, db: f64) -> Self {
        self.oae_bands.iter_mut().for_each(|b| b.level_db_spl += db);
        self
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: EarModel = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}

/// A stimulus onset found in the transmitted signal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StimulusOnset {
    pub index: usize,
    pub peak: f64,
    pub polarity: f64,
}

/// Onsets are the first non-silent sample after at least 2 ms of silence.
pub fn stimulus_onsets(x: &[f64], sample_rate_hz: u32) -> Vec<StimulusOnset> {
    let fs = sample_rate_hz as f64;
    let min_quiet = (ONSET_MIN_QUIET_S * fs).round() as usize;
    let peak_len = ((ONSET_PEAK_WINDOW_S * fs).round() as usize).max(1);
    let mut quiet = min_quiet;
    let mut out = Vec::new();
    for (i, &v) in x.iter().enumerate() {
        if v.abs() <= ONSET_FLOOR {
            quiet += 1;
            continue;
        }
        if quiet >= min_quiet {
            let seg = &x[i..(i + peak_len).min(x.len())];
            let pk = seg.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(v);
            out.push(StimulusOnset { index: i, peak: pk.abs(), polarity: pk.signum() });
        }
        quiet = 0;
    }
    out
}

fn check_rate(rate: u32) -> Result<()> {
    if rate == PULSE_RATE_HZ || rate == FMCW_RATE_HZ {
        Ok(())
    } else {
        Err(Error::SampleRate(rate))
    }
}

/// Linear part of the channel: speaker, reflection taps and leak shelf.
fn acoustic_path(model: &EarModel, speaker: &SpeakerModel, x: &[f64], fs: f64) -> Vec<f64> {
    let driven: Vec<f64> =
        if speaker.is_identity() { x.to_vec() } else { x.iter().map(|&v| speaker.drive(v)).collect() };
    let n = driven.len();
    let mut y = vec![0.0; n];
    for tap in &model.reflection_taps {
        let d = (tap.delay_s * fs).round() as usize;
        if d >= n {
            continue;
        }
        for (o, &v) in y[d..].iter_mut().zip(&driven[..n - d]) {
            *o += tap.gain * v;
        }
    }
    if model.low_shelf_db != 0.0 {
        // First-order low shelf: y + (G - 1)·lowpass(y).
        let g = 10f64.powf(model.low_shelf_db / 20.0) - 1.0;
        let a = (-2.0 * PI * SHELF_CORNER_HZ / fs).exp();
        let mut lp = 0.0;
        for v in y.iter_mut() {
            lp = (1.0 - a) * *v + a * lp;
            *v += g * lp;
        }
    }
    y
}

/// Adds the tonotopic emission bursts for every onset in `stimulus` to `y`.
fn add_emissions(model: &EarModel, stimulus: &[f64], fs: f64, y: &mut [f64]) {
    let burst_len = (model.burst_duration_s * fs).round() as usize;
    let window = dsp::hamming(burst_len.max(1));
    let onsets = stimulus_onsets(stimulus, fs as u32);
    for band in &model.oae_bands {
        let level = model.effective_level_db(band);
        if level == f64::NEG_INFINITY {
            continue;
        }
        let base = model.calibration.amplitude(level);
        let start = (band.latency_s * fs).round() as usize;
        for on in &onsets {
            let amp = base * (on.peak / model.reference_peak).powf(model.oae_compression_exponent) * on.polarity;
            let at = on.index + start;
            for (i, w) in window.iter().enumerate() {
                let Some(slot) = y.get_mut(at + i) else { break };
                *slot += amp * w * (2.0 * PI * band.center_hz * i as f64 / fs).sin();
            }
        }
    }
}

/// Microphone signal for `stimulus` played into `model` through `speaker`.
///
/// Output length equals the stimulus length. The result is saturated to the
/// 16-bit range like a real converter would.
pub fn simulate_ear(
    model: &EarModel,
    speaker: &SpeakerModel,
    stimulus: &SampleBuffer,
    seed: u64,
) -> Result<SampleBuffer> {
    check_rate(stimulus.sample_rate_hz())?;
    if stimulus.channels() != 1 {
        return config_err("stimulus must be mono");
    }
    model.validate()?;
    let fs = stimulus.sample_rate_hz() as f64;
    let x = stimulus.samples();
    let mut y = acoustic_path(model, speaker, x, fs);
    add_emissions(model, x, fs, &mut y);
    add_noise(&mut y, model.calibration.noise_sigma(model.noise_level_db_spl), seed);
    y.iter_mut().for_each(|v| *v = v.clamp(I16_MIN, I16_MAX));
    Ok(SampleBuffer::mono(y, stimulus.sample_rate_hz())?.with_start_frame(stimulus.start_frame()))
}

/// Two-channel capture: channel 0 is the in-ear microphone, channel 1 the
/// second microphone, which hears only ambient noise.
pub fn simulate_ear_stereo(
    model: &EarModel,
    speaker: &SpeakerModel,
    stimulus: &SampleBuffer,
    seed: u64,
) -> Result<SampleBuffer> {
    let ear = simulate_ear(model, speaker, stimulus, seed)?;
    let mut ambient = vec![0.0; stimulus.len()];
    add_noise(&mut ambient, model.calibration.noise_sigma(model.noise_level_db_spl), seed ^ 0x5_EED0_FA11);
    ambient.iter_mut().for_each(|v| *v = v.clamp(I16_MIN, I16_MAX));
    SampleBuffer::stereo(&ear, &SampleBuffer::mono(ambient, stimulus.sample_rate_hz())?)
}

fn add_noise(y: &mut [f64], sigma: f64, seed: u64) {
    if !(sigma > 0.0) {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    for v in y.iter_mut() {
        *v += normal.sample(&mut rng);
    }
}

/// Rigid cavity of `volume_cc`: dense sub-millisecond round trips, no emission.
pub fn closed_tube_model(volume_cc: f64) -> Result<EarModel> {
    if !(volume_cc > 0.0) {
        return config_err(format!("tube volume {volume_cc} cc"));
    }
    // 7.5 mm bore; 1 cc is about 2.3 cm long.
    const BORE_AREA_CM2: f64 = 0.44;
    const SPEED_CM_S: f64 = 34_300.0;
    const WALL_GAIN: f64 = 0.7;
    let round_trip = 2.0 * (volume_cc / BORE_AREA_CM2) / SPEED_CM_S;
    let mut taps = vec![Tap { delay_s: 0.0, gain: 1.0 }];
    let mut k = 1;
    while WALL_GAIN.powi(k) > 10f64.powf(-50.0 / 20.0) {
        taps.push(Tap { delay_s: round_trip * k as f64, gain: WALL_GAIN.powi(k) });
        k += 1;
    }
    Ok(EarModel {
        reflection_taps: taps,
        oae_bands: Vec::new(),
        oae_compression_exponent: 1.0,
        hearing_status: HearingStatus::ClosedTube,
        noise_level_db_spl: 40.0,
        low_shelf_db: 0.0,
        fluid_attenuation_db: default_fluid(),
        burst_duration_s: default_burst(),
        reference_peak: default_reference_peak(),
        calibration: Calibration::default(),
    })
}

pub fn simulate_closed_tube(volume_cc: f64, stimulus: &SampleBuffer, seed: u64) -> Result<SampleBuffer> {
    simulate_ear(&closed_tube_model(volume_cc)?, &SpeakerModel::identity(), stimulus, seed)
}

/// Canal echoes: a few strong early reflections from the case and canal walls
/// followed by an exponentially decaying tail that ends at `tail_end_s`.
fn canal_taps(scale: f64, tail_end_s: f64) -> Vec<Tap> {
    let mut taps = vec![
        Tap { delay_s: 0.0, gain: 1.0 },
        Tap { delay_s: 0.13e-3 * scale, gain: 0.45 },
        Tap { delay_s: 0.30e-3 * scale, gain: 0.30 },
        Tap { delay_s: 0.55e-3 * scale, gain: 0.18 },
    ];
    // -20 dB at 0.8 ms, falling 7.5 dB per ms.
    let mut t = 0.8e-3;
    while t <= tail_end_s + 1e-12 {
        let db = -20.0 - 7.5 * (t - 0.8e-3) * 1e3;
        taps.push(Tap { delay_s: t, gain: 10f64.powf(db / 20.0) });
        t += 0.2e-3;
    }
    taps
}

/// Faint diffuse echoes inside the earbud case that outlast the canal tail.
/// They sit far below the ranging threshold and so reach the emission window.
pub fn case_residual_taps(level_db: f64) -> Vec<Tap> {
    let mut rng = ChaCha8Rng::seed_from_u64(CASE_RESIDUAL_SEED);
    let mut taps: Vec<Tap> = (0..CASE_RESIDUAL_TAPS)
        .map(|_| {
            let delay_s = rng.random_range(5.2e-3..19.5e-3);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let db = level_db - CASE_RESIDUAL_DECAY_DB_PER_MS * (delay_s - 5.2e-3) * 1e3;
            Tap { delay_s, gain: sign * 10f64.powf(db / 20.0) }
        })
        .collect();
    taps.sort_by(|a, b| a.delay_s.total_cmp(&b.delay_s));
    taps
}

fn default_bands(levels: [f64; 5]) -> Vec<OaeBand> {
    BAND_CENTERS_HZ
        .iter()
        .zip(DEFAULT_LATENCIES_S)
        .zip(levels)
        .map(|((&center_hz, latency_s), level_db_spl)| OaeBand { center_hz, level_db_spl, latency_s })
        .collect()
}

/// Low-frequency loss of an unsealed probe relative to a sealed canal.
pub const OPEN_EAR_LEAK_DB: f64 = -20.0;

const ADULT_LEVELS: [f64; 5] = [25.0, 27.0, 28.0, 26.0, 24.0];
/// Level of the earliest case echo relative to the direct pulse.
pub const CASE_RESIDUAL_DB: f64 = -72.0;
const CASE_RESIDUAL_DECAY_DB_PER_MS: f64 = 1.0;
const CASE_RESIDUAL_TAPS: usize = 24;
const CASE_RESIDUAL_SEED: u64 = 0xCA5E;

fn base_model(taps: Vec<Tap>, levels: [f64; 5], status: HearingStatus) -> EarModel {
    EarModel {
        reflection_taps: taps,
        oae_bands: default_bands(levels),
        oae_compression_exponent: 0.3,
        hearing_status: status,
        noise_level_db_spl: 40.0,
        low_shelf_db: 0.0,
        fluid_attenuation_db: default_fluid(),
        burst_duration_s: default_burst(),
        reference_peak: default_reference_peak(),
        calibration: Calibration::default(),
    }
}

/// Named ear models used by tests, the CLI and the synthetic cohort.
pub fn presets() -> BTreeMap<&'static str, EarModel> {
    let residual = case_residual_taps(CASE_RESIDUAL_DB);
    let adult = [canal_taps(1.0, 5.0e-3), residual.clone()].concat();
    let infant = [canal_taps(0.6, 3.6e-3), residual].concat();
    let mut m = BTreeMap::new();
    m.insert("normal_adult", base_model(adult.clone(), ADULT_LEVELS, HearingStatus::Normal));
    m.insert("normal_infant", base_model(infant, ADULT_LEVELS.map(|l| l + 3.0), HearingStatus::Normal));
    m.insert("hearing_loss", base_model(adult.clone(), ADULT_LEVELS, HearingStatus::Loss));
    m.insert("middle_ear_fluid", base_model(adult, ADULT_LEVELS, HearingStatus::Fluid));
    m.insert("closed_tube_1cc", closed_tube_model(1.0).expect("valid volume"));
    let mut out = base_model(
        vec![Tap { delay_s: 0.0, gain: 0.03 }, Tap { delay_s: 0.2e-3, gain: 0.01 }],
        ADULT_LEVELS,
        HearingStatus::Normal,
    );
    out.oae_bands.clear();
    out.low_shelf_db = OPEN_EAR_LEAK_DB;
    m.insert("out_of_ear", out);
    m
}

pub fn preset(name: &str) -> Result<EarModel> {
    presets().remove(name).ok_or_else(|| {
        Error::Config(format!(
            "unknown preset {name:?}; known: {}",
            presets().keys().copied().collect::<Vec<_>>().join(", ")
        ))
    })
}
