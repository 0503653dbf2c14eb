//! Pass/refer decisions, probe-fit detection and the screening session.
//!
//! A session walks `Idle → FitCheck → Ranging → Measuring → Done`. The fit
//! check plays short chirps until the 200 Hz response shows a sealed probe,
//! ranging fixes the analysis delay, and measuring streams the pulse train
//! through an [`OaeSession`] one second at a time.

use std::sync::mpsc::Sender;

use serde::{Deserialize, Serialize};

use crate::buffer::SampleBuffer;
use crate::calibration::Calibration;
use crate::dsp;
use crate::ear::{closed_tube_model, preset, simulate_ear, EarModel, SpeakerModel};
use crate::error::{config_err, Error, Result};
use crate::extract::{BandSnrReport, ExtractConfig, OaeSession, ProgressEvent, BANDS};
use crate::fmcw::{self, DEFAULT_DELAY_S, DEFAULT_THRESHOLD_DB};
use crate::signal::{
    gen_probe_chirp_seq_with, gen_pulse_train, gen_stimulus_pulse, ChirpConfig, ProbeChirpConfig, PulseConfig,
};

/// Midway between the simulator's sealed (about 61.5 dB SPL) and open (about
/// 22.5 dB SPL) readings at 200 Hz during a fit-check chirp.
pub const FIT_THRESHOLD_DB_SPL: f64 = 42.0;
pub const FIT_PROBE_HZ: f64 = 200.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub min_bands: usize,
    pub snr_db: f64,
    /// A band only counts when its signal level is above this.
    pub floor_db_spl: f64,
    /// Mean band noise above this makes the result noisy.
    pub noise_flag_db_spl: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { min_bands: 2, snr_db: 8.0, floor_db_spl: -10.0, noise_flag_db_spl: 6.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pass,
    Refer,
    Noisy,
}

impl Outcome {
    /// Process exit code for this outcome.
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Pass => 0,
            Outcome::Refer => 1,
            Outcome::Noisy => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningVerdict {
    pub outcome: Outcome,
    pub bands_passed: Vec<String>,
    /// Absent when no batch survived gating.
    pub report: Option<BandSnrReport>,
    pub t_d_used_s: f64,
    pub duration_s: f64,
    pub probe_fit: bool,
}

/// Band-level decision. Session fields (`t_d_used_s`, `duration_s`,
/// `probe_fit`) are left zero for the caller to fill in.
pub fn decide(report: &BandSnrReport, th: &Thresholds) -> Result<ScreeningVerdict> {
    let bands = report.ordered()?;
    let passed: Vec<String> = BANDS
        .iter()
        .zip(&bands)
        .filter(|(_, b)| b.snr_db >= th.snr_db && b.signal_db_spl > th.floor_db_spl)
        .map(|((key, ..), _)| key.to_string())
        .collect();
    let mean_noise = report.mean_noise_db_spl()?;
    let outcome = if mean_noise > th.noise_flag_db_spl {
        Outcome::Noisy
    } else if passed.len() >= th.min_bands {
        Outcome::Pass
    } else {
        Outcome::Refer
    };
    Ok(ScreeningVerdict {
        outcome,
        bands_passed: passed,
        report: Some(report.clone()),
        t_d_used_s: 0.0,
        duration_s: 0.0,
        probe_fit: false,
    })
}

/// Verdict for a recording in which no batch was usable.
fn noisy_verdict() -> ScreeningVerdict {
    ScreeningVerdict {
        outcome: Outcome::Noisy,
        bands_passed: Vec::new(),
        report: None,
        t_d_used_s: 0.0,
        duration_s: 0.0,
        probe_fit: false,
    }
}

impl ScreeningVerdict {
    /// Session report with per-band pass flags.
    pub fn to_json_value(&self, th: &Thresholds) -> serde_json::Value {
        let mut bands = serde_json::Map::new();
        if let Some(r) = &self.report {
            for (key, b) in &r.bands {
                let passed = b.snr_db >= th.snr_db && b.signal_db_spl > th.floor_db_spl;
                bands.insert(
                    key.clone(),
                    serde_json::json!({
                        "signal_db_spl": b.signal_db_spl,
                        "noise_db_spl": b.noise_db_spl,
                        "snr_db": b.snr_db,
                        "passed": passed,
                    }),
                );
            }
        }
        serde_json::json!({
            "outcome": self.outcome,
            "bands": bands,
            "t_d_ms": self.t_d_used_s * 1e3,
            "duration_s": self.duration_s,
            "batches_used": self.report.as_ref().map_or(0, |r| r.batches_used),
            "batches_discarded": self.report.as_ref().map_or(0, |r| r.batches_discarded),
            "probe_fit": self.probe_fit,
        })
    }
}

/// Counts consecutive fit-check chirps whose 200 Hz level clears a threshold.
#[derive(Debug, Clone)]
pub struct ProbeFitDetector {
    threshold_db_spl: f64,
    required: usize,
    consecutive: usize,
    chirps_seen: usize,
    calibration: Calibration,
    sample_rate_hz: f64,
    in_ear_at: Option<usize>,
}

impl ProbeFitDetector {
    pub fn new(threshold_db_spl: f64, required: usize, calibration: Calibration, sample_rate_hz: u32) -> Self {
        Self {
            threshold_db_spl,
            required: required.max(1),
            consecutive: 0,
            chirps_seen: 0,
            calibration,
            sample_rate_hz: sample_rate_hz as f64,
            in_ear_at: None,
        }
    }

    /// 200 Hz level of one chirp response.
    pub fn level_db_spl(&self, segment: &[f64]) -> f64 {
        if segment.is_empty() {
            return self.calibration.level_db(0.0);
        }
        let mag = dsp::goertzel(segment, FIT_PROBE_HZ, self.sample_rate_hz);
        self.calibration.level_db(2.0 * mag / segment.len() as f64)
    }

    /// Feeds one chirp response; returns `true` once the probe is in the ear.
    pub fn push(&mut self, segment: &[f64]) -> bool {
        self.chirps_seen += 1;
        if self.in_ear_at.is_some() {
            return true;
        }
        if self.level_db_spl(segment) > self.threshold_db_spl {
            self.consecutive += 1;
        } else {
            self.consecutive = 0;
        }
        if self.consecutive >= self.required {
            self.in_ear_at = Some(self.chirps_seen);
        }
        self.in_ear_at.is_some()
    }

    pub fn consecutive(&self) -> usize {
        self.consecutive
    }

    pub fn chirps_seen(&self) -> usize {
        self.chirps_seen
    }

    /// Number of chirps heard when the fit was confirmed.
    pub fn in_ear_at(&self) -> Option<usize> {
        self.in_ear_at
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitCheckResult {
    pub in_ear: bool,
    /// Time from the first chirp to the confirming chirp's end.
    pub confirmed_after_s: Option<f64>,
    pub chirps_seen: usize,
}

/// Runs the fit rule over a recorded sequence of probe-chirp responses.
pub fn probe_fit_check(
    mic: &SampleBuffer,
    probe: &ProbeChirpConfig,
    threshold_db_spl: f64,
    required_chirps: usize,
    calibration: Calibration,
) -> Result<FitCheckResult> {
    if mic.sample_rate_hz() != probe.sample_rate_hz {
        return Err(Error::SampleRate(mic.sample_rate_hz()));
    }
    let mono = if mic.channels() == 1 { mic.clone() } else { mic.channel(0)? };
    let mut det = ProbeFitDetector::new(threshold_db_spl, required_chirps, calibration, probe.sample_rate_hz);
    let mut k = 0;
    loop {
        let (a, b) = probe.segment(k);
        if b > mono.len() || det.push(&mono.samples()[a..b]) {
            break;
        }
        k += 1;
    }
    let confirmed_after_s = det.in_ear_at().map(|n| probe.segment(n).0 as f64 / probe.sample_rate_hz as f64);
    Ok(FitCheckResult { in_ear: confirmed_after_s.is_some(), confirmed_after_s, chirps_seen: det.chirps_seen() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub threshold_db_spl: f64,
    pub required_chirps: usize,
    pub timeout_s: f64,
    /// Chirps played per capture.
    pub block_chirps: usize,
    pub skip: bool,
    pub probe: ProbeChirpConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            threshold_db_spl: FIT_THRESHOLD_DB_SPL,
            required_chirps: 50,
            timeout_s: 30.0,
            block_chirps: 50,
            skip: false,
            probe: ProbeChirpConfig::default(),
        }
    }
}

/// Every tunable of a screening session, loadable from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub calibration: Calibration,
    pub thresholds: Thresholds,
    pub fit: FitConfig,
    pub chirp: ChirpConfig,
    pub reflection_threshold_db: f64,
    /// Skips ranging and uses this analysis delay instead.
    pub t_d_override_s: Option<f64>,
    pub pulse: PulseConfig,
    pub extract: ExtractConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            calibration: Calibration::default(),
            thresholds: Thresholds::default(),
            fit: FitConfig::default(),
            chirp: ChirpConfig::default(),
            reflection_threshold_db: DEFAULT_THRESHOLD_DB,
            t_d_override_s: None,
            pulse: PulseConfig::default(),
            extract: ExtractConfig::default(),
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.calibration.full_scale_db_spl.is_finite() {
            return config_err("calibration must be finite");
        }
        if self.calibration != self.extract.calibration {
            return config_err("calibration and extract.calibration differ");
        }
        if self.thresholds.min_bands == 0 || self.thresholds.min_bands > BANDS.len() {
            return config_err(format!("min_bands {} not in 1..=5", self.thresholds.min_bands));
        }
        if !(self.fit.timeout_s > 0.0) || self.fit.block_chirps == 0 {
            return config_err("fit timeout and block size must be positive");
        }
        if let Some(t) = self.t_d_override_s {
            self.extract.oae_window(t)?;
        }
        if (self.pulse.gap_s - self.extract.gap_s).abs() > 1e-12 {
            return config_err("pulse.gap_s and extract.gap_s differ");
        }
        self.chirp.validate()?;
        self.pulse.validate()?;
        self.extract.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut c: SessionConfig = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        // A top-level calibration applies everywhere unless extract names its own.
        let v: toml::Value = text.parse().map_err(|e: toml::de::Error| Error::Toml(e.to_string()))?;
        let extract_has_cal = v.get("extract").and_then(|e| e.get("calibration")).is_some();
        if !extract_has_cal {
            c.extract.calibration = c.calibration;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Idle,
    FitCheck,
    Ranging,
    Measuring,
    Done,
}

/// Stage a capture belongs to; ranging audio runs at the FMCW rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    FitCheck,
    Ranging,
    Measuring,
}

/// Something that can play a stimulus and return what the in-ear microphone
/// heard. `Ok(None)` means the source has no audio for that stage.
pub trait EarSource {
    fn capture(&mut self, stage: Stage, stimulus: &SampleBuffer) -> Result<Option<SampleBuffer>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    State { state: SessionState },
    Fit { chirps_seen: usize, consecutive: usize },
    Ranging { t_d_ms: f64, used_default: bool, per_chirp_ms: Vec<f64> },
    Progress(ProgressEvent),
    Done { outcome: Outcome },
}

impl SessionEvent {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("events are always serializable")
    }
}

struct Emitter<'a>(Option<&'a Sender<SessionEvent>>);

impl Emitter<'_> {
    fn send(&self, e: SessionEvent) {
        if let Some(tx) = self.0 {
            // A consumer that went away does not stop the session.
            let _ = tx.send(e);
        }
    }

    fn state(&self, state: SessionState) {
        self.send(SessionEvent::State { state });
    }
}

/// Runs a full screening session against `source`.
///
/// Errors with [`Error::Aborted`] when the fit check times out. A measurement
/// in which no batch survives gating yields a `noisy` verdict.
pub fn run_session(
    source: &mut dyn EarSource,
    cfg: &SessionConfig,
    events: Option<&Sender<SessionEvent>>,
) -> Result<ScreeningVerdict> {
    cfg.validate()?;
    let emit = Emitter(events);
    emit.state(SessionState::Idle);
    let mut elapsed = 0.0;

    let probe_fit = if cfg.fit.skip {
        false
    } else {
        emit.state(SessionState::FitCheck);
        elapsed += fit_check(source, cfg, &emit)?;
        true
    };

    let t_d_s = match cfg.t_d_override_s {
        Some(t) => t,
        None => {
            emit.state(SessionState::Ranging);
            let burst = fmcw::gen_ranging_burst(&cfg.chirp)?;
            elapsed += burst.duration_s();
            match source.capture(Stage::Ranging, &burst)? {
                Some(rx) => {
                    let spectra = fmcw::ranging_spectra(&rx, &cfg.chirp)?;
                    let est = fmcw::estimate_reflection_delay(&spectra, cfg.reflection_threshold_db)?;
                    emit.send(SessionEvent::Ranging {
                        t_d_ms: est.t_d_s * 1e3,
                        used_default: est.used_default,
                        per_chirp_ms: est.per_chirp_estimates.iter().map(|t| t * 1e3).collect(),
                    });
                    est.t_d_s
                }
                None => {
                    emit.send(SessionEvent::Ranging {
                        t_d_ms: DEFAULT_DELAY_S * 1e3,
                        used_default: true,
                        per_chirp_ms: Vec::new(),
                    });
                    DEFAULT_DELAY_S
                }
            }
        }
    };

    emit.state(SessionState::Measuring);
    let template = gen_stimulus_pulse(&cfg.pulse)?.into_samples();
    let train = gen_pulse_train(&cfg.pulse)?;
    let mic = source
        .capture(Stage::Measuring, &train)?
        .ok_or_else(|| Error::InsufficientData("source returned no measurement audio".into()))?;
    let mut session = OaeSession::new(&template, t_d_s, &cfg.extract)?;
    let chunk = (cfg.extract.search_window_s * cfg.extract.sample_rate_hz as f64).round() as usize;
    let mut start = 0;
    while start < mic.len() {
        let p = session.push(&mic.slice(start, start + chunk))?;
        emit.send(SessionEvent::Progress(p));
        start += chunk;
    }
    elapsed += mic.duration_s();
    let (report, ..) = session.finish_counts();
    let mut verdict = match report {
        Ok(r) => decide(&r, &cfg.thresholds)?,
        Err(Error::InsufficientData(_)) => noisy_verdict(),
        Err(e) => return Err(e),
    };
    verdict.t_d_used_s = t_d_s;
    verdict.duration_s = elapsed;
    verdict.probe_fit = probe_fit;
    emit.state(SessionState::Done);
    emit.send(SessionEvent::Done { outcome: verdict.outcome });
    Ok(verdict)
}

/// Plays fit-check blocks until the probe is sealed; returns time spent.
fn fit_check(source: &mut dyn EarSource, cfg: &SessionConfig, emit: &Emitter) -> Result<f64> {
    let probe = cfg.fit.probe;
    let mut det =
        ProbeFitDetector::new(cfg.fit.threshold_db_spl, cfg.fit.required_chirps, cfg.calibration, probe.sample_rate_hz);
    let block = gen_probe_chirp_seq_with(&probe, &cfg.calibration, cfg.fit.block_chirps)?;
    let mut elapsed = 0.0;
    while elapsed < cfg.fit.timeout_s {
        let Some(mic) = source.capture(Stage::FitCheck, &block)? else {
            return Err(Error::Aborted("no audio during fit check".into()));
        };
        let mono = if mic.channels() == 1 { mic } else { mic.channel(0)? };
        for k in 0..cfg.fit.block_chirps {
            let (a, b) = probe.segment(k);
            if b > mono.len() {
                break;
            }
            if det.push(&mono.samples()[a..b]) {
                emit.send(SessionEvent::Fit { chirps_seen: det.chirps_seen(), consecutive: det.consecutive() });
                return Ok(elapsed + b as f64 / probe.sample_rate_hz as f64);
            }
        }
        elapsed += block.duration_s();
        emit.send(SessionEvent::Fit { chirps_seen: det.chirps_seen(), consecutive: det.consecutive() });
    }
    Err(Error::Aborted(format!("probe not in ear after {:.0} s", cfg.fit.timeout_s)))
}

/// Ear simulator as a session source. Each capture draws fresh noise, and the
/// probe can be held outside the ear for the first `insert_after_s` seconds
/// of the fit check.
#[derive(Debug, Clone)]
pub struct SimulatedEar {
    pub model: EarModel,
    pub speaker: SpeakerModel,
    pub seed: u64,
    pub insert_after_s: f64,
    captures: u64,
    fit_elapsed_s: f64,
}

impl SimulatedEar {
    pub fn new(model: EarModel, speaker: SpeakerModel, seed: u64) -> Self {
        Self { model, speaker, seed, insert_after_s: 0.0, captures: 0, fit_elapsed_s: 0.0 }
    }

    pub fn inserted_after(mut self, seconds: f64) -> Self {
        self.insert_after_s = seconds;
        self
    }

    fn next_seed(&mut self) -> u64 {
        self.captures += 1;
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(self.captures)
    }
}

impl EarSource for SimulatedEar {
    fn capture(&mut self, stage: Stage, stimulus: &SampleBuffer) -> Result<Option<SampleBuffer>> {
        let seed = self.next_seed();
        let inside = simulate_ear(&self.model, &self.speaker, stimulus, seed)?;
        if stage != Stage::FitCheck {
            return Ok(Some(inside));
        }
        let fs = stimulus.sample_rate_hz() as f64;
        let start = self.fit_elapsed_s;
        self.fit_elapsed_s += stimulus.duration_s();
        let cut = (((self.insert_after_s - start) * fs).ceil().max(0.0) as usize).min(stimulus.len());
        if cut == 0 {
            return Ok(Some(inside));
        }
        let out_model = preset("out_of_ear")?.with_noise(self.model.noise_level_db_spl);
        let outside = simulate_ear(&out_model, &self.speaker, stimulus, seed ^ 0xA5A5)?;
        let mut mixed = outside.samples()[..cut].to_vec();
        mixed.extend_from_slice(&inside.samples()[cut..]);
        Ok(Some(SampleBuffer::mono(mixed, stimulus.sample_rate_hz())?))
    }
}

/// Recorded microphone audio: a measurement capture and optionally the
/// ranging capture. Has no fit-check audio.
#[derive(Debug, Clone)]
pub struct RecordedEar {
    pub ranging: Option<SampleBuffer>,
    pub measuring: SampleBuffer,
}

impl EarSource for RecordedEar {
    fn capture(&mut self, stage: Stage, _stimulus: &SampleBuffer) -> Result<Option<SampleBuffer>> {
        Ok(match stage {
            Stage::FitCheck => None,
            Stage::Ranging => self.ranging.clone(),
            Stage::Measuring => Some(self.measuring.clone()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrityResult {
    pub passed: bool,
    pub runs: Vec<ScreeningVerdict>,
}

pub const INTEGRITY_REPEATS: usize = 3;

/// Screens a 1 cc closed cavity three times. Passes only if every run refers
/// with every band below the SNR threshold.
pub fn probe_integrity_check(cfg: &SessionConfig, seed: u64) -> Result<IntegrityResult> {
    let mut cfg = cfg.clone();
    cfg.fit.skip = true;
    let runs = (0..INTEGRITY_REPEATS)
        .map(|k| {
            let mut tube = SimulatedEar::new(closed_tube_model(1.0)?, SpeakerModel::identity(), seed + k as u64);
            run_session(&mut tube, &cfg, None)
        })
        .collect::<Result<Vec<_>>>()?;
    let passed = runs.iter().all(|v| {
        v.outcome == Outcome::Refer
            && v.report.as_ref().is_some_and(|r| r.bands.values().all(|b| b.snr_db < cfg.thresholds.snr_db))
    });
    Ok(IntegrityResult { passed, runs })
}
