//! Cohort evaluation: ROC sweeps over synthetic ears and latency benchmarks.
//!
//! Each cohort entry is one simulated ear with a known ground truth. A
//! protocol turns it into per-band SNRs once; the ROC sweep then re-decides
//! every ear at each threshold without re-running the signal chain.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::buffer::PULSE_RATE_HZ;
use crate::ear::{preset, simulate_ear, SpeakerModel};
use crate::error::{config_err, Error, Result};
use crate::extract::{teoae_extract, BandSnrReport, ExtractConfig, OaeSession};
use crate::screening::{decide, run_session, Outcome, SessionConfig, SimulatedEar, Thresholds};
use crate::signal::{gen_pulse_train, gen_stimulus_pulse, gen_teoae_train, PulseConfig};

/// Thresholds swept by [`roc`], in dB.
pub const SWEEP_DB: std::ops::RangeInclusive<i32> = -20..=40;
/// Emission offsets of the default cohort, relative to the presets.
pub const DEFAULT_OFFSET_DB: std::ops::Range<f64> = -22.5..-6.5;
/// Ambient levels of the default cohort.
pub const DEFAULT_NOISE_DB_SPL: std::ops::Range<f64> = 35.0..45.0;
/// Seconds of pulses in one benchmark window.
pub const BENCH_WINDOW_S: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruth {
    Normal,
    Loss,
}

/// One synthetic ear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortEntry {
    /// Name of an ear preset.
    pub ear: String,
    pub truth: GroundTruth,
    pub seed: u64,
    pub noise_db_spl: f64,
    pub duration_s: f64,
    /// Added to every emission band of the preset.
    #[serde(default)]
    pub oae_offset_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub entries: Vec<CohortEntry>,
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        for t in [GroundTruth::Normal, GroundTruth::Loss] {
            if !self.entries.iter().any(|e| e.truth == t) {
                return config_err(format!("cohort has no {t:?} ear"));
            }
        }
        let mut seeds: Vec<u64> = self.entries.iter().map(|e| e.seed).collect();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return config_err("cohort seeds must be unique");
        }
        for e in &self.entries {
            preset(&e.ear)?;
            if !(e.duration_s > 0.0) {
                return config_err(format!("entry {}: duration must be positive", e.seed));
            }
        }
        Ok(())
    }

    /// Fifty ears: 44 with healthy cochleae (three of them with middle-ear
    /// fluid) and 6 with hearing loss (one conductive). Emission strength
    /// and ambient noise vary per ear.
    pub fn default_cohort() -> Self {
        Self::synthetic(DEFAULT_OFFSET_DB, DEFAULT_NOISE_DB_SPL)
    }

    /// Fifty ears in the default composition with emission offsets and
    /// ambient levels drawn uniformly from the given ranges.
    pub fn synthetic(offset_db: std::ops::Range<f64>, noise_db_spl: std::ops::Range<f64>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let groups = [
            ("normal_adult", GroundTruth::Normal, 31),
            ("normal_infant", GroundTruth::Normal, 10),
            ("middle_ear_fluid", GroundTruth::Normal, 3),
            ("hearing_loss", GroundTruth::Loss, 5),
            ("middle_ear_fluid", GroundTruth::Loss, 1),
        ];
        let mut entries = Vec::new();
        for (ear, truth, n) in groups {
            for _ in 0..n {
                entries.push(CohortEntry {
                    ear: ear.to_string(),
                    truth,
                    seed: 1000 + entries.len() as u64,
                    noise_db_spl: rng.random_range(noise_db_spl.clone()),
                    duration_s: 66.0,
                    oae_offset_db: rng.random_range(offset_db.clone()),
                });
            }
        }
        Self { entries }
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::Toml(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// Measurement protocol compared by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Ranged delay, uniform pulses, odd/even combination.
    Oaebuds,
    /// Uniform pulses analysed from a fixed 2.5 ms delay.
    OaebudsFixed2p5,
    /// Conventional {1,1,1,-3} train from a 2.5 ms delay.
    Teoae2p5,
    /// Conventional {1,1,1,-3} train from a 12 ms delay.
    Teoae12,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [Self::Oaebuds, Self::OaebudsFixed2p5, Self::Teoae2p5, Self::Teoae12];

    pub fn name(self) -> &'static str {
        match self {
            Self::Oaebuds => "oaebuds",
            Self::OaebudsFixed2p5 => "oaebuds_fixed2p5",
            Self::Teoae2p5 => "teoae2p5",
            Self::Teoae12 => "teoae12",
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| Error::Config(format!("unknown protocol {s:?}")))
    }
}

/// Per-ear measurement; `report` is absent when nothing survived gating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarScore {
    pub truth: GroundTruth,
    pub report: Option<BandSnrReport>,
}

impl EarScore {
    /// Whether the ear passes at `th`.
    pub fn passes(&self, th: &Thresholds) -> Result<bool> {
        match &self.report {
            Some(r) => Ok(decide(r, th)?.outcome == Outcome::Pass),
            None => Ok(false),
        }
    }
}

/// Runs one ear through `protocol` with the given speaker.
pub fn score_entry(
    entry: &CohortEntry,
    protocol: Protocol,
    speaker: &SpeakerModel,
    cfg: &SessionConfig,
) -> Result<EarScore> {
    let model = preset(&entry.ear)?.with_noise(entry.noise_db_spl).with_oae_offset(entry.oae_offset_db);
    let pulses = (entry.duration_s / cfg.pulse.gap_s).floor() as usize;
    let report = match protocol {
        Protocol::Oaebuds | Protocol::OaebudsFixed2p5 => {
            let mut cfg = cfg.clone();
            cfg.fit.skip = true;
            cfg.pulse.count = pulses;
            if protocol == Protocol::OaebudsFixed2p5 {
                cfg.t_d_override_s = Some(0.0025);
            }
            let mut ear = SimulatedEar::new(model, speaker.clone(), entry.seed);
            run_session(&mut ear, &cfg, None)?.report
        }
        Protocol::Teoae2p5 | Protocol::Teoae12 => {
            let delay = if protocol == Protocol::Teoae2p5 { 0.0025 } else { 0.012 };
            let p = PulseConfig { count: pulses / 4 * 4, amplitude: cfg.pulse.amplitude / 3.0, ..cfg.pulse };
            let mic = simulate_ear(&model, speaker, &gen_teoae_train(&p)?, entry.seed)?;
            let template = gen_stimulus_pulse(&cfg.pulse)?.into_samples();
            match teoae_extract(&mic, &template, delay, &cfg.extract) {
                Ok(r) => Some(r),
                Err(Error::InsufficientData(_)) => None,
                Err(e) => return Err(e),
            }
        }
    };
    Ok(EarScore { truth: entry.truth, report })
}

/// Scores every entry in parallel, in cohort order.
pub fn score_cohort(
    cohort: &CohortSpec,
    protocol: Protocol,
    speaker: &SpeakerModel,
    cfg: &SessionConfig,
) -> Result<Vec<EarScore>> {
    cohort.validate()?;
    cohort.entries.par_iter().map(|e| score_entry(e, protocol, speaker, cfg)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold_db: f64,
    /// Fraction of normal ears that pass.
    pub sensitivity: f64,
    /// Fraction of loss ears that are referred.
    pub specificity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    pub bands_required: usize,
    pub points: Vec<RocPoint>,
    pub auc: f64,
    /// Middle of the first run of thresholds maximizing
    /// sensitivity + specificity.
    pub optimal_threshold_db: f64,
}

impl RocResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold_db,sensitivity,specificity\n");
        for p in &self.points {
            writeln!(s, "{},{},{}", p.threshold_db, p.sensitivity, p.specificity).expect("write to string");
        }
        s
    }

    pub fn point_at(&self, threshold_db: f64) -> Option<&RocPoint> {
        self.points.iter().find(|p| p.threshold_db == threshold_db)
    }
}

/// Sweeps the band SNR threshold. An ear counts as detected normal when at
/// least `bands_required` bands reach the threshold; the signal floor and
/// noise flag are not part of the sweep.
pub fn roc(scores: &[EarScore], bands_required: usize, thresholds: impl IntoIterator<Item = f64>) -> Result<RocResult> {
    let normals = scores.iter().filter(|s| s.truth == GroundTruth::Normal).count();
    let losses = scores.len() - normals;
    if normals == 0 || losses == 0 {
        return config_err("ROC needs ears of both classes");
    }
    let mut points = Vec::new();
    for threshold_db in thresholds {
        let th = Thresholds {
            min_bands: bands_required,
            snr_db: threshold_db,
            floor_db_spl: f64::NEG_INFINITY,
            noise_flag_db_spl: f64::INFINITY,
        };
        let (mut tp, mut tn) = (0, 0);
        for s in scores {
            match (s.truth, s.passes(&th)?) {
                (GroundTruth::Normal, true) => tp += 1,
                (GroundTruth::Loss, false) => tn += 1,
                _ => {}
            }
        }
        points.push(RocPoint {
            threshold_db,
            sensitivity: tp as f64 / normals as f64,
            specificity: tn as f64 / losses as f64,
        });
    }
    if points.is_empty() {
        return config_err("empty threshold sweep");
    }
    points.sort_by(|a, b| a.threshold_db.total_cmp(&b.threshold_db));
    Ok(RocResult { bands_required, auc: auc(&points), optimal_threshold_db: optimal_threshold(&points), points })
}

/// Trapezoidal area under (1 - specificity, sensitivity), closed with the
/// corners (0, 0) and (1, 1).
fn auc(points: &[RocPoint]) -> f64 {
    let mut xy: Vec<(f64, f64)> = points.iter().map(|p| (1.0 - p.specificity, p.sensitivity)).collect();
    xy.push((0.0, 0.0));
    xy.push((1.0, 1.0));
    xy.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    xy.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

fn optimal_threshold(points: &[RocPoint]) -> f64 {
    let score = |p: &RocPoint| p.sensitivity + p.specificity;
    let best = points.iter().map(score).fold(f64::NEG_INFINITY, f64::max);
    let first = points.iter().position(|p| score(p) == best).expect("non-empty");
    let run = points[first..].iter().take_while(|p| score(p) == best).count();
    (points[first].threshold_db + points[first + run - 1].threshold_db) / 2.0
}

/// The standard −20..40 dB sweep in 1 dB steps.
pub fn sweep() -> impl Iterator<Item = f64> {
    SWEEP_DB.map(f64::from)
}

/// Per-window processing latency of the extraction pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchStats {
    pub windows: usize,
    pub p50_ms: Option<f64>,
    pub p99_ms: Option<f64>,
    pub mean_ms: Option<f64>,
    pub total_ms: f64,
}

impl BenchStats {
    pub fn from_samples(mut ms: Vec<f64>) -> Self {
        ms.sort_by(f64::total_cmp);
        let total_ms = ms.iter().sum();
        let rank =
            |q: f64| (!ms.is_empty()).then(|| ms[((q * ms.len() as f64).ceil() as usize).clamp(1, ms.len()) - 1]);
        Self {
            windows: ms.len(),
            p50_ms: rank(0.50),
            p99_ms: rank(0.99),
            mean_ms: (!ms.is_empty()).then(|| total_ms / ms.len() as f64),
            total_ms,
        }
    }
}

/// Times `windows` one-second pushes of a simulated normal ear through a
/// streaming session.
pub fn bench(windows: usize, seed: u64) -> Result<BenchStats> {
    if windows == 0 {
        return Ok(BenchStats::from_samples(Vec::new()));
    }
    let window = (BENCH_WINDOW_S * PULSE_RATE_HZ as f64) as usize;
    let pulse = PulseConfig::default();
    let count = (windows as f64 * BENCH_WINDOW_S / pulse.gap_s).ceil() as usize + 1;
    let train = gen_pulse_train(&PulseConfig { count, ..pulse })?;
    let mic = simulate_ear(&preset("normal_adult")?, &SpeakerModel::identity(), &train, seed)?;
    let cfg = ExtractConfig::default();
    let mut session = OaeSession::new(&gen_stimulus_pulse(&pulse)?.into_samples(), 0.005, &cfg)?;
    let mut ms = Vec::with_capacity(windows);
    for w in 0..windows {
        let chunk = mic.slice(w * window, (w + 1) * window);
        let t = Instant::now();
        session.push(&chunk)?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(BenchStats::from_samples(ms))
}
