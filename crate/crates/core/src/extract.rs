//! Emission extraction from a pulse-train recording.
//!
//! Three steps run per recording, and incrementally per one-second window:
//!
//! 1. **Sync.** A matched filter against the transmitted pulse finds the
//!    first onset; later onsets are predicted one period ahead and refined
//!    within ±1 ms.
//! 2. **Gate.** Onsets are grouped in fours by pulse slot. A group with a
//!    missing pulse, or whose full-period responses do not correlate above
//!    0.95, is dropped as noisy.
//! 3. **Combine.** The analysis windows of odd and even usable pulses are
//!    averaged separately. Half their sum carries the emission, half their
//!    difference carries only noise. Both are reduced to per-band levels.
//!
//! Every decision depends only on samples at fixed absolute positions, so
//! feeding a recording in chunks gives the same report as feeding it whole.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::buffer::{SampleBuffer, PULSE_RATE_HZ};
use crate::calibration::Calibration;
use crate::dsp;
use crate::error::{config_err, Error, Result};
use crate::signal::TEOAE_PATTERN;

/// Clinical analysis bands: `(key, low edge, high edge)` in Hz.
pub const BANDS: [(&str, f64, f64); 5] = [
    ("1000", 750.0, 1250.0),
    ("1500", 1250.0, 1750.0),
    ("2000", 1750.0, 2500.0),
    ("3000", 2500.0, 3500.0),
    ("4000", 3500.0, 4500.0),
];

pub const BATCH_SIZE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractConfig {
    /// Matched-filter prominence needed to accept an onset, in raw
    /// sample-squared units.
    pub prominence: f64,
    /// Initial guess for the onset-to-onset interval.
    pub predict_offset_s: f64,
    /// Half-width of the onset refinement search.
    pub refine_s: f64,
    /// Pulse period `t_P`.
    pub gap_s: f64,
    pub guard_s: f64,
    pub quality_threshold: f64,
    pub snr_cap_db: f64,
    /// Minimum FFT length for band levels.
    pub nfft: usize,
    pub search_window_s: f64,
    /// Consecutive missed slots before tracking falls back to search.
    pub max_missed_slots: usize,
    /// Alternate odd/even across all usable pulses (otherwise per batch).
    pub global_parity: bool,
    pub calibration: Calibration,
    pub sample_rate_hz: u32,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            prominence: 0.3e8,
            predict_offset_s: 0.0205,
            refine_s: 0.001,
            gap_s: 0.020,
            guard_s: 0.001,
            quality_threshold: 0.95,
            snr_cap_db: 60.0,
            nfft: 512,
            search_window_s: 1.0,
            max_missed_slots: 48,
            global_parity: true,
            calibration: Calibration::default(),
            sample_rate_hz: PULSE_RATE_HZ,
        }
    }
}

impl ExtractConfig {
    fn fs(&self) -> f64 {
        self.sample_rate_hz as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.snr_cap_db.is_finite() && self.snr_cap_db > 0.0) {
            return config_err(format!("snr cap {} dB must be finite and positive", self.snr_cap_db));
        }
        if !(self.prominence > 0.0 && self.prominence.is_finite()) {
            return config_err("prominence must be positive");
        }
        if !(self.gap_s > 0.0 && self.guard_s >= 0.0 && self.refine_s > 0.0 && self.predict_offset_s > 0.0) {
            return config_err("timing parameters must be positive");
        }
        if !(0.0..=1.0).contains(&self.quality_threshold) {
            return config_err("quality threshold must lie in [0, 1]");
        }
        if self.search_window_s * self.fs() < 2.0 * self.gap_s * self.fs() {
            return config_err("search window must span at least two pulse periods");
        }
        if self.nfft == 0 || self.max_missed_slots == 0 {
            return config_err("nfft and max_missed_slots must be nonzero");
        }
        Ok(())
    }

    /// Samples in one full period; the window used for gating.
    pub fn full_gap_len(&self) -> usize {
        (self.gap_s * self.fs()).floor() as usize
    }

    /// Analysis window `[onset + t_D + guard, onset + t_P - guard)` as offsets
    /// from the onset.
    pub fn oae_window(&self, t_d_s: f64) -> Result<(usize, usize)> {
        let start = ((t_d_s + self.guard_s) * self.fs() - 1e-9).ceil().max(0.0) as usize;
        let end = ((self.gap_s - self.guard_s) * self.fs() + 1e-9).floor() as usize;
        if !(t_d_s >= 0.0) || start >= end {
            return config_err(format!("t_D {:.2} ms leaves no analysis window", t_d_s * 1e3));
        }
        Ok((start, end))
    }

    fn refine_len(&self) -> usize {
        (self.refine_s * self.fs()).round() as usize
    }

    fn period_ceil(&self) -> usize {
        (self.gap_s * self.fs()).ceil() as usize
    }
}

/// A detected pulse: absolute sample index, pulse slot counted from the
/// first lock, and matched-filter sign.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Onset {
    pub index: usize,
    pub slot: u64,
    pub polarity: f64,
}

/// Growable view of a stream with old samples trimmed off the front.
#[derive(Debug, Clone, Default)]
struct Stream {
    base: usize,
    data: Vec<f64>,
}

impl Stream {
    fn end(&self) -> usize {
        self.base + self.data.len()
    }

    fn get(&self, start: usize, len: usize) -> &[f64] {
        &self.data[start - self.base..start - self.base + len]
    }

    /// Signed matched-filter output at absolute lag `i`.
    fn xc(&self, template: &[f64], i: usize) -> f64 {
        dsp::xcorr_at(&self.data, template, i - self.base)
    }

    fn trim_before(&mut self, keep_from: usize) {
        if keep_from > self.base {
            let n = (keep_from - self.base).min(self.data.len());
            self.data.drain(..n);
            self.base += n;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mode {
    Search { from: usize },
    Track { lock: usize, lock_slot: u64, slot: usize, interval: f64, misses: usize },
}

/// Onset tracker. Feed it a growing stream; it reports each onset once.
#[derive(Debug, Clone)]
pub struct PulseTracker {
    template: Vec<f64>,
    cfg: ExtractConfig,
    mode: Mode,
    /// Index and slot of the latest onset, for numbering after a re-lock.
    last: Option<(usize, u64)>,
}

impl PulseTracker {
    pub fn new(template: &[f64], cfg: &ExtractConfig) -> Result<Self> {
        cfg.validate()?;
        if template.is_empty() {
            return config_err("empty pulse template");
        }
        Ok(Self { template: template.to_vec(), cfg: *cfg, mode: Mode::Search { from: 0 }, last: None })
    }

    /// Earliest absolute sample the tracker may still read.
    fn earliest_needed(&self) -> usize {
        match self.mode {
            Mode::Search { from } => from,
            Mode::Track { lock, slot, interval, .. } => {
                let p = lock + (interval * (slot + 1) as f64).round() as usize;
                p.saturating_sub(self.cfg.refine_len() + 1)
            }
        }
    }

    fn advance(&mut self, s: &Stream, last: bool, out: &mut Vec<Onset>) {
        let tlen = self.template.len();
        // Lags with a complete template overlap.
        let lag_end = (s.end() + 1).saturating_sub(tlen);
        loop {
            match self.mode {
                Mode::Search { from } => {
                    let win = (self.cfg.search_window_s * self.cfg.fs()).round() as usize;
                    let w_end = from + win;
                    if !last && lag_end < w_end + self.cfg.period_ceil() {
                        return;
                    }
                    let scan_end = w_end.min(lag_end);
                    if from >= scan_end {
                        return;
                    }
                    let mag: Vec<f64> = (from..scan_end).map(|i| s.xc(&self.template, i).abs()).collect();
                    let Some(c) = first_prominent_peak(&mag, from == 0, self.cfg.prominence) else {
                        self.mode = Mode::Search { from: w_end };
                        continue;
                    };
                    // The strongest response before the next slot's refine
                    // range is a direct pulse, not an echo or noise.
                    let c = from + c;
                    let reach = self.cfg.period_ceil() - self.cfg.refine_len();
                    let o = (c..(c + reach).min(lag_end))
                        .max_by(|&a, &b| s.xc(&self.template, a).abs().total_cmp(&s.xc(&self.template, b).abs()))
                        .unwrap_or(c);
                    let period = self.cfg.gap_s * self.cfg.fs();
                    let lock_slot = self.last.map_or(0, |(i, k)| k + ((o - i) as f64 / period).round().max(1.0) as u64);
                    out.push(Onset { index: o, slot: lock_slot, polarity: s.xc(&self.template, o).signum() });
                    self.last = Some((o, lock_slot));
                    self.mode = Mode::Track {
                        lock: o,
                        lock_slot,
                        slot: 0,
                        interval: self.cfg.predict_offset_s * self.cfg.fs(),
                        misses: 0,
                    };
                }
                Mode::Track { lock, lock_slot, slot, interval, misses } => {
                    let k = slot + 1;
                    let p = lock + (interval * k as f64).round() as usize;
                    let r = self.cfg.refine_len();
                    let (lo, hi) = (p - r, p + r);
                    if hi >= lag_end {
                        return;
                    }
                    let (o, v) = (lo..=hi)
                        .map(|i| (i, s.xc(&self.template, i)))
                        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                        .expect("non-empty refine range");
                    if v.abs() >= self.cfg.prominence {
                        let slot = lock_slot + k as u64;
                        out.push(Onset { index: o, slot, polarity: v.signum() });
                        self.last = Some((o, slot));
                        let interval = (o - lock) as f64 / k as f64;
                        self.mode = Mode::Track { lock, lock_slot, slot: k, interval, misses: 0 };
                    } else if misses + 1 >= self.cfg.max_missed_slots {
                        self.mode = Mode::Search { from: hi + 1 };
                    } else {
                        self.mode = Mode::Track { lock, lock_slot, slot: k, interval, misses: misses + 1 };
                    }
                }
            }
        }
    }
}

/// Index of the first local maximum of `x` whose topographic prominence is at
/// least `min_prominence`. With `open_left`, the sample before `x[0]` is taken
/// as zero so a pulse at the very start of a stream still counts.
fn first_prominent_peak(x: &[f64], open_left: bool, min_prominence: f64) -> Option<usize> {
    let n = x.len();
    for i in 0..n {
        let left = if i == 0 {
            if open_left {
                0.0
            } else {
                continue;
            }
        } else {
            x[i - 1]
        };
        if i + 1 >= n || !(x[i] > left && x[i] >= x[i + 1]) {
            continue;
        }
        if x[i] < min_prominence {
            continue;
        }
        let mut left_min = x[i];
        let mut reached_edge = true;
        for j in (0..i).rev() {
            if x[j] > x[i] {
                reached_edge = false;
                break;
            }
            left_min = left_min.min(x[j]);
        }
        if open_left && reached_edge {
            left_min = left_min.min(0.0);
        }
        let mut right_min = x[i];
        for &v in &x[i + 1..] {
            if v > x[i] {
                break;
            }
            right_min = right_min.min(v);
        }
        if x[i] - left_min.max(right_min) >= min_prominence {
            return Some(i);
        }
    }
    None
}

/// Onsets of every pulse in `window` (mono). Returns an empty list when no
/// matched-filter peak reaches the prominence threshold.
pub fn find_pulse_starts(window: &SampleBuffer, template: &[f64], cfg: &ExtractConfig) -> Result<Vec<Onset>> {
    let mono = mono_of(window)?;
    let mut tracker = PulseTracker::new(template, cfg)?;
    let stream = Stream { base: 0, data: mono };
    let mut out = Vec::new();
    tracker.advance(&stream, true, &mut out);
    Ok(out)
}

fn mono_of(b: &SampleBuffer) -> Result<Vec<f64>> {
    Ok(if b.channels() == 1 { b.samples().to_vec() } else { b.channel(0)?.into_samples() })
}

/// Four consecutive onsets and their full-period responses.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseBatch {
    pub onsets: [usize; BATCH_SIZE],
    /// Full-period windows starting at each onset, sign-normalized.
    pub responses: [Vec<f64>; BATCH_SIZE],
    pub quality: f64,
    pub usable: bool,
}

/// Mean energy-normalized zero-lag correlation of adjacent responses.
pub fn batch_quality(responses: &[Vec<f64>]) -> f64 {
    let pairs = responses.len().saturating_sub(1);
    if pairs == 0 {
        return 0.0;
    }
    let sum: f64 = responses
        .windows(2)
        .map(|w| {
            let den = (dsp::energy(&w[0]) * dsp::energy(&w[1])).sqrt();
            if den > 0.0 {
                dsp::dot(&w[0], &w[1]) / den
            } else {
                0.0
            }
        })
        .sum();
    sum / pairs as f64
}

fn make_batch(onsets: &[Onset], s: &Stream, cfg: &ExtractConfig) -> PulseBatch {
    let w = cfg.full_gap_len();
    let responses: [Vec<f64>; BATCH_SIZE] =
        std::array::from_fn(|i| s.get(onsets[i].index, w).iter().map(|v| v * onsets[i].polarity).collect());
    let quality = batch_quality(&responses);
    PulseBatch {
        onsets: std::array::from_fn(|i| onsets[i].index),
        responses,
        quality,
        usable: quality > cfg.quality_threshold,
    }
}

/// Length of the slot group at the front of `pending` once no more of its
/// onsets can arrive. Groups cover slots `4j..4j+3`.
fn closed_group(pending: &[Onset], flush: bool) -> Option<usize> {
    let g = pending.first()?.slot / BATCH_SIZE as u64;
    let n = pending.iter().take_while(|o| o.slot / BATCH_SIZE as u64 == g).count();
    let complete = pending[n - 1].slot % BATCH_SIZE as u64 == BATCH_SIZE as u64 - 1;
    (complete || n < pending.len() || flush).then_some(n)
}

/// Groups onsets into batches of four consecutive slots and scores each one.
/// Groups with a missed pulse are skipped.
/// A trailing partial batch, or one running past the recording, is dropped.
pub fn gate_noise_batches(onsets: &[Onset], recording: &SampleBuffer, cfg: &ExtractConfig) -> Result<Vec<PulseBatch>> {
    let s = Stream { base: 0, data: mono_of(recording)? };
    let w = cfg.full_gap_len();
    let mut out = Vec::new();
    let mut rest = onsets;
    while let Some(n) = closed_group(rest, true) {
        if n == BATCH_SIZE {
            if rest[n - 1].index + w > s.end() {
                break;
            }
            out.push(make_batch(&rest[..n], &s, cfg));
        }
        rest = &rest[n..];
    }
    Ok(out)
}

/// Running odd/even sums of analysis windows.
#[derive(Debug, Clone, PartialEq)]
pub struct OddEvenAccumulator {
    start: usize,
    sum_odd: Vec<f64>,
    sum_even: Vec<f64>,
    n_odd: usize,
    n_even: usize,
}

impl OddEvenAccumulator {
    pub fn new(window: (usize, usize)) -> Self {
        let len = window.1 - window.0;
        Self { start: window.0, sum_odd: vec![0.0; len], sum_even: vec![0.0; len], n_odd: 0, n_even: 0 }
    }

    pub fn window_len(&self) -> usize {
        self.sum_odd.len()
    }

    pub fn pulses(&self) -> usize {
        self.n_odd + self.n_even
    }

    /// Adds one full-period response; the analysis window is cut from it.
    pub fn add(&mut self, response: &[f64]) {
        let seg = &response[self.start..self.start + self.sum_odd.len()];
        let (sum, n) = if self.pulses().is_multiple_of(2) {
            (&mut self.sum_odd, &mut self.n_odd)
        } else {
            (&mut self.sum_even, &mut self.n_even)
        };
        sum.iter_mut().zip(seg).for_each(|(a, v)| *a += v);
        *n += 1;
    }

    /// `(signal, noise)` waves: half the sum and half the difference of the
    /// odd and even means.
    pub fn waves(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.n_odd == 0 || self.n_even == 0 {
            return Err(Error::InsufficientData("no usable pulse pairs".into()));
        }
        let (no, ne) = (self.n_odd as f64, self.n_even as f64);
        let signal = self.sum_odd.iter().zip(&self.sum_even).map(|(o, e)| (o / no + e / ne) / 2.0).collect();
        let noise = self.sum_odd.iter().zip(&self.sum_even).map(|(o, e)| (o / no - e / ne) / 2.0).collect();
        Ok((signal, noise))
    }
}

/// Odd/even combination over the usable batches.
pub fn combine_odd_even(batches: &[PulseBatch], t_d_s: f64, cfg: &ExtractConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let window = cfg.oae_window(t_d_s)?;
    let mut acc = OddEvenAccumulator::new(window);
    let mut per_batch = Vec::new();
    for b in batches.iter().filter(|b| b.usable) {
        if cfg.global_parity {
            b.responses.iter().for_each(|r| acc.add(r));
        } else {
            let mut local = OddEvenAccumulator::new(window);
            b.responses.iter().for_each(|r| local.add(r));
            per_batch.push(local);
        }
    }
    if !cfg.global_parity {
        for local in &per_batch {
            acc.sum_odd.iter_mut().zip(&local.sum_odd).for_each(|(a, v)| *a += v);
            acc.sum_even.iter_mut().zip(&local.sum_even).for_each(|(a, v)| *a += v);
            acc.n_odd += local.n_odd;
            acc.n_even += local.n_even;
        }
    }
    acc.waves()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandValues {
    pub signal_db_spl: f64,
    pub noise_db_spl: f64,
    /// `signal - noise`, limited to `±snr_cap_db`.
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSnrReport {
    /// Keyed by nominal band center: "1000", "1500", "2000", "3000", "4000".
    pub bands: BTreeMap<String, BandValues>,
    pub batches_used: usize,
    pub batches_discarded: usize,
    pub window_count: usize,
}

impl BandSnrReport {
    /// Band values in ascending frequency order.
    pub fn ordered(&self) -> Result<[BandValues; 5]> {
        let mut out = [BandValues { signal_db_spl: 0.0, noise_db_spl: 0.0, snr_db: 0.0 }; 5];
        for (slot, (key, ..)) in out.iter_mut().zip(BANDS) {
            *slot = *self.bands.get(key).ok_or_else(|| Error::InsufficientData(format!("report lacks band {key}")))?;
        }
        Ok(out)
    }

    pub fn snrs(&self) -> Result<[f64; 5]> {
        Ok(self.ordered()?.map(|b| b.snr_db))
    }

    pub fn mean_noise_db_spl(&self) -> Result<f64> {
        Ok(self.ordered()?.iter().map(|b| b.noise_db_spl).sum::<f64>() / 5.0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }
}

/// Mean squared sine amplitude per band of `x`, zero-padded to `nfft`.
fn band_power(x: &[f64], fs: f64, nfft: usize) -> [f64; 5] {
    let n = nfft.max(x.len().next_power_of_two());
    let spec = dsp::rfft(x, n);
    let scale = 4.0 / (x.len() as f64).powi(2);
    BANDS.map(|(_, lo, hi)| {
        let bins: Vec<f64> = (0..=n / 2)
            .filter(|&k| {
                let f = k as f64 * fs / n as f64;
                f >= lo && f < hi
            })
            .map(|k| spec[k].norm_sqr() * scale)
            .collect();
        bins.iter().sum::<f64>() / bins.len().max(1) as f64
    })
}

/// Per-band signal and noise levels of the two waves.
pub fn band_snr(signal_wave: &[f64], noise_wave: &[f64], cfg: &ExtractConfig) -> Result<BandSnrReport> {
    cfg.validate()?;
    if signal_wave.len() != noise_wave.len() || signal_wave.is_empty() {
        return Err(Error::LengthMismatch("signal and noise waves must be equal and non-empty".into()));
    }
    let ps = band_power(signal_wave, cfg.fs(), cfg.nfft);
    let pn = band_power(noise_wave, cfg.fs(), cfg.nfft);
    let cal = cfg.calibration;
    let bands = BANDS
        .iter()
        .zip(ps.iter().zip(&pn))
        .map(|((key, ..), (&s, &n))| {
            let (sd, nd) = (cal.power_db(s), cal.power_db(n));
            let snr = (sd - nd).clamp(-cfg.snr_cap_db, cfg.snr_cap_db);
            (key.to_string(), BandValues { signal_db_spl: sd, noise_db_spl: nd, snr_db: snr })
        })
        .collect();
    Ok(BandSnrReport { bands, batches_used: 0, batches_discarded: 0, window_count: 0 })
}

/// One line of real-time feedback, emitted after each processed window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressEvent {
    pub window_index: usize,
    pub elapsed_s: f64,
    pub onsets: usize,
    pub batches_used: usize,
    pub batches_discarded: usize,
    /// Present once at least one batch has been accepted.
    pub report: Option<BandSnrReport>,
}

impl ProgressEvent {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("progress is always serializable")
    }
}

/// Incremental extraction state for one recording.
#[derive(Debug, Clone)]
pub struct OaeSession {
    cfg: ExtractConfig,
    t_d_s: f64,
    stream: Stream,
    tracker: PulseTracker,
    pending: Vec<Onset>,
    onsets_found: usize,
    acc: OddEvenAccumulator,
    batches_used: usize,
    batches_discarded: usize,
    window_count: usize,
    qualities: Vec<f64>,
}

impl OaeSession {
    pub fn new(template: &[f64], t_d_s: f64, cfg: &ExtractConfig) -> Result<Self> {
        let window = cfg.oae_window(t_d_s)?;
        Ok(Self {
            cfg: *cfg,
            t_d_s,
            stream: Stream::default(),
            tracker: PulseTracker::new(template, cfg)?,
            pending: Vec::new(),
            onsets_found: 0,
            acc: OddEvenAccumulator::new(window),
            batches_used: 0,
            batches_discarded: 0,
            window_count: 0,
            qualities: Vec::new(),
        })
    }

    pub fn t_d_s(&self) -> f64 {
        self.t_d_s
    }

    /// Quality of every batch scored so far, in order.
    pub fn batch_qualities(&self) -> &[f64] {
        &self.qualities
    }

    /// Feeds the next chunk of microphone audio (channel 0 is used).
    pub fn push(&mut self, chunk: &SampleBuffer) -> Result<ProgressEvent> {
        if chunk.sample_rate_hz() != self.cfg.sample_rate_hz {
            return Err(Error::SampleRate(chunk.sample_rate_hz()));
        }
        self.stream.data.extend(mono_of(chunk)?);
        self.window_count += 1;
        self.process(false);
        Ok(self.progress())
    }

    fn process(&mut self, last: bool) {
        let mut found = Vec::new();
        self.tracker.advance(&self.stream, last, &mut found);
        self.onsets_found += found.len();
        self.pending.extend(found);
        let w = self.cfg.full_gap_len();
        while let Some(n) = closed_group(&self.pending, last) {
            if n < BATCH_SIZE {
                self.batches_discarded += 1;
            } else if self.pending[n - 1].index + w > self.stream.end() {
                break;
            } else {
                let batch = make_batch(&self.pending[..n], &self.stream, &self.cfg);
                self.qualities.push(batch.quality);
                if batch.usable {
                    self.batches_used += 1;
                    batch.responses.iter().for_each(|r| self.acc.add(r));
                } else {
                    self.batches_discarded += 1;
                }
            }
            self.pending.drain(..n);
        }
        let keep = self.pending.first().map_or(usize::MAX, |o| o.index).min(self.tracker.earliest_needed());
        self.stream.trim_before(keep);
    }

    pub fn progress(&self) -> ProgressEvent {
        ProgressEvent {
            window_index: self.window_count.saturating_sub(1),
            elapsed_s: self.stream.end() as f64 / self.cfg.fs(),
            onsets: self.onsets_found,
            batches_used: self.batches_used,
            batches_discarded: self.batches_discarded,
            report: self.report().ok(),
        }
    }

    /// Report over everything accepted so far.
    pub fn report(&self) -> Result<BandSnrReport> {
        let (s, n) = self.acc.waves()?;
        let mut r = band_snr(&s, &n, &self.cfg)?;
        r.batches_used = self.batches_used;
        r.batches_discarded = self.batches_discarded;
        r.window_count = self.window_count;
        Ok(r)
    }

    /// Flushes the tail of the recording. Errors with `InsufficientData` when
    /// no batch was usable.
    pub fn finish(mut self) -> Result<BandSnrReport> {
        self.process(true);
        self.report()
    }

    /// Counts after the tail is flushed, without requiring usable data.
    pub fn finish_counts(mut self) -> (Result<BandSnrReport>, usize, usize) {
        self.process(true);
        let (u, d) = (self.batches_used, self.batches_discarded);
        (self.report(), u, d)
    }
}

/// Whole-recording extraction; identical to feeding the recording in chunks.
pub fn extract_oae(
    recording: &SampleBuffer,
    template: &[f64],
    t_d_s: f64,
    cfg: &ExtractConfig,
) -> Result<BandSnrReport> {
    let mut s = OaeSession::new(template, t_d_s, cfg)?;
    s.push(recording)?;
    s.finish()
}

/// Conventional transient-evoked extraction from a {1,1,1,-3} train.
///
/// Each complete pattern group is gated like a batch (after undoing the
/// polarity of each response). The analysis windows of its four pulses,
/// starting `delay_s + guard` after the onset, are summed so that linear
/// echoes cancel. Each summed group then counts as one pulse in the odd/even
/// combination.
pub fn teoae_extract(
    recording: &SampleBuffer,
    template: &[f64],
    delay_s: f64,
    cfg: &ExtractConfig,
) -> Result<BandSnrReport> {
    let onsets = find_pulse_starts(recording, template, cfg)?;
    let data = Stream { base: 0, data: mono_of(recording)? };
    let w = cfg.full_gap_len();
    let window = cfg.oae_window(delay_s)?;
    let period = cfg.gap_s * cfg.fs();
    let mut acc = OddEvenAccumulator::new(window);
    let (mut used, mut discarded) = (0, 0);
    let group_len = TEOAE_PATTERN.len();
    let mut i = 0;
    while i + group_len <= onsets.len() {
        let g = &onsets[i..i + group_len];
        let pattern_ok = g.iter().zip(TEOAE_PATTERN).all(|(o, p)| o.polarity == p.signum())
            && g.windows(2).all(|p| ((p[1].index - p[0].index) as f64 - period).abs() <= 1.0);
        if !pattern_ok {
            i += 1;
            continue;
        }
        i += group_len;
        if g[group_len - 1].index + w > data.end() {
            break;
        }
        let batch = make_batch(g, &data, cfg);
        if !batch.usable {
            discarded += 1;
            continue;
        }
        used += 1;
        // Undo the sign flip so the raw responses add up as transmitted.
        let mut sum = vec![0.0; w];
        for (r, o) in batch.responses.iter().zip(g) {
            sum.iter_mut().zip(r).for_each(|(a, v)| *a += v * o.polarity);
        }
        acc.add(&sum);
    }
    let (s, n) = acc.waves()?;
    let mut r = band_snr(&s, &n, cfg)?;
    r.batches_used = used;
    r.batches_discarded = discarded;
    r.window_count = (recording.duration_s() / cfg.search_window_s).ceil() as usize;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{gen_pulse_train, gen_stimulus_pulse, PulseConfig};

    fn template() -> Vec<f64> {
        gen_stimulus_pulse(&PulseConfig::default()).unwrap().into_samples()
    }

    fn train(count: usize) -> SampleBuffer {
        gen_pulse_train(&PulseConfig { count, ..Default::default() }).unwrap()
    }

    #[test]
    fn silence_has_no_onsets() {
        let cfg = ExtractConfig::default();
        let s = SampleBuffer::silence(15_625, 1, PULSE_RATE_HZ);
        assert!(find_pulse_starts(&s, &template(), &cfg).unwrap().is_empty());
    }

    #[test]
    fn clean_train_onsets_match_schedule() {
        let cfg = ExtractConfig::default();
        let t = train(48);
        let on = find_pulse_starts(&t, &template(), &cfg).unwrap();
        assert_eq!(on.len(), 48);
        for (k, o) in on.iter().enumerate() {
            assert_eq!(o.index, dsp::slot_start(k, 312.5));
            assert_eq!(o.polarity, 1.0);
        }
        assert!(on.windows(2).all(|w| (w[1].index - w[0].index).abs_diff(312) <= 1));
    }

    #[test]
    fn prominence_skips_small_peaks() {
        let x = [0.0, 5.0, 4.0, 4.5, 0.0, 20.0, 0.0];
        assert_eq!(first_prominent_peak(&x, false, 3.0), Some(1));
        assert_eq!(first_prominent_peak(&x, false, 6.0), Some(5));
        // Peak at 3 is only 0.5 above the saddle at 2.
        assert_eq!(first_prominent_peak(&[0.0, 1.0, 4.0, 4.5, 0.0], false, 4.4), Some(3));
        assert_eq!(first_prominent_peak(&x, false, 25.0), None);
    }

    #[test]
    fn identical_responses_have_unit_quality() {
        let r = vec![vec![1.0, 2.0, -3.0]; 4];
        assert!((batch_quality(&r) - 1.0).abs() < 1e-12);
        let scaled: Vec<Vec<f64>> =
            r.iter().enumerate().map(|(i, v)| v.iter().map(|x| x * (i + 1) as f64).collect()).collect();
        assert!((batch_quality(&scaled) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn seven_onsets_make_one_batch() {
        let cfg = ExtractConfig::default();
        let t = train(8);
        let on = find_pulse_starts(&t, &template(), &cfg).unwrap();
        let b = gate_noise_batches(&on[..7], &t, &cfg).unwrap();
        assert_eq!(b.len(), 1);
        assert!(b[0].usable);
        assert!(gate_noise_batches(&on[..3], &t, &cfg).unwrap().is_empty());
    }

    #[test]
    fn identical_halves_leave_no_noise() {
        let cfg = ExtractConfig::default();
        let t = train(8);
        let on = find_pulse_starts(&t, &template(), &cfg).unwrap();
        let b = gate_noise_batches(&on, &t, &cfg).unwrap();
        let (s, n) = combine_odd_even(&b, 0.0, &cfg).unwrap();
        assert_eq!(s.len(), n.len());
        assert!(n.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn no_usable_batches_is_insufficient() {
        let cfg = ExtractConfig::default();
        assert!(matches!(combine_odd_even(&[], 0.005, &cfg), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn degenerate_split_gives_zero_snr() {
        let cfg = ExtractConfig::default();
        let w: Vec<f64> = (0..200).map(|i| (i as f64 * 0.7).sin() * 100.0).collect();
        // W_odd = w, W_even = 0 → signal = noise = w/2.
        let half: Vec<f64> = w.iter().map(|v| v / 2.0).collect();
        let r = band_snr(&half, &half, &cfg).unwrap();
        assert!(r.snrs().unwrap().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn zero_noise_hits_the_cap() {
        let cfg = ExtractConfig::default();
        let w: Vec<f64> = (0..200).map(|i| (i as f64 * 0.7).sin() * 100.0).collect();
        let r = band_snr(&w, &vec![0.0; 200], &cfg).unwrap();
        assert!(r.snrs().unwrap().iter().all(|&s| s == 60.0));
    }

    #[test]
    fn band_level_of_a_calibrated_tone() {
        // A 2 kHz sine at 20 dB SPL filling the window reads 20 dB SPL in
        // its own band, averaged over the band's bins.
        let cfg = ExtractConfig::default();
        let amp = cfg.calibration.amplitude(20.0);
        let n = 512;
        let w: Vec<f64> =
            (0..n).map(|i| amp * (2.0 * std::f64::consts::PI * 2000.0 * i as f64 / 15625.0).sin()).collect();
        let p = band_power(&w, 15625.0, 512);
        let bins = (0..=256).filter(|&k| (1750.0..2500.0).contains(&(k as f64 * 15625.0 / 512.0))).count() as f64;
        // Parseval: the tone's power is spread over the band's bins.
        let level = cfg.calibration.power_db(p[2] * bins);
        assert!((level - 20.0).abs() < 0.5, "{level}");
    }

    #[test]
    fn bad_snr_cap_is_a_config_error() {
        for cap in [f64::NEG_INFINITY, f64::NAN, 0.0, f64::INFINITY] {
            let cfg = ExtractConfig { snr_cap_db: cap, ..Default::default() };
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn window_must_be_non_empty() {
        let cfg = ExtractConfig::default();
        assert!(cfg.oae_window(0.018).is_err());
        let (a, b) = cfg.oae_window(0.0025).unwrap();
        assert_eq!((a, b), (55, 296));
    }

    #[test]
    fn report_json_uses_band_keys() {
        let cfg = ExtractConfig::default();
        let w = vec![1.0; 100];
        let v: serde_json::Value = serde_json::from_str(&band_snr(&w, &w, &cfg).unwrap().to_json()).unwrap();
        for k in ["1000", "1500", "2000", "3000", "4000"] {
            assert!(v["bands"][k]["snr_db"].is_number());
        }
    }
}
