//! `oae`: run simulated or recorded screening sessions, cohort ROC sweeps,
//! the probe integrity check and the throughput benchmark.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::mpsc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use oae_core::buffer::SampleBuffer;
use oae_core::ear::{preset, simulate_ear_stereo, SpeakerModel};
use oae_core::fmcw::gen_ranging_burst;
use oae_core::harness::{bench, roc, score_cohort, sweep, CohortSpec, Protocol};
use oae_core::screening::{probe_integrity_check, run_session, RecordedEar, SessionConfig, SessionEvent, SimulatedEar};
use oae_core::signal::gen_pulse_train;

/// Exit code for runtime failures (bad input files, invalid config, aborted sessions).
const EXIT_ERROR: u8 = 3;
/// Exit code for command-line usage errors.
const EXIT_USAGE: u8 = 4;

const EXIT_CODES: &str = "\
Exit codes:
  0  pass (screen), all runs passed (integrity), success (other commands)
  1  refer (screen), integrity check failed
  2  noisy (screen)
  3  runtime error
  4  usage error";

#[derive(Debug, Parser)]
#[command(name = "oae", version, about = "Otoacoustic emission screening on earbud-style hardware", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Speaker {
    Identity,
    LowCost,
}

impl Speaker {
    fn model(self) -> SpeakerModel {
        match self {
            Speaker::Identity => SpeakerModel::identity(),
            Speaker::LowCost => SpeakerModel::low_cost(),
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one ear and write stimulus.wav, mic.wav, ranging.wav and model.toml.
    Simulate {
        /// Ear preset name.
        #[arg(long)]
        preset: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
        /// Pulse train length in seconds; defaults to the configured pulse count.
        #[arg(long)]
        duration: Option<f64>,
        /// Ambient noise level in dB SPL; defaults to the preset's level.
        #[arg(long)]
        noise_db: Option<f64>,
        #[arg(long, value_enum, default_value_t = Speaker::Identity)]
        speaker: Speaker,
    },
    /// Run a screening session and report pass, refer or noisy.
    Screen {
        /// Recorded microphone WAV (channel 0 is the in-ear mic).
        #[arg(long = "in", conflicts_with = "preset", required_unless_present = "preset")]
        input: Option<PathBuf>,
        /// Ranging capture WAV for a recording; without it the default delay is used.
        #[arg(long, requires = "input")]
        ranging: Option<PathBuf>,
        /// Simulate this ear preset instead of reading a recording.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, requires = "preset")]
        duration: Option<f64>,
        #[arg(long, requires = "preset")]
        noise_db: Option<f64>,
        #[arg(long, value_enum, default_value_t = Speaker::Identity)]
        speaker: Speaker,
        /// Session config TOML.
        #[arg(long, env = "OAE_CONFIG")]
        config: Option<PathBuf>,
        /// Print the final verdict as one JSON object.
        #[arg(long)]
        json: bool,
        /// Print session events as JSON lines while measuring.
        #[arg(long)]
        progress: bool,
    },
    /// Sweep the SNR threshold over a cohort and print the ROC as CSV.
    Roc {
        /// Cohort TOML; defaults to the built-in 50-ear synthetic cohort.
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long, default_value = "oaebuds", value_parser = parse_protocol)]
        protocol: Protocol,
        #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(2..=3))]
        bands: u8,
        #[arg(long, value_enum, default_value_t = Speaker::LowCost)]
        speaker: Speaker,
        #[arg(long, env = "OAE_CONFIG")]
        config: Option<PathBuf>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Screen a 1 cc closed cavity three times; passes only if no OAE is ever reported.
    Integrity {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, env = "OAE_CONFIG")]
        config: Option<PathBuf>,
    },
    /// Time 1 s processing windows and report latency percentiles as JSON.
    Bench {
        #[arg(long, default_value_t = 100)]
        windows: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

/// `println!` that reports a closed stdout as an error instead of panicking.
macro_rules! outln {
    ($($t:tt)*) => {
        writeln!(std::io::stdout().lock(), $($t)*).context("writing to stdout")
    };
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse().map_err(|e: oae_core::error::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Simulate { preset, seed, out, duration, noise_db, speaker } => {
            simulate(&preset, seed, &out, duration, noise_db, speaker)
        }
        Command::Screen { input, ranging, preset, seed, duration, noise_db, speaker, config, json, progress } => {
            let mut cfg = load_config(config.as_deref())?;
            let mut source: Box<dyn oae_core::screening::EarSource> = match (input, preset) {
                (Some(path), _) => {
                    cfg.fit.skip = true;
                    let measuring =
                        SampleBuffer::load_wav(&path).with_context(|| format!("reading {}", path.display()))?;
                    let ranging = ranging
                        .map(|p| SampleBuffer::load_wav(&p).with_context(|| format!("reading {}", p.display())))
                        .transpose()?;
                    Box::new(RecordedEar { ranging, measuring })
                }
                (None, Some(name)) => {
                    if let Some(d) = duration {
                        cfg.pulse.count = pulse_count(d, cfg.pulse.gap_s)?;
                    }
                    Box::new(SimulatedEar::new(ear_model(&name, noise_db)?, speaker.model(), seed))
                }
                (None, None) => bail!("either --in or --preset is required"),
            };
            screen(source.as_mut(), &cfg, json, progress)
        }
        Command::Roc { cohort, protocol, bands, speaker, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let cohort = match cohort {
                Some(p) => CohortSpec::load(&p).with_context(|| format!("reading {}", p.display()))?,
                None => CohortSpec::default_cohort(),
            };
            let scores = score_cohort(&cohort, protocol, &speaker.model(), &cfg)?;
            let result = roc(&scores, bands as usize, sweep())?;
            match out {
                Some(p) => fs::write(&p, result.to_csv()).with_context(|| format!("writing {}", p.display()))?,
                None => write!(std::io::stdout().lock(), "{}", result.to_csv()).context("writing to stdout")?,
            }
            eprintln!(
                "protocol={} bands={} auc={:.4} optimal_threshold_db={}",
                protocol.name(),
                bands,
                result.auc,
                result.optimal_threshold_db
            );
            Ok(0)
        }
        Command::Integrity { seed, config } => {
            let cfg = load_config(config.as_deref())?;
            let result = probe_integrity_check(&cfg, seed)?;
            outln!("{}", serde_json::to_string(&result)?)?;
            Ok(if result.passed { 0 } else { 1 })
        }
        Command::Bench { windows, seed } => {
            let stats = bench(windows, seed)?;
            outln!("{}", serde_json::to_string(&stats)?)?;
            Ok(0)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<SessionConfig> {
    match path {
        Some(p) => SessionConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(SessionConfig::default()),
    }
}

fn pulse_count(duration_s: f64, gap_s: f64) -> Result<usize> {
    if !duration_s.is_finite() || duration_s <= 0.0 {
        bail!("duration must be positive, got {duration_s}");
    }
    Ok(((duration_s / gap_s).floor() as usize).max(1))
}

fn ear_model(name: &str, noise_db: Option<f64>) -> Result<oae_core::ear::EarModel> {
    let model = preset(name)?;
    Ok(match noise_db {
        Some(db) => model.with_noise(db),
        None => model,
    })
}

fn simulate(
    name: &str,
    seed: u64,
    out: &Path,
    duration: Option<f64>,
    noise_db: Option<f64>,
    speaker: Speaker,
) -> Result<u8> {
    let model = ear_model(name, noise_db)?;
    let cfg = SessionConfig::default();
    let mut pulse = cfg.pulse;
    if let Some(d) = duration {
        pulse.count = pulse_count(d, pulse.gap_s)?;
    }
    let speaker = speaker.model();
    let stimulus = gen_pulse_train(&pulse)?;
    let mic = simulate_ear_stereo(&model, &speaker, &stimulus, seed)?.quantized();
    let burst = gen_ranging_burst(&cfg.chirp)?;
    let ranging = simulate_ear_stereo(&model, &speaker, &burst, seed ^ 0x0F0F)?.quantized();

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    stimulus.save_wav(out.join("stimulus.wav"))?;
    mic.save_wav(out.join("mic.wav"))?;
    ranging.save_wav(out.join("ranging.wav"))?;
    model.save(out.join("model.toml"))?;
    eprintln!("wrote {} ({} frames at {} Hz)", out.display(), mic.len(), mic.sample_rate_hz());
    Ok(0)
}

fn screen(
    source: &mut dyn oae_core::screening::EarSource,
    cfg: &SessionConfig,
    json: bool,
    progress: bool,
) -> Result<u8> {
    let (tx, rx) = mpsc::channel::<SessionEvent>();
    let printer = std::thread::spawn(move || {
        let mut out = std::io::stdout().lock();
        for e in rx {
            if progress {
                let _ = writeln!(out, "{}", e.to_json_line());
            }
        }
    });
    let verdict = run_session(source, cfg, Some(&tx));
    drop(tx);
    printer.join().expect("event printer panicked");
    let verdict = verdict?;

    if json {
        outln!("{}", verdict.to_json_value(&cfg.thresholds))?;
    } else {
        outln!("outcome: {:?}", verdict.outcome)?;
        outln!("t_d: {:.2} ms, duration: {:.1} s", verdict.t_d_used_s * 1e3, verdict.duration_s)?;
        if let Some(r) = &verdict.report {
            outln!("batches: {} used, {} discarded", r.batches_used, r.batches_discarded)?;
            for (band, v) in &r.bands {
                let mark = if verdict.bands_passed.contains(band) { "pass" } else { "" };
                outln!(
                    "  {band:>5} Hz  signal {:7.2}  noise {:7.2}  snr {:6.2}  {mark}",
                    v.signal_db_spl,
                    v.noise_db_spl,
                    v.snr_db
                )?;
            }
        }
    }
    Ok(verdict.outcome.exit_code() as u8)
}
