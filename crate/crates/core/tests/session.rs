use std::sync::mpsc;

use oae_core::calibration::Calibration;
use oae_core::ear::simulate_ear;
use oae_core::ear::{preset, SpeakerModel};
use oae_core::error::Error;
use oae_core::screening::{
    probe_fit_check, probe_integrity_check, run_session, Outcome, SessionConfig, SessionEvent, SessionState,
    SimulatedEar, FIT_THRESHOLD_DB_SPL,
};
use oae_core::signal::{gen_probe_chirp_seq, ProbeChirpConfig};

fn screen(name: &str, noise: f64, seed: u64) -> oae_core::screening::ScreeningVerdict {
    let model = preset(name).unwrap().with_noise(noise);
    let mut ear = SimulatedEar::new(model, SpeakerModel::identity(), seed);
    run_session(&mut ear, &SessionConfig::default(), None).unwrap()
}

#[test]
fn preset_verdicts() {
    let v = screen("normal_adult", 40.0, 1);
    assert_eq!(v.outcome, Outcome::Pass);
    assert!(v.probe_fit);
    assert!(v.duration_s <= 70.0, "{}", v.duration_s);
    assert!(v.t_d_used_s > 0.0 && v.t_d_used_s < 0.012);
    assert_eq!(screen("normal_infant", 40.0, 2).outcome, Outcome::Pass);
    assert_eq!(screen("hearing_loss", 40.0, 3).outcome, Outcome::Refer);
    assert_eq!(screen("middle_ear_fluid", 40.0, 4).outcome, Outcome::Refer);
}

#[test]
fn ambient_noise_degrades_the_result() {
    assert_eq!(screen("normal_adult", 50.0, 5).outcome, Outcome::Pass);
    assert_ne!(screen("normal_adult", 70.0, 6).outcome, Outcome::Pass);
}

#[test]
fn verdict_is_deterministic() {
    assert_eq!(screen("normal_adult", 45.0, 9), screen("normal_adult", 45.0, 9));
}

#[test]
fn events_follow_the_state_machine() {
    let (tx, rx) = mpsc::channel();
    let mut ear = SimulatedEar::new(preset("normal_adult").unwrap(), SpeakerModel::identity(), 11);
    let v = run_session(&mut ear, &SessionConfig::default(), Some(&tx)).unwrap();
    drop(tx);
    let events: Vec<SessionEvent> = rx.iter().collect();
    let states: Vec<SessionState> = events
        .iter()
        .filter_map(|e| match e {
            SessionEvent::State { state } => Some(*state),
            _ => None,
        })
        .collect();
    assert_eq!(
        states,
        [
            SessionState::Idle,
            SessionState::FitCheck,
            SessionState::Ranging,
            SessionState::Measuring,
            SessionState::Done
        ]
    );
    let fit_pos = events.iter().position(|e| matches!(e, SessionEvent::Fit { .. })).unwrap();
    let first_progress = events.iter().position(|e| matches!(e, SessionEvent::Progress(_))).unwrap();
    let ranging = events.iter().position(|e| matches!(e, SessionEvent::Ranging { .. })).unwrap();
    assert!(fit_pos < ranging && ranging < first_progress);
    let idx: Vec<usize> = events
        .iter()
        .filter_map(|e| match e {
            SessionEvent::Progress(p) => Some(p.window_index),
            _ => None,
        })
        .collect();
    assert_eq!(idx, (0..66).collect::<Vec<_>>());
    assert!(matches!(events.last(), Some(SessionEvent::Done { outcome }) if *outcome == v.outcome));
    for e in &events {
        let line = e.to_json_line();
        assert!(!line.contains('\n'));
        serde_json::from_str::<serde_json::Value>(&line).unwrap();
    }
}

#[test]
fn out_of_ear_times_out() {
    let mut ear = SimulatedEar::new(preset("out_of_ear").unwrap(), SpeakerModel::identity(), 3);
    let mut cfg = SessionConfig::default();
    cfg.fit.timeout_s = 3.0;
    assert!(matches!(run_session(&mut ear, &cfg, None), Err(Error::Aborted(_))));
}

#[test]
fn late_insertion_delays_the_fit() {
    let (tx, rx) = mpsc::channel();
    let ear = SimulatedEar::new(preset("normal_adult").unwrap(), SpeakerModel::identity(), 4);
    let mut ear = ear.inserted_after(2.5);
    let mut cfg = SessionConfig::default();
    cfg.pulse.count = 200;
    let v = run_session(&mut ear, &cfg, Some(&tx)).unwrap();
    drop(tx);
    assert!(v.probe_fit);
    let seen = rx
        .iter()
        .filter_map(|e| match e {
            SessionEvent::Fit { chirps_seen, consecutive } if consecutive >= 50 => Some(chirps_seen),
            _ => None,
        })
        .next()
        .unwrap();
    // Insertion at 2.5 s is chirp 125; the 50th sealed chirp after it is 175.
    assert!((175..=176).contains(&seen), "{seen}");
}

#[test]
fn fit_check_on_recorded_chirps() {
    let probe = ProbeChirpConfig::default();
    let x = gen_probe_chirp_seq(60).unwrap();
    let cal = Calibration::default();
    let inside = simulate_ear(&preset("normal_adult").unwrap(), &SpeakerModel::identity(), &x, 1).unwrap();
    let r = probe_fit_check(&inside, &probe, FIT_THRESHOLD_DB_SPL, 50, cal).unwrap();
    assert!(r.in_ear);
    assert!((r.confirmed_after_s.unwrap() - 1.0).abs() < 1e-12);
    let outside = simulate_ear(&preset("out_of_ear").unwrap(), &SpeakerModel::identity(), &x, 1).unwrap();
    assert!(!probe_fit_check(&outside, &probe, FIT_THRESHOLD_DB_SPL, 50, cal).unwrap().in_ear);
}

#[test]
fn fit_threshold_sits_midway() {
    // Independent oracle: 200 Hz DFT bin of noiseless sealed and open responses.
    let probe = ProbeChirpConfig::default();
    let x = gen_probe_chirp_seq(1).unwrap();
    let cal = Calibration::default();
    let level = |name: &str| {
        let y = simulate_ear(&preset(name).unwrap().with_noise(f64::NEG_INFINITY), &SpeakerModel::identity(), &x, 0)
            .unwrap();
        let (a, b) = probe.segment(0);
        let s = &y.samples()[a..b];
        let n = s.len() as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (i, v) in s.iter().enumerate() {
            let w = 2.0 * std::f64::consts::PI * 200.0 * i as f64 / 15625.0;
            re += v * w.cos();
            im -= v * w.sin();
        }
        cal.level_db(2.0 * (re * re + im * im).sqrt() / n)
    };
    let mid = (level("normal_adult") + level("out_of_ear")) / 2.0;
    assert!((mid - FIT_THRESHOLD_DB_SPL).abs() < 1.0, "{mid}");
    assert!(level("normal_adult") - level("out_of_ear") >= 20.0);
}

#[test]
fn closed_tube_passes_integrity() {
    let r = probe_integrity_check(&SessionConfig::default(), 21).unwrap();
    assert_eq!(r.runs.len(), 3);
    assert!(r.passed, "{:?}", r.runs.iter().map(|v| v.report.as_ref().map(|r| r.snrs().unwrap())).collect::<Vec<_>>());
}

#[test]
fn zero_delay_breaks_integrity() {
    let cfg = SessionConfig { t_d_override_s: Some(0.0), ..SessionConfig::default() };
    assert!(!probe_integrity_check(&cfg, 21).unwrap().passed);
}

#[test]
fn bad_snr_cap_refuses_integrity() {
    let mut cfg = SessionConfig::default();
    cfg.extract.snr_cap_db = f64::NEG_INFINITY;
    assert!(matches!(probe_integrity_check(&cfg, 1), Err(Error::Config(_))));
}
