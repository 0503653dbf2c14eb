use oae_core::buffer::{SampleBuffer, PULSE_RATE_HZ};
use oae_core::ear::{preset, simulate_ear, EarModel, OaeBand, SpeakerModel};
use oae_core::extract::{
    band_snr, batch_quality, combine_odd_even, extract_oae, find_pulse_starts, gate_noise_batches, teoae_extract,
    ExtractConfig, OaeSession, OddEvenAccumulator,
};
use oae_core::signal::{gen_pulse_train, gen_stimulus_pulse, gen_teoae_train, PulseConfig};
use proptest::prelude::*;

fn template(cfg: &PulseConfig) -> Vec<f64> {
    gen_stimulus_pulse(cfg).unwrap().into_samples()
}

fn recording(model: &EarModel, count: usize, seed: u64) -> SampleBuffer {
    // Trailing silence so the last pulse has a complete response window.
    let mut x = gen_pulse_train(&PulseConfig { count, ..Default::default() }).unwrap().into_samples();
    x.resize(x.len() + 400, 0.0);
    let train = SampleBuffer::mono(x, PULSE_RATE_HZ).unwrap();
    simulate_ear(model, &SpeakerModel::identity(), &train, seed).unwrap()
}

fn chunked(rec: &SampleBuffer, chunk: usize, t_d: f64, cfg: &ExtractConfig) -> oae_core::extract::BandSnrReport {
    let mut s = OaeSession::new(&template(&PulseConfig::default()), t_d, cfg).unwrap();
    let mut at = 0;
    while at < rec.len() {
        s.push(&rec.slice(at, at + chunk)).unwrap();
        at += chunk;
    }
    s.finish().unwrap()
}

#[test]
fn windowed_processing_equals_whole_recording() {
    let cfg = ExtractConfig::default();
    let rec = recording(&preset("normal_adult").unwrap(), 600, 3);
    let whole = extract_oae(&rec, &template(&PulseConfig::default()), 0.005, &cfg).unwrap();
    for chunk in [15_625, 4_000, 777] {
        let part = chunked(&rec, chunk, 0.005, &cfg);
        assert_eq!(part.bands, whole.bands, "chunk {chunk}");
        assert_eq!(part.batches_used, whole.batches_used);
    }
}

#[test]
fn clean_in_ear_window_finds_48_onsets() {
    let cfg = ExtractConfig::default();
    let rec = recording(&preset("normal_adult").unwrap(), 48, 1);
    let on = find_pulse_starts(&rec, &template(&PulseConfig::default()), &cfg).unwrap();
    assert_eq!(on.len(), 48);
    assert!(on.windows(2).all(|w| (w[1].index - w[0].index).abs_diff(312) <= 1));
}

#[test]
fn onsets_wait_for_insertion() {
    let cfg = ExtractConfig::default();
    let out = recording(&preset("out_of_ear").unwrap(), 100, 1);
    let inside = recording(&preset("normal_adult").unwrap(), 100, 2);
    let cut = PULSE_RATE_HZ as usize / 2;
    let mut spliced = out.samples()[..cut].to_vec();
    spliced.extend_from_slice(&inside.samples()[cut..]);
    let rec = SampleBuffer::mono(spliced, PULSE_RATE_HZ).unwrap();
    let on = find_pulse_starts(&rec, &template(&PulseConfig::default()), &cfg).unwrap();
    assert!(!on.is_empty());
    assert!(on[0].index >= cut, "{:?}", on.iter().take(3).map(|o| o.index).collect::<Vec<_>>());
    // Every in-ear pulse after the lock is tracked.
    assert_eq!(on.len(), (0..100).filter(|&k| oae_core::dsp::slot_start(k, 312.5) >= cut).count());
}

#[test]
fn noise_burst_spoils_its_batch() {
    let cfg = ExtractConfig::default();
    let rec = recording(&preset("normal_adult").unwrap().with_noise(f64::NEG_INFINITY), 8, 0);
    let on = find_pulse_starts(&rec, &template(&PulseConfig::default()), &cfg).unwrap();
    let mut x = rec.samples().to_vec();
    let loud = recording(&preset("hearing_loss").unwrap().with_noise(85.0), 8, 9);
    let third = on[2].index;
    for (v, l) in x[third + 20..third + 300].iter_mut().zip(&loud.samples()[third + 20..third + 300]) {
        *v += l * 3.0;
    }
    let noisy = SampleBuffer::mono(x.iter().map(|v| v.clamp(-32768.0, 32767.0)).collect(), PULSE_RATE_HZ).unwrap();
    let b = gate_noise_batches(&on, &noisy, &cfg).unwrap();
    assert_eq!(b.len(), 2);
    assert!(!b[0].usable && b[0].quality < 0.95);
    assert!(b[1].usable);
}

#[test]
fn missing_pulse_drops_only_its_group() {
    let cfg = ExtractConfig::default();
    let rec = recording(&preset("normal_adult").unwrap(), 16, 5);
    let t = template(&PulseConfig::default());
    let clean = gate_noise_batches(&find_pulse_starts(&rec, &t, &cfg).unwrap(), &rec, &cfg).unwrap();
    let mut x = rec.samples().to_vec();
    let at = oae_core::dsp::slot_start(5, 312.5);
    x[at - 20..at + 40].iter_mut().for_each(|v| *v = 0.0);
    let holed = SampleBuffer::mono(x, PULSE_RATE_HZ).unwrap();
    let on = find_pulse_starts(&holed, &t, &cfg).unwrap();
    assert_eq!(on.len(), 15);
    assert!(on.iter().all(|o| o.slot != 5));
    let b = gate_noise_batches(&on, &holed, &cfg).unwrap();
    assert_eq!(b.iter().map(|b| b.onsets).collect::<Vec<_>>(), [&clean[0], &clean[2], &clean[3]].map(|b| b.onsets));
}

#[test]
fn noiseless_ear_has_no_noise_wave() {
    let cfg = ExtractConfig::default();
    let rec = recording(&preset("normal_adult").unwrap().with_noise(f64::NEG_INFINITY), 48, 0);
    let on = find_pulse_starts(&rec, &template(&PulseConfig::default()), &cfg).unwrap();
    let b = gate_noise_batches(&on, &rec, &cfg).unwrap();
    let (s, n) = combine_odd_even(&b, 0.005, &cfg).unwrap();
    let es: f64 = s.iter().map(|v| v * v).sum();
    let en: f64 = n.iter().map(|v| v * v).sum();
    assert!(en < 1e-12 * es);
    let r = band_snr(&s, &n, &cfg).unwrap();
    assert!(r.snrs().unwrap().iter().all(|&v| v == 60.0));
}

#[test]
fn emission_in_one_band_only() {
    let cfg = ExtractConfig::default();
    let mut m = preset("normal_adult").unwrap();
    // Without the broadband case residual so only the emission band stands out.
    m.reflection_taps.retain(|t| t.delay_s < 5.1e-3);
    m.oae_bands = vec![OaeBand { center_hz: 2000.0, level_db_spl: 30.0, latency_s: 0.008 }];
    let r = extract_oae(&recording(&m, 1000, 4), &template(&PulseConfig::default()), 0.0055, &cfg).unwrap();
    let snr = r.snrs().unwrap();
    assert!(snr[2] > 15.0, "{snr:?}");
    for (i, s) in snr.iter().enumerate() {
        if i != 2 {
            assert!(s.abs() < 6.0, "{snr:?}");
        }
    }
}

#[test]
fn odd_pulse_count_changes_little() {
    let cfg = ExtractConfig::default();
    let rec = recording(&preset("normal_adult").unwrap().with_noise(40.0), 400, 0);
    let on = find_pulse_starts(&rec, &template(&PulseConfig::default()), &cfg).unwrap();
    let b = gate_noise_batches(&on, &rec, &cfg).unwrap();
    let responses: Vec<&Vec<f64>> = b.iter().filter(|x| x.usable).flat_map(|x| x.responses.iter()).collect();
    let level = |n: usize| {
        let mut acc = OddEvenAccumulator::new(cfg.oae_window(0.005).unwrap());
        for r in &responses[..n] {
            acc.add(r);
        }
        let (s, n) = acc.waves().unwrap();
        band_snr(&s, &n, &cfg).unwrap()
    };
    let n = responses.len();
    assert_eq!(n % 2, 0);
    let (even, odd) = (level(n), level(n - 1));
    for (a, c) in even.ordered().unwrap().iter().zip(odd.ordered().unwrap()) {
        assert!((a.signal_db_spl - c.signal_db_spl).abs() < 0.5, "{a:?} {c:?}");
    }
}

#[test]
fn linear_ear_cancels_in_teoae() {
    let cfg = ExtractConfig::default();
    let p = PulseConfig { amplitude: PulseConfig::default().amplitude / 3.0, count: 400, ..Default::default() };
    let train = gen_teoae_train(&p).unwrap();
    let linear = preset("hearing_loss").unwrap().with_noise(f64::NEG_INFINITY);
    let mic = simulate_ear(&linear, &SpeakerModel::identity(), &train, 0).unwrap();
    let r = teoae_extract(&mic, &template(&p), 0.0025, &cfg).unwrap();
    assert!(r.batches_used > 90);
    for b in r.ordered().unwrap() {
        assert!(b.signal_db_spl < -60.0, "{b:?}");
        assert!(b.snr_db < 8.0);
    }
    let normal = preset("normal_adult").unwrap().with_noise(30.0);
    let mic = simulate_ear(&normal, &SpeakerModel::identity(), &train, 0).unwrap();
    let r = teoae_extract(&mic, &template(&p), 0.0025, &cfg).unwrap();
    assert!(r.snrs().unwrap().iter().filter(|&&s| s >= 8.0).count() >= 2);
}

/// Direct per-sample reimplementation of the odd/even rule.
fn brute_force(responses: &[Vec<f64>], start: usize, end: usize) -> (Vec<f64>, Vec<f64>) {
    let len = end - start;
    let mut odd = vec![0.0; len];
    let mut even = vec![0.0; len];
    let (mut no, mut ne) = (0.0, 0.0);
    for (k, r) in responses.iter().enumerate() {
        for i in 0..len {
            if k % 2 == 0 {
                odd[i] += r[start + i];
            } else {
                even[i] += r[start + i];
            }
        }
        if k % 2 == 0 {
            no += 1.0;
        } else {
            ne += 1.0;
        }
    }
    let s = (0..len).map(|i| (odd[i] / no + even[i] / ne) / 2.0).collect();
    let n = (0..len).map(|i| (odd[i] / no - even[i] / ne) / 2.0).collect();
    (s, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn quality_is_scale_invariant(seed in 0u64..1000, scale in 0.01f64..100.0) {
        let cfg = ExtractConfig::default();
        let rec = recording(&preset("normal_adult").unwrap().with_noise(55.0), 4, seed);
        let on = find_pulse_starts(&rec, &template(&PulseConfig::default()), &cfg).unwrap();
        let b = gate_noise_batches(&on, &rec, &cfg).unwrap();
        prop_assume!(!b.is_empty());
        let scaled: Vec<Vec<f64>> = b[0].responses.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
        prop_assert!((batch_quality(&scaled) - b[0].quality).abs() < 1e-12);
    }

    #[test]
    fn combine_matches_brute_force(batches in 1usize..=2, seed in 0u64..500) {
        let cfg = ExtractConfig::default();
        let rec = recording(&preset("normal_adult").unwrap().with_noise(35.0), 4 * batches, seed);
        let on = find_pulse_starts(&rec, &template(&PulseConfig::default()), &cfg).unwrap();
        let b = gate_noise_batches(&on, &rec, &cfg).unwrap();
        prop_assert_eq!(b.len(), batches);
        let usable: Vec<Vec<f64>> = b.iter().filter(|x| x.usable).flat_map(|x| x.responses.clone()).collect();
        prop_assume!(!usable.is_empty());
        let (start, end) = cfg.oae_window(0.005).unwrap();
        let (s, n) = combine_odd_even(&b, 0.005, &cfg).unwrap();
        let (bs, bn) = brute_force(&usable, start, end);
        prop_assert_eq!(s, bs);
        prop_assert_eq!(n, bn);
    }

    #[test]
    fn chunking_never_changes_the_report(chunk in 200usize..20_000, seed in 0u64..100) {
        let cfg = ExtractConfig::default();
        let rec = recording(&preset("normal_adult").unwrap().with_noise(45.0), 120, seed);
        let whole = extract_oae(&rec, &template(&PulseConfig::default()), 0.0055, &cfg).unwrap();
        let part = chunked(&rec, chunk, 0.0055, &cfg);
        prop_assert_eq!(part.bands, whole.bands);
    }
}
