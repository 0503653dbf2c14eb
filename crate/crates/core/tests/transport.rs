use oae_core::buffer::{SampleBuffer, PULSE_RATE_HZ};
use oae_core::ear::{preset, simulate_ear_stereo, SpeakerModel};
use oae_core::extract::{extract_oae, ExtractConfig};
use oae_core::signal::{gen_pulse_train, gen_stimulus_pulse, PulseConfig};
use oae_core::stream::{channel, packetize, read_framed, reassemble, write_framed, Packetizer, Reassembler};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_frames(frames: usize, seed: u64) -> SampleBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..frames * 2).map(|_| rng.random::<i16>() as f64).collect();
    SampleBuffer::new(x, 2, PULSE_RATE_HZ).unwrap()
}

#[test]
fn million_frames_across_a_wrap() {
    let x = random_frames(1_000_000, 7);
    let p = packetize(&x, u32::MAX - 5_000).unwrap();
    assert_eq!(p.len(), 16_667);
    assert!(p.iter().any(|p| p.seq() == 0));
    let (y, r) = reassemble(&p, PULSE_RATE_HZ).unwrap();
    assert_eq!(y, x);
    assert_eq!(r.packets_lost, 0);
    assert_eq!(r.frames_delivered, 1_000_000);
}

#[test]
fn simulated_capture_survives_the_wire() {
    let train = gen_pulse_train(&PulseConfig { count: 50, ..Default::default() }).unwrap();
    let x = simulate_ear_stereo(&preset("normal_adult").unwrap(), &SpeakerModel::identity(), &train, 1).unwrap();
    let mut bytes = Vec::new();
    write_framed(&mut bytes, &packetize(&x, 0).unwrap()).unwrap();
    let (y, _) = reassemble(&read_framed(bytes.as_slice()).unwrap(), PULSE_RATE_HZ).unwrap();
    // The file keeps the zero padding of the final packet.
    assert_eq!(y.slice(0, x.len()), x.quantized());
    assert!(y.samples()[x.samples().len()..].iter().all(|&s| s == 0.0));
}

#[test]
fn one_percent_loss_costs_under_a_decibel() {
    let train = gen_pulse_train(&PulseConfig::default()).unwrap();
    let x = simulate_ear_stereo(&preset("normal_adult").unwrap(), &SpeakerModel::identity(), &train, 3).unwrap();
    let p = packetize(&x, 0).unwrap();
    let (lossy, r) = reassemble(&channel(&p, 0.01, 4, 11).unwrap(), PULSE_RATE_HZ).unwrap();
    assert!(r.packets_lost > 100, "{}", r.packets_lost);
    let cfg = ExtractConfig::default();
    let template = gen_stimulus_pulse(&PulseConfig::default()).unwrap().into_samples();
    let clean = extract_oae(&x.channel(0).unwrap(), &template, 0.005, &cfg).unwrap();
    let hit = extract_oae(&lossy.channel(0).unwrap(), &template, 0.005, &cfg).unwrap();
    assert!(hit.batches_discarded > clean.batches_discarded);
    for (a, b) in clean.snrs().unwrap().iter().zip(hit.snrs().unwrap()) {
        assert!((a - b).abs() < 1.0, "{:?} vs {:?}", clean.snrs(), hit.snrs());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn streamed_round_trip_is_exact(
        frames in 0usize..2_000,
        start in prop_oneof![Just(u32::MAX - 10), any::<u32>()],
        chunk in 1usize..500,
        seed in any::<u64>(),
    ) {
        let x = random_frames(frames, seed);
        let mut tx = Packetizer::new(start);
        let mut rx = Reassembler::starting_at(start, 0);
        let mut out = Vec::new();
        let mut at = 0;
        while at < frames {
            let end = (at + chunk).min(frames);
            for p in tx.push(&x.slice(at, end)).unwrap() {
                out.extend(rx.push(p));
            }
            at = end;
        }
        if let Some(p) = tx.finish().unwrap() {
            out.extend(rx.push(p));
        }
        let (tail, report) = rx.finish();
        out.extend(tail);
        prop_assert_eq!(SampleBuffer::from_i16(&out, 2, PULSE_RATE_HZ).unwrap(), x);
        prop_assert_eq!(report.packets_lost, 0);
    }

    #[test]
    fn loss_accounting_balances(loss in 0.0f64..0.3, seed in any::<u64>()) {
        let x = random_frames(6_000, seed);
        let p = packetize(&x, 0).unwrap();
        let kept = channel(&p, loss, 3, seed).unwrap();
        prop_assume!(kept.first().map(|p| p.seq()) == Some(0) && kept.iter().any(|p| p.seq() == 99));
        let (y, r) = reassemble(&kept, PULSE_RATE_HZ).unwrap();
        prop_assert_eq!(r.frames_delivered + 60 * r.packets_lost, 6_000);
        prop_assert_eq!(y.len(), 6_000);
        prop_assert_eq!(r.gap_spans.iter().map(|s| s.1).sum::<usize>(), 60 * r.packets_lost);
    }
}
