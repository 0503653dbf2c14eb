//! Earbud-to-phone audio transport.
//!
//! Two-channel microphone frames travel in fixed 244-byte packets: a
//! little-endian `u32` sequence number followed by 60 interleaved frames of
//! little-endian `i16`. The receiver reorders by sequence number and fills
//! lost packets with silence, which the batch noise gate then discards.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::SampleBuffer;
use crate::error::{config_err, Error, Result};

pub const FRAMES_PER_PACKET: usize = 60;
pub const CHANNELS: usize = 2;
pub const PAYLOAD_BYTES: usize = FRAMES_PER_PACKET * CHANNELS * 2;
pub const HEADER_BYTES: usize = 4;
pub const PACKET_BYTES: usize = HEADER_BYTES + PAYLOAD_BYTES;

/// One packet on the wire.
///
/// `valid_frames` marks a zero-padded final packet. It lives only in memory;
/// a decoded packet always reports a full payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AudioPacket {
    seq: u32,
    payload: [u8; PAYLOAD_BYTES],
    valid_frames: usize,
}

impl AudioPacket {
    /// Builds a packet from up to 60 interleaved frames, zero-padding the rest.
    pub fn new(seq: u32, interleaved: &[i16]) -> Result<Self> {
        if interleaved.len() > FRAMES_PER_PACKET * CHANNELS || !interleaved.len().is_multiple_of(CHANNELS) {
            return Err(Error::Packet(format!("{} samples do not form at most 60 stereo frames", interleaved.len())));
        }
        let mut payload = [0u8; PAYLOAD_BYTES];
        for (chunk, s) in payload.chunks_exact_mut(2).zip(interleaved) {
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        Ok(Self { seq, payload, valid_frames: interleaved.len() / CHANNELS })
    }

    pub fn seq(&self) -> u32 {
        self.seq
    }

    pub fn payload(&self) -> &[u8; PAYLOAD_BYTES] {
        &self.payload
    }

    pub fn valid_frames(&self) -> usize {
        self.valid_frames
    }

    pub fn is_short(&self) -> bool {
        self.valid_frames < FRAMES_PER_PACKET
    }

    /// All 120 interleaved samples, padding included.
    pub fn samples(&self) -> Vec<i16> {
        self.payload.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect()
    }

    pub fn to_bytes(&self) -> [u8; PACKET_BYTES] {
        let mut out = [0u8; PACKET_BYTES];
        out[..HEADER_BYTES].copy_from_slice(&self.seq.to_le_bytes());
        out[HEADER_BYTES..].copy_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != PACKET_BYTES {
            return Err(Error::Packet(format!("expected {PACKET_BYTES} bytes, got {}", bytes.len())));
        }
        let seq = u32::from_le_bytes(bytes[..HEADER_BYTES].try_into().expect("4-byte header"));
        let payload = bytes[HEADER_BYTES..].try_into().expect("240-byte payload");
        Ok(Self { seq, payload, valid_frames: FRAMES_PER_PACKET })
    }
}

/// Sender side: slices a frame stream into numbered packets.
#[derive(Debug, Clone)]
pub struct Packetizer {
    next_seq: u32,
    pending: Vec<i16>,
}

impl Packetizer {
    pub fn new(start_seq: u32) -> Self {
        Self { next_seq: start_seq, pending: Vec::with_capacity(FRAMES_PER_PACKET * CHANNELS) }
    }

    pub fn next_seq(&self) -> u32 {
        self.next_seq
    }

    /// Queues stereo frames and returns every packet they complete.
    pub fn push(&mut self, frames: &SampleBuffer) -> Result<Vec<AudioPacket>> {
        if frames.channels() as usize != CHANNELS {
            return config_err(format!("packets carry stereo frames, got {} channels", frames.channels()));
        }
        let mut out = Vec::new();
        for s in frames.to_i16()? {
            self.pending.push(s);
            if self.pending.len() == FRAMES_PER_PACKET * CHANNELS {
                out.push(self.emit()?);
            }
        }
        Ok(out)
    }

    /// Flushes a partial packet, zero-padded and marked short.
    pub fn finish(mut self) -> Result<Option<AudioPacket>> {
        if self.pending.is_empty() {
            return Ok(None);
        }
        self.emit().map(Some)
    }

    fn emit(&mut self) -> Result<AudioPacket> {
        let p = AudioPacket::new(self.next_seq, &self.pending)?;
        self.pending.clear();
        self.next_seq = self.next_seq.wrapping_add(1);
        Ok(p)
    }
}

/// Splits a stereo buffer into packets numbered from `start_seq`.
pub fn packetize(frames: &SampleBuffer, start_seq: u32) -> Result<Vec<AudioPacket>> {
    let mut p = Packetizer::new(start_seq);
    let mut out = p.push(frames)?;
    out.extend(p.finish()?);
    Ok(out)
}

/// Seeded lossy link. Each packet is dropped with probability `loss_rate`;
/// survivors may arrive up to `reorder_window` positions late.
pub fn channel(packets: &[AudioPacket], loss_rate: f64, reorder_window: usize, seed: u64) -> Result<Vec<AudioPacket>> {
    if !(0.0..=1.0).contains(&loss_rate) {
        return config_err(format!("loss rate {loss_rate} outside [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyed: Vec<(usize, &AudioPacket)> = Vec::with_capacity(packets.len());
    for (i, p) in packets.iter().enumerate() {
        if !rng.random_bool(loss_rate) {
            keyed.push((i + rng.random_range(0..=reorder_window), p));
        }
    }
    keyed.sort_by_key(|&(k, _)| k);
    Ok(keyed.into_iter().map(|(_, p)| p.clone()).collect())
}

/// Receiver-side accounting.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReassemblyReport {
    pub frames_delivered: usize,
    pub packets_lost: usize,
    /// Zero-filled spans as `(start_frame, length)` in output frames.
    pub gap_spans: Vec<(usize, usize)>,
    /// Duplicates and packets that arrived after their slot was written.
    pub packets_discarded: usize,
}

/// Receiver side: restores packet order and zero-fills losses.
///
/// A packet is declared lost once `reorder_window` later packets are waiting
/// behind it.
#[derive(Debug, Clone)]
pub struct Reassembler {
    reorder_window: usize,
    /// Sequence number of output packet 0, once known.
    base_seq: Option<u32>,
    /// Index of the next packet to write out.
    next: u64,
    /// Waiting packets keyed by unwrapped index.
    pending: BTreeMap<u64, AudioPacket>,
    report: ReassemblyReport,
    frames_out: usize,
}

impl Reassembler {
    pub fn new(reorder_window: usize) -> Self {
        Self {
            reorder_window,
            base_seq: None,
            next: 0,
            pending: BTreeMap::new(),
            report: ReassemblyReport::default(),
            frames_out: 0,
        }
    }

    /// Starts at a known sequence number so that head losses are counted.
    pub fn starting_at(seq: u32, reorder_window: usize) -> Self {
        Self { base_seq: Some(seq), ..Self::new(reorder_window) }
    }

    pub fn report(&self) -> &ReassemblyReport {
        &self.report
    }

    /// Accepts one packet and returns interleaved samples now in order.
    pub fn push(&mut self, packet: AudioPacket) -> Vec<i16> {
        let base = *self.base_seq.get_or_insert(packet.seq);
        // Distance in sequence space; wraps at 2^32 and treats anything more
        // than half the space behind as late.
        let ahead = packet.seq.wrapping_sub(base.wrapping_add(self.next as u32));
        let key = self.next + ahead as u64;
        if ahead > u32::MAX / 2 || self.pending.contains_key(&key) {
            self.report.packets_discarded += 1;
            return Vec::new();
        }
        self.pending.insert(key, packet);
        let mut out = Vec::new();
        self.drain(false, &mut out);
        out
    }

    /// Writes out everything still waiting, zero-filling holes.
    pub fn finish(mut self) -> (Vec<i16>, ReassemblyReport) {
        let mut out = Vec::new();
        self.drain(true, &mut out);
        (out, self.report)
    }

    fn drain(&mut self, flush: bool, out: &mut Vec<i16>) {
        loop {
            if let Some(p) = self.pending.remove(&self.next) {
                let n = p.valid_frames;
                out.extend_from_slice(&p.samples()[..n * CHANNELS]);
                self.report.frames_delivered += n;
                self.frames_out += n;
            } else if !self.pending.is_empty() && (flush || self.pending.len() > self.reorder_window) {
                out.extend(std::iter::repeat_n(0, FRAMES_PER_PACKET * CHANNELS));
                self.report.packets_lost += 1;
                match self.report.gap_spans.last_mut() {
                    Some((start, len)) if *start + *len == self.frames_out => *len += FRAMES_PER_PACKET,
                    _ => self.report.gap_spans.push((self.frames_out, FRAMES_PER_PACKET)),
                }
                self.frames_out += FRAMES_PER_PACKET;
            } else {
                return;
            }
            self.next += 1;
        }
    }
}

/// Reassembles a complete capture. The output starts at the earliest
/// sequence number present, allowing for one wrap.
pub fn reassemble(packets: &[AudioPacket], sample_rate_hz: u32) -> Result<(SampleBuffer, ReassemblyReport)> {
    let Some(first) = packets.first() else {
        return Ok((SampleBuffer::silence(0, CHANNELS as u16, sample_rate_hz), ReassemblyReport::default()));
    };
    let start = packets
        .iter()
        .map(|p| p.seq.wrapping_sub(first.seq) as i32)
        .min()
        .map(|d| first.seq.wrapping_add(d as u32))
        .expect("non-empty");
    let mut r = Reassembler::starting_at(start, usize::MAX);
    let mut samples = Vec::with_capacity(packets.len() * FRAMES_PER_PACKET * CHANNELS);
    for p in packets {
        samples.extend(r.push(p.clone()));
    }
    let (tail, report) = r.finish();
    samples.extend(tail);
    Ok((SampleBuffer::from_i16(&samples, CHANNELS as u16, sample_rate_hz)?, report))
}

/// Writes packets as `u32` little-endian length prefix plus packet bytes.
pub fn write_framed<W: Write>(mut w: W, packets: &[AudioPacket]) -> Result<()> {
    for p in packets {
        w.write_all(&(PACKET_BYTES as u32).to_le_bytes())?;
        w.write_all(&p.to_bytes())?;
    }
    Ok(())
}

pub fn read_framed<R: Read>(mut r: R) -> Result<Vec<AudioPacket>> {
    let mut out = Vec::new();
    let mut len = [0u8; 4];
    loop {
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(out),
            Err(e) => return Err(e.into()),
        }
        let n = u32::from_le_bytes(len) as usize;
        if n != PACKET_BYTES {
            return Err(Error::Packet(format!("frame length {n}, expected {PACKET_BYTES}")));
        }
        let mut buf = [0u8; PACKET_BYTES];
        r.read_exact(&mut buf)?;
        out.push(AudioPacket::from_bytes(&buf)?);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buffer::PULSE_RATE_HZ;

    fn ramp(frames: usize) -> SampleBuffer {
        let x = (0..frames * 2).map(|i| ((i as i64 * 37) % 65536 - 32768) as f64).collect();
        SampleBuffer::new(x, 2, PULSE_RATE_HZ).unwrap()
    }

    #[test]
    fn capture_of_312_frames_makes_six_packets() {
        let p = packetize(&ramp(312), 0).unwrap();
        assert_eq!(p.len(), 6);
        assert_eq!(p.iter().map(|p| p.seq()).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(p[5].valid_frames(), 12);
        assert!(p[5].samples()[24..].iter().all(|&s| s == 0));
    }

    #[test]
    fn no_frames_no_packets() {
        assert!(packetize(&ramp(0), 7).unwrap().is_empty());
    }

    #[test]
    fn wire_layout_is_little_endian() {
        let p = AudioPacket::new(0x0403_0201, &[1, -2]).unwrap();
        let b = p.to_bytes();
        assert_eq!(b.len(), 244);
        assert_eq!(&b[..8], &[1, 2, 3, 4, 1, 0, 0xfe, 0xff]);
        assert_eq!(AudioPacket::from_bytes(&b).unwrap().samples()[..2], [1, -2]);
        assert!(AudioPacket::from_bytes(&b[..243]).is_err());
    }

    #[test]
    fn lossless_round_trip() {
        let x = ramp(1000);
        let (y, r) = reassemble(&packetize(&x, 0).unwrap(), PULSE_RATE_HZ).unwrap();
        assert_eq!(y, x);
        assert_eq!(r.packets_lost, 0);
        assert_eq!(r.frames_delivered, 1000);
    }

    #[test]
    fn dropped_middle_packet_leaves_one_gap() {
        let mut p = packetize(&ramp(600), 0).unwrap();
        p.remove(5);
        let (y, r) = reassemble(&p, PULSE_RATE_HZ).unwrap();
        assert_eq!(r.gap_spans, vec![(300, 60)]);
        assert_eq!(r.packets_lost, 1);
        assert_eq!(r.frames_delivered + 60 * r.packets_lost, 600);
        assert!(y.samples()[600..720].iter().all(|&s| s == 0.0));
    }

    #[test]
    fn adjacent_losses_merge() {
        let mut p = packetize(&ramp(600), 0).unwrap();
        p.drain(3..6);
        let (_, r) = reassemble(&p, PULSE_RATE_HZ).unwrap();
        assert_eq!(r.gap_spans, vec![(180, 180)]);
    }

    #[test]
    fn wrap_is_seamless() {
        let x = ramp(600);
        let p = packetize(&x, u32::MAX - 4).unwrap();
        assert_eq!(p[5].seq(), 0);
        let mut shuffled = p.clone();
        shuffled.swap(4, 5);
        shuffled.swap(0, 7);
        let (y, r) = reassemble(&shuffled, PULSE_RATE_HZ).unwrap();
        assert_eq!(y, x);
        assert_eq!(r.packets_lost, 0);
    }

    #[test]
    fn channel_extremes_and_determinism() {
        let p = packetize(&ramp(60_000), 0).unwrap();
        assert_eq!(channel(&p, 0.0, 0, 1).unwrap(), p);
        assert!(channel(&p, 1.0, 0, 1).unwrap().is_empty());
        let a = channel(&p, 0.01, 3, 42).unwrap();
        assert_eq!(a, channel(&p, 0.01, 3, 42).unwrap());
        assert!(a.len() < p.len());
        assert!(channel(&p, 1.5, 0, 1).is_err());
    }

    #[test]
    fn streaming_receiver_respects_window() {
        let p = packetize(&ramp(600), 0).unwrap();
        let mut r = Reassembler::starting_at(0, 2);
        assert!(r.push(p[1].clone()).is_empty());
        assert!(r.push(p[2].clone()).is_empty());
        // A third packet waiting behind the hole gives up on seq 0.
        assert_eq!(r.push(p[3].clone()).len(), 4 * 120);
        assert_eq!(r.report().packets_lost, 1);
        assert!(r.push(p[0].clone()).is_empty());
        assert_eq!(r.report().packets_discarded, 1);
    }

    #[test]
    fn framed_file_round_trip() {
        let p = packetize(&ramp(240), 9).unwrap();
        let mut bytes = Vec::new();
        write_framed(&mut bytes, &p).unwrap();
        assert_eq!(bytes.len(), 4 * 248);
        assert_eq!(read_framed(bytes.as_slice()).unwrap(), p);
        assert!(read_framed(&bytes[..100]).is_err());
    }
}
