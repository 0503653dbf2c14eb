//! Timestamped PCM sample buffers and WAV interchange.
//!
//! Samples are stored as `f64` in raw 16-bit units so that generators and the
//! simulator can work with sub-LSB amplitudes. Quantization to `i16` happens
//! only when a buffer is written out.

use std::io::{Read, Seek, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Pulse-train and microphone rate.
pub const PULSE_RATE_HZ: u32 = 15_625;
/// Rate used for FMCW ranging chirps.
pub const FMCW_RATE_HZ: u32 = 31_250;

pub const I16_MIN: f64 = -32768.0;
pub const I16_MAX: f64 = 32767.0;

/// Interleaved mono or stereo audio at a declared sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBuffer {
    samples: Vec<f64>,
    channels: u16,
    sample_rate_hz: u32,
    /// Stream time of the first frame, in frames.
    start_frame: u64,
}

impl SampleBuffer {
    pub fn new(samples: Vec<f64>, channels: u16, sample_rate_hz: u32) -> Result<Self> {
        if channels != 1 && channels != 2 {
            return Err(Error::Config(format!("{channels} channels (expected 1 or 2)")));
        }
        if sample_rate_hz == 0 {
            return Err(Error::SampleRate(0));
        }
        if !samples.len().is_multiple_of(channels as usize) {
            return Err(Error::LengthMismatch(format!(
                "{} samples is not a whole number of {channels}-channel frames",
                samples.len()
            )));
        }
        if let Some(&bad) = samples.iter().find(|s| !(I16_MIN..=I16_MAX).contains(*s)) {
            return Err(Error::Clipping(bad));
        }
        Ok(Self { samples, channels, sample_rate_hz, start_frame: 0 })
    }

    pub fn mono(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        Self::new(samples, 1, sample_rate_hz)
    }

    pub fn silence(frames: usize, channels: u16, sample_rate_hz: u32) -> Self {
        Self { samples: vec![0.0; frames * channels as usize], channels, sample_rate_hz, start_frame: 0 }
    }

    /// Interleaves two equal-length mono buffers.
    pub fn stereo(left: &SampleBuffer, right: &SampleBuffer) -> Result<Self> {
        if left.channels != 1 || right.channels != 1 {
            return Err(Error::Config("stereo() expects two mono buffers".into()));
        }
        if left.sample_rate_hz != right.sample_rate_hz {
            return Err(Error::LengthMismatch("channel sample rates differ".into()));
        }
        if left.len() != right.len() {
            return Err(Error::LengthMismatch(format!("{} vs {} frames", left.len(), right.len())));
        }
        let samples = left.samples.iter().zip(&right.samples).flat_map(|(&l, &r)| [l, r]).collect();
        Ok(Self { samples, channels: 2, sample_rate_hz: left.sample_rate_hz, start_frame: left.start_frame })
    }

    pub fn with_start_frame(mut self, start_frame: u64) -> Self {
        self.start_frame = start_frame;
        self
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn channels(&self) -> u16 {
        self.channels
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn start_frame(&self) -> u64 {
        self.start_frame
    }

    /// Number of frames (samples per channel).
    pub fn len(&self) -> usize {
        self.samples.len() / self.channels as usize
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate_hz as f64
    }

    /// Extracts one channel as a mono buffer.
    pub fn channel(&self, index: u16) -> Result<SampleBuffer> {
        if index >= self.channels {
            return Err(Error::Config(format!("channel {index} of {}", self.channels)));
        }
        let samples = self.samples.iter().skip(index as usize).step_by(self.channels as usize).copied().collect();
        Ok(Self { samples, channels: 1, sample_rate_hz: self.sample_rate_hz, start_frame: self.start_frame })
    }

    /// Frames `[start, end)` as a new buffer; the range is clamped to the buffer.
    pub fn slice(&self, start: usize, end: usize) -> SampleBuffer {
        let end = end.min(self.len());
        let start = start.min(end);
        let ch = self.channels as usize;
        Self {
            samples: self.samples[start * ch..end * ch].to_vec(),
            channels: self.channels,
            sample_rate_hz: self.sample_rate_hz,
            start_frame: self.start_frame + start as u64,
        }
    }

    /// Appends `other`, which must share the channel layout and rate.
    pub fn append(&mut self, other: &SampleBuffer) -> Result<()> {
        if other.channels != self.channels || other.sample_rate_hz != self.sample_rate_hz {
            return Err(Error::LengthMismatch("append: layout or rate differs".into()));
        }
        self.samples.extend_from_slice(&other.samples);
        Ok(())
    }

    /// Samples rounded to `i16`; errors instead of saturating.
    pub fn to_i16(&self) -> Result<Vec<i16>> {
        self.samples
            .iter()
            .map(|&s| {
                let r = s.round();
                if (I16_MIN..=I16_MAX).contains(&r) {
                    Ok(r as i16)
                } else {
                    Err(Error::Clipping(s))
                }
            })
            .collect()
    }

    /// Rounds every sample to the nearest integer in place.
    pub fn quantized(&self) -> SampleBuffer {
        let samples = self.samples.iter().map(|s| s.round()).collect();
        Self { samples, ..self.clone() }
    }

    pub fn from_i16(samples: &[i16], channels: u16, sample_rate_hz: u32) -> Result<Self> {
        Self::new(samples.iter().map(|&s| s as f64).collect(), channels, sample_rate_hz)
    }

    pub fn write_wav<W: Write + Seek>(&self, writer: W) -> Result<()> {
        let spec = hound::WavSpec {
            channels: self.channels,
            sample_rate: self.sample_rate_hz,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::new(writer, spec)?;
        for s in self.to_i16()? {
            w.write_sample(s)?;
        }
        w.finalize()?;
        Ok(())
    }

    pub fn save_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_wav(file)
    }

    pub fn read_wav<R: Read>(reader: R) -> Result<Self> {
        let r = hound::WavReader::new(reader)?;
        let spec = r.spec();
        if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(Error::Config(format!(
                "expected 16-bit PCM, got {} bit {:?}",
                spec.bits_per_sample, spec.sample_format
            )));
        }
        let samples = r.into_samples::<i16>().collect::<std::result::Result<Vec<_>, _>>()?;
        Self::from_i16(&samples, spec.channels, spec.sample_rate)
    }

    pub fn load_wav(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_wav(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_samples() {
        assert!(matches!(SampleBuffer::mono(vec![0.0, 32768.0], PULSE_RATE_HZ), Err(Error::Clipping(_))));
        assert!(SampleBuffer::mono(vec![-32768.0, 32767.0], PULSE_RATE_HZ).is_ok());
    }

    #[test]
    fn stereo_requires_whole_frames() {
        assert!(SampleBuffer::new(vec![0.0; 3], 2, PULSE_RATE_HZ).is_err());
        let b = SampleBuffer::new(vec![1.0, 2.0, 3.0, 4.0], 2, PULSE_RATE_HZ).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.channel(1).unwrap().samples(), &[2.0, 4.0]);
    }

    #[test]
    fn wav_round_trip_stereo() {
        let l = SampleBuffer::mono(vec![0.0, 100.0, -32768.0, 32767.0], FMCW_RATE_HZ).unwrap();
        let r = SampleBuffer::mono(vec![1.0, -1.0, 5.0, -5.0], FMCW_RATE_HZ).unwrap();
        let s = SampleBuffer::stereo(&l, &r).unwrap();
        let mut bytes = std::io::Cursor::new(Vec::new());
        s.write_wav(&mut bytes).unwrap();
        let back = SampleBuffer::read_wav(std::io::Cursor::new(bytes.into_inner())).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.sample_rate_hz(), FMCW_RATE_HZ);
    }
}
