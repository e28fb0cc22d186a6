//! Audio decoding, mono downmix and resampling.
//!
//! Everything downstream works on [`AudioBuffer`]: mono `f64` samples in
//! `[-1, 1]` plus a sample rate. Feature extraction expects
//! [`CANONICAL_RATE`]; cough segmentation runs at [`SEGMENTATION_RATE`].

mod resample;
mod wav;

pub use resample::{resample, Resampler};
pub use wav::{decode_wav, encode_wav_pcm16, read_wav, write_wav};

use std::path::Path;

use crate::error::{Error, Result};

/// Feature extraction and model input rate.
pub const CANONICAL_RATE: u32 = 16_000;
/// Rate at which the cough segmenter receives audio.
pub const SEGMENTATION_RATE: u32 = 44_100;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite sample at index {i}"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn scaled(&self, gain: f64) -> Result<Self> {
        Self::new(
            self.samples.iter().map(|s| s * gain).collect(),
            self.sample_rate,
        )
    }
}

/// Per-sample arithmetic mean of the channels.
pub fn downmix_mono(channels: &[AudioBuffer]) -> Result<AudioBuffer> {
    let first = channels
        .first()
        .ok_or_else(|| Error::InvalidArgument("no channels to downmix".into()))?;
    if channels.len() == 1 {
        return Ok(first.clone());
    }
    for (i, ch) in channels.iter().enumerate().skip(1) {
        if ch.len() != first.len() || ch.sample_rate != first.sample_rate {
            return Err(Error::InvalidArgument(format!(
                "channel {i} has {} samples at {} Hz, expected {} at {} Hz",
                ch.len(),
                ch.sample_rate,
                first.len(),
                first.sample_rate
            )));
        }
    }
    let scale = 1.0 / channels.len() as f64;
    let mut mixed = vec![0.0; first.len()];
    for ch in channels {
        for (m, s) in mixed.iter_mut().zip(&ch.samples) {
            *m += s;
        }
    }
    for m in &mut mixed {
        *m *= scale;
    }
    AudioBuffer::new(mixed, first.sample_rate)
}

/// Decode a WAV file, downmix to mono and resample to `target_rate`.
pub fn load_mono(path: impl AsRef<Path>, target_rate: u32) -> Result<AudioBuffer> {
    let channels = read_wav(path)?;
    let mono = downmix_mono(&channels)?;
    resample(&mono, target_rate)
}
