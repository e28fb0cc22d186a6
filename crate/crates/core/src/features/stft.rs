use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::{AudioBuffer, CANONICAL_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub n_freq: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub sample_rate: u32,
    pub log_floor: f64,
}

impl Default for StftConfig {
    /// 2048-point FFT, 40 ms window, 20 ms hop at 16 kHz.
    fn default() -> Self {
        Self {
            n_freq: 2048,
            win_length: 640,
            hop_length: 320,
            sample_rate: CANONICAL_RATE,
            log_floor: 1e-10,
        }
    }
}

impl StftConfig {
    /// 512-point FFT, 25 ms window, 10 ms hop; used for handcrafted features.
    pub fn svm() -> Self {
        Self {
            n_freq: 512,
            win_length: 400,
            hop_length: 160,
            ..Self::default()
        }
    }

    /// 512-point FFT and window with a 256-sample hop; used for sonographs.
    pub fn sonograph() -> Self {
        Self {
            n_freq: 512,
            win_length: 512,
            hop_length: 256,
            ..Self::default()
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_freq / 2 + 1
    }

    pub fn bin_hz(&self, k: usize) -> f64 {
        k as f64 * f64::from(self.sample_rate) / self.n_freq as f64
    }

    /// `1 + floor((n - win) / hop)` for `n >= win`.
    pub fn n_frames(&self, n: usize) -> usize {
        if n < self.win_length {
            0
        } else {
            1 + (n - self.win_length) / self.hop_length
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_freq == 0 || self.win_length == 0 || self.hop_length == 0 {
            return Err(Error::InvalidArgument("STFT sizes must be positive".into()));
        }
        if self.win_length > self.n_freq || self.hop_length > self.win_length {
            return Err(Error::InvalidArgument(format!(
                "STFT requires hop <= win <= n_freq, got {}/{}/{}",
                self.hop_length, self.win_length, self.n_freq
            )));
        }
        if !(self.log_floor > 0.0) || self.sample_rate == 0 {
            return Err(Error::InvalidArgument(
                "log floor and sample rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Row-major `[n_frames × n_bins]` matrix of magnitudes or log-magnitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrogram {
    pub values: Vec<f64>,
    pub n_frames: usize,
    pub n_bins: usize,
    pub hop_secs: f64,
    pub is_log: bool,
    pub config: StftConfig,
}

impl Spectrogram {
    pub fn frame(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_bins..(i + 1) * self.n_bins]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.n_bins.max(1))
    }

    pub fn to_log(&self) -> Spectrogram {
        if self.is_log {
            return self.clone();
        }
        Spectrogram {
            values: self
                .values
                .iter()
                .map(|m| (m + self.config.log_floor).ln())
                .collect(),
            is_log: true,
            ..self.clone()
        }
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Reusable FFT plan and window for one configuration.
pub struct Stft {
    config: StftConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            window: hann(config.win_length),
            fft: FftPlanner::new().plan_fft_forward(config.n_freq),
            config,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    /// Magnitude spectrum of the frame starting at `start`. Samples past the
    /// end of `x` read as zero.
    pub fn frame_magnitudes(&self, x: &[f64], start: usize, buf: &mut Vec<Complex<f64>>, out: &mut [f64]) {
        let c = &self.config;
        buf.clear();
        buf.resize(c.n_freq, Complex::new(0.0, 0.0));
        for (i, w) in self.window.iter().enumerate() {
            let v = x.get(start + i).copied().unwrap_or(0.0);
            buf[i].re = v * w;
        }
        self.fft.process(buf);
        for (o, z) in out.iter_mut().zip(buf.iter()) {
            *o = z.norm();
        }
    }

    /// Linear-magnitude spectrogram with exactly `n_frames` frames starting
    /// at multiples of the hop; frames running past the signal see zeros.
    pub fn magnitude_frames(&self, x: &[f64], n_frames: usize) -> Spectrogram {
        let c = &self.config;
        let n_bins = c.n_bins();
        let mut values = vec![0.0; n_frames * n_bins];
        let mut buf = Vec::with_capacity(c.n_freq);
        for (i, out) in values.chunks_exact_mut(n_bins).enumerate() {
            self.frame_magnitudes(x, i * c.hop_length, &mut buf, out);
        }
        Spectrogram {
            values,
            n_frames,
            n_bins,
            hop_secs: c.hop_length as f64 / f64::from(c.sample_rate),
            is_log: false,
            config: *c,
        }
    }

    pub fn magnitude(&self, buffer: &AudioBuffer) -> Result<Spectrogram> {
        let c = &self.config;
        if buffer.sample_rate() != c.sample_rate {
            return Err(Error::InvalidArgument(format!(
                "STFT configured for {} Hz, buffer is {} Hz",
                c.sample_rate,
                buffer.sample_rate()
            )));
        }
        if buffer.len() < c.win_length {
            return Err(Error::InvalidArgument(format!(
                "buffer of {} samples is shorter than one {}-sample window",
                buffer.len(),
                c.win_length
            )));
        }
        Ok(self.magnitude_frames(buffer.samples(), c.n_frames(buffer.len())))
    }
}

pub fn stft_magnitude(buffer: &AudioBuffer, config: &StftConfig) -> Result<Spectrogram> {
    Stft::new(*config)?.magnitude(buffer)
}

/// `ln(|STFT| + log_floor)` with a periodic Hann window.
pub fn stft_log_spectrogram(buffer: &AudioBuffer, config: &StftConfig) -> Result<Spectrogram> {
    Ok(stft_magnitude(buffer, config)?.to_log())
}
