use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::stft::{Spectrogram, StftConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MfccConfig {
    pub n_mfcc: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub delta_r: usize,
}

impl MfccConfig {
    /// 13 coefficients from a 40-band bank over 0-8 kHz.
    pub fn svm() -> Self {
        Self {
            n_mfcc: 13,
            n_mels: 40,
            fmin: 0.0,
            fmax: 8000.0,
            delta_r: 2,
        }
    }

    /// 64 coefficients from a 64-band bank, so the DCT is square.
    pub fn sonograph() -> Self {
        Self {
            n_mfcc: 64,
            n_mels: 64,
            ..Self::svm()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return Err(Error::InvalidArgument(format!(
                "n_mfcc {} must lie in 1..={}",
                self.n_mfcc, self.n_mels
            )));
        }
        if !(2..=3).contains(&self.delta_r) {
            return Err(Error::InvalidArgument("delta_r must be 2 or 3".into()));
        }
        Ok(())
    }
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self::svm()
    }
}

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    if hz < MIN_LOG_HZ {
        hz / F_SP
    } else {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / log_step()
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel < MIN_LOG_MEL {
        mel * F_SP
    } else {
        MIN_LOG_HZ * ((mel - MIN_LOG_MEL) * log_step()).exp()
    }
}

/// Triangular filters with unit peak, `[n_mels × n_bins]`.
pub fn mel_filterbank(config: &MfccConfig, stft: &StftConfig) -> Result<Array2<f64>> {
    let nyquist = f64::from(stft.sample_rate) / 2.0;
    if !(config.fmin >= 0.0 && config.fmin < config.fmax && config.fmax <= nyquist) {
        return Err(Error::InvalidArgument(format!(
            "mel range {}..{} Hz invalid for Nyquist {nyquist} Hz",
            config.fmin, config.fmax
        )));
    }
    if config.n_mels == 0 {
        return Err(Error::InvalidArgument("n_mels must be positive".into()));
    }
    let (lo, hi) = (hz_to_mel(config.fmin), hz_to_mel(config.fmax));
    let m = config.n_mels;
    let edges: Vec<f64> = (0..m + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (m + 1) as f64))
        .collect();
    let n_bins = stft.n_bins();
    let mut bank = Array2::zeros((m, n_bins));
    for (j, mut row) in bank.axis_iter_mut(Axis(0)).enumerate() {
        let (l, c, r) = (edges[j], edges[j + 1], edges[j + 2]);
        for (k, w) in row.iter_mut().enumerate() {
            let f = stft.bin_hz(k);
            let rise = (f - l) / (c - l);
            let fall = (r - f) / (r - c);
            *w = rise.min(fall).max(0.0);
        }
        if row.sum() <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "mel filter {j} covers no FFT bin; use fewer bands or a larger FFT"
            )));
        }
    }
    Ok(bank)
}

/// Orthonormal DCT-II basis, `[n_out × n_in]`.
pub fn dct_matrix(n_out: usize, n_in: usize) -> Array2<f64> {
    let n = n_in as f64;
    Array2::from_shape_fn((n_out, n_in), |(k, i)| {
        let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        scale * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos()
    })
}

/// Precomputed mel bank and DCT for one configuration pair.
#[derive(Debug, Clone)]
pub struct Mfcc {
    config: MfccConfig,
    log_floor: f64,
    bank: Array2<f64>,
    dct: Array2<f64>,
}

impl Mfcc {
    pub fn new(config: MfccConfig, stft: &StftConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            bank: mel_filterbank(&config, stft)?,
            dct: dct_matrix(config.n_mfcc, config.n_mels),
            log_floor: stft.log_floor,
            config,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.config
    }

    /// Log mel energies of each frame's power spectrum, `[n_frames × n_mels]`.
    pub fn log_mel(&self, spec: &Spectrogram) -> Result<Array2<f64>> {
        if spec.is_log {
            return Err(Error::InvalidArgument(
                "MFCC expects a linear-magnitude spectrogram".into(),
            ));
        }
        if spec.n_bins != self.bank.ncols() {
            return Err(Error::Shape(format!(
                "spectrogram has {} bins, mel bank expects {}",
                spec.n_bins,
                self.bank.ncols()
            )));
        }
        let power = Array2::from_shape_fn((spec.n_frames, spec.n_bins), |(i, k)| {
            spec.values[i * spec.n_bins + k].powi(2)
        });
        Ok(power.dot(&self.bank.t()).mapv(|e| (e + self.log_floor).ln()))
    }

    /// `[n_frames × n_mfcc]` coefficients.
    pub fn compute(&self, spec: &Spectrogram) -> Result<Array2<f64>> {
        Ok(self.log_mel(spec)?.dot(&self.dct.t()))
    }
}

pub fn mfcc(spec: &Spectrogram, config: &MfccConfig) -> Result<Array2<f64>> {
    Mfcc::new(*config, &spec.config)?.compute(spec)
}

/// `D[n] = C[n + r] - C[n - r]` along the frame axis with clamped indices.
pub fn delta(coeffs: &Array2<f64>, r: usize) -> Result<Array2<f64>> {
    if r == 0 {
        return Err(Error::InvalidArgument("delta lag must be at least 1".into()));
    }
    let n = coeffs.nrows();
    if n == 0 {
        return Err(Error::Empty("coefficient matrix"));
    }
    Ok(Array2::from_shape_fn(coeffs.dim(), |(t, c)| {
        coeffs[[(t + r).min(n - 1), c]] - coeffs[[t.saturating_sub(r), c]]
    }))
}
