use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Time shift and additive noise. Noise standard deviation is a uniform
/// factor in `[noise_param_min, noise_param_max]` times the signal RMS.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    pub shift_min_fraction: f64,
    pub shift_max_fraction: f64,
    pub shift_probability: f64,
    pub noise_param_min: f64,
    pub noise_param_max: f64,
    pub noise_probability: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            shift_min_fraction: -0.5,
            shift_max_fraction: 0.5,
            shift_probability: 1.0,
            noise_param_min: 0.25,
            noise_param_max: 0.9,
            noise_probability: 0.5,
        }
    }
}

impl AugmentSpec {
    pub fn disabled() -> Self {
        Self {
            shift_probability: 0.0,
            noise_probability: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let frac = |v: f64| (-1.0..=1.0).contains(&v);
        let prob = |v: f64| (0.0..=1.0).contains(&v);
        if !(frac(self.shift_min_fraction)
            && frac(self.shift_max_fraction)
            && self.shift_min_fraction <= self.shift_max_fraction)
        {
            return Err(Error::InvalidArgument("shift fractions must satisfy -1 <= min <= max <= 1".into()));
        }
        if !(prob(self.shift_probability) && prob(self.noise_probability)) {
            return Err(Error::InvalidArgument("augmentation probabilities must lie in [0, 1]".into()));
        }
        if !(self.noise_param_min >= 0.0 && self.noise_param_min <= self.noise_param_max) {
            return Err(Error::InvalidArgument("noise parameters must satisfy 0 <= min <= max".into()));
        }
        Ok(())
    }
}

/// Move samples right by `round(fraction · len)` (left when negative),
/// filling the vacated region with zeros.
pub fn shift_samples(x: &[f64], fraction: f64) -> Vec<f64> {
    let n = x.len() as i64;
    let k = (fraction * n as f64).round() as i64;
    (0..n)
        .map(|i| {
            let src = i - k;
            if (0..n).contains(&src) {
                x[src as usize]
            } else {
                0.0
            }
        })
        .collect()
}

pub fn augment_audio(x: &[f64], spec: &AugmentSpec, rng: &mut Rng) -> Vec<f64> {
    let mut out = x.to_vec();
    if spec.shift_probability > 0.0 && rng.random::<f64>() < spec.shift_probability {
        let f = if spec.shift_max_fraction > spec.shift_min_fraction {
            rng.random_range(spec.shift_min_fraction..=spec.shift_max_fraction)
        } else {
            spec.shift_min_fraction
        };
        out = shift_samples(&out, f);
    }
    if spec.noise_probability > 0.0 && rng.random::<f64>() < spec.noise_probability {
        let factor = if spec.noise_param_max > spec.noise_param_min {
            rng.random_range(spec.noise_param_min..=spec.noise_param_max)
        } else {
            spec.noise_param_min
        };
        let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
        let std = factor * rms;
        for v in &mut out {
            *v += std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    out
}
