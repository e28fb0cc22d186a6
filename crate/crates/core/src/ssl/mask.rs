use ndarray::{s, Array2};
use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Spectrogram;
use crate::rng::Rng;

/// Time/frequency masking applied to log spectrograms during pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub time_mask_fraction: f64,
    pub max_freq_band_fraction: f64,
    pub noise_probability: f64,
    pub noise_mean: f64,
    pub noise_variance: f64,
    /// Frames per time block.
    pub time_block_width: usize,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            time_mask_fraction: 0.15,
            max_freq_band_fraction: 0.20,
            noise_probability: 0.10,
            noise_mean: 0.0,
            noise_variance: 0.2,
            time_block_width: 7,
        }
    }
}

impl MaskSpec {
    /// No masking and no noise.
    pub fn none() -> Self {
        Self {
            time_mask_fraction: 0.0,
            max_freq_band_fraction: 0.0,
            noise_probability: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.time_mask_fraction) || !unit(self.max_freq_band_fraction) || !unit(self.noise_probability) {
            return Err(Error::InvalidArgument("mask fractions and probabilities must lie in [0, 1]".into()));
        }
        if !(self.noise_variance >= 0.0) || !self.noise_mean.is_finite() || !self.noise_variance.is_finite() {
            return Err(Error::InvalidArgument("noise variance must be finite and non-negative".into()));
        }
        if self.time_block_width == 0 {
            return Err(Error::InvalidArgument("time block width must be positive".into()));
        }
        Ok(())
    }
}

/// Start frames of the masked time blocks. The block count is
/// `fraction·n/width` rounded stochastically, so the expected covered
/// fraction equals `fraction` whenever the blocks fit; blocks never overlap.
pub fn time_block_starts(n_frames: usize, spec: &MaskSpec, rng: &mut Rng) -> Vec<usize> {
    let w = spec.time_block_width;
    let target = spec.time_mask_fraction * n_frames as f64 / w as f64;
    let mut k = target.floor() as usize;
    if rng.random::<f64>() < target.fract() {
        k += 1;
    }
    let k = k.min(n_frames / w);
    if k == 0 {
        return Vec::new();
    }
    // k blocks of width w among n frames ↔ k distinct slots out of n − k(w − 1)
    let mut slots = sample(rng, n_frames - k * (w - 1), k).into_vec();
    slots.sort_unstable();
    slots.iter().enumerate().map(|(i, &s)| s + i * (w - 1)).collect()
}

/// Mask the first `valid` rows of a `[frames, bins]` matrix in place.
/// Returns the zeroed cells.
pub fn mask_frames(x: &mut Array2<f64>, valid: usize, spec: &MaskSpec, rng: &mut Rng) -> Result<Array2<bool>> {
    spec.validate()?;
    let (frames, bins) = x.dim();
    if valid > frames {
        return Err(Error::Shape(format!("{valid} valid frames in a {frames}-frame matrix")));
    }
    if valid < spec.time_block_width {
        return Err(Error::InvalidArgument(format!(
            "{valid} frames is shorter than one {}-frame mask block",
            spec.time_block_width
        )));
    }
    let mut mask = Array2::from_elem((frames, bins), false);
    for start in time_block_starts(valid, spec, rng) {
        mask.slice_mut(s![start..start + spec.time_block_width, ..]).fill(true);
    }
    let max_band = (spec.max_freq_band_fraction * bins as f64).floor() as usize;
    let band = rng.random_range(0..=max_band);
    if band > 0 {
        let lo = rng.random_range(0..=bins - band);
        mask.slice_mut(s![..valid, lo..lo + band]).fill(true);
    }
    x.zip_mut_with(&mask, |v, &m| {
        if m {
            *v = 0.0;
        }
    });
    if spec.noise_probability > 0.0 && rng.random::<f64>() < spec.noise_probability {
        let noise = Normal::new(spec.noise_mean, spec.noise_variance.sqrt())
            .map_err(|e| Error::InvalidArgument(format!("noise: {e}")))?;
        for v in x.slice_mut(s![..valid, ..]) {
            *v += noise.sample(rng);
        }
    }
    Ok(mask)
}

/// Masked copy of a log spectrogram plus the `[frames × bins]` mask of
/// zeroed cells, row-major like the spectrogram values.
pub fn mask_spectrogram(spec: &Spectrogram, mspec: &MaskSpec, rng: &mut Rng) -> Result<(Spectrogram, Vec<bool>)> {
    if !spec.is_log {
        return Err(Error::InvalidArgument("masking expects a log spectrogram".into()));
    }
    let mut x = Array2::from_shape_vec((spec.n_frames, spec.n_bins), spec.values.clone())
        .map_err(|e| Error::Shape(format!("spectrogram values: {e}")))?;
    let mask = mask_frames(&mut x, spec.n_frames, mspec, rng)?;
    let out = Spectrogram {
        values: x.into_raw_vec_and_offset().0,
        ..spec.clone()
    };
    Ok((out, mask.into_raw_vec_and_offset().0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn log_spec(frames: usize, bins: usize, seed: u64) -> Spectrogram {
        let mut r = rng::seeded(seed, &[1]);
        Spectrogram {
            values: (0..frames * bins).map(|_| r.random_range(-5.0..1.0)).collect(),
            n_frames: frames,
            n_bins: bins,
            hop_secs: 0.02,
            is_log: true,
            config: Default::default(),
        }
    }

    #[test]
    fn disabled_spec_is_identity() {
        let x = log_spec(20, 33, 0);
        let (y, m) = mask_spectrogram(&x, &MaskSpec::none(), &mut rng::seeded(1, &[])).unwrap();
        assert_eq!(y, x);
        assert!(m.iter().all(|&b| !b));
    }

    #[test]
    fn too_short_and_linear_inputs_are_rejected() {
        let x = log_spec(6, 10, 0);
        assert!(mask_spectrogram(&x, &MaskSpec::default(), &mut rng::seeded(1, &[])).is_err());
        let lin = Spectrogram { is_log: false, ..log_spec(20, 10, 0) };
        assert!(mask_spectrogram(&lin, &MaskSpec::default(), &mut rng::seeded(1, &[])).is_err());
        let bad = MaskSpec { noise_variance: -1.0, ..MaskSpec::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn time_fraction_is_unbiased() {
        let spec = MaskSpec::default();
        for n in [15, 40, 100] {
            let mut r = rng::seeded(9, &[n as u64]);
            let draws = 4000;
            let covered: usize = (0..draws).map(|_| time_block_starts(n, &spec, &mut r).len() * 7).sum();
            let frac = covered as f64 / (draws * n) as f64;
            assert!((frac - 0.15).abs() < 0.01, "n={n}: {frac}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn masking_is_local(frames in 7usize..60, bins in 5usize..80, seed in any::<u64>()) {
            let x = log_spec(frames, bins, seed);
            let spec = MaskSpec { noise_probability: 0.0, ..MaskSpec::default() };
            let (y, m) = mask_spectrogram(&x, &spec, &mut rng::seeded(seed, &[2])).unwrap();
            for ((a, b), &masked) in x.values.iter().zip(&y.values).zip(&m) {
                if masked {
                    prop_assert_eq!(*b, 0.0);
                } else {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
            // band width: count fully masked columns outside time blocks
            let starts = time_block_starts(frames, &spec, &mut rng::seeded(seed, &[2]));
            let blocked: Vec<bool> = (0..frames).map(|f| starts.iter().any(|&s| f >= s && f < s + 7)).collect();
            let free_row = blocked.iter().position(|&b| !b);
            if let Some(r) = free_row {
                let band = (0..bins).filter(|&c| m[r * bins + c]).count();
                prop_assert!(band <= (0.2 * bins as f64).floor() as usize);
            }
            let mut sorted = starts.clone();
            sorted.sort_unstable();
            prop_assert!(sorted.windows(2).all(|w| w[1] >= w[0] + 7));
            prop_assert!(starts.iter().all(|&s| s + 7 <= frames));
        }
    }
}
