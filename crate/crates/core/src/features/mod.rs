//! Feature extraction: log spectrograms for the transformer, handcrafted
//! statistics for the SVM and MFCC sonographs for the CNN.

mod cache;
mod descriptors;
mod mel;
mod stft;

pub use cache::{read_feature_matrix, write_feature_matrix, FEATURE_CACHE_MAGIC};
pub use descriptors::{frame_descriptors, FrameDescriptors};
pub use mel::{dct_matrix, delta, hz_to_mel, mel_filterbank, mel_to_hz, mfcc, Mfcc, MfccConfig};
pub use stft::{hann, stft_log_spectrogram, stft_magnitude, Spectrogram, Stft, StftConfig};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioBuffer, CANONICAL_RATE};
use crate::cnn::{augment_audio, AugmentSpec};
use crate::error::{Error, Result};
use crate::quality::{validate_segments, CoughSegment};
use crate::rng::Rng;

/// Concatenate the cough segments in order.
pub fn cough_only_audio(buffer: &AudioBuffer, segments: &[CoughSegment]) -> Result<AudioBuffer> {
    if segments.is_empty() {
        return Err(Error::NoSegments);
    }
    validate_segments(segments, buffer.len())?;
    let x = buffer.samples();
    let samples = segments
        .iter()
        .flat_map(|s| x[s.start..s.end].iter().copied())
        .collect();
    AudioBuffer::new(samples, buffer.sample_rate())
}

/// Zero-pad `x` to at least `n` samples.
fn pad_to(mut x: Vec<f64>, n: usize) -> Vec<f64> {
    if x.len() < n {
        x.resize(n, 0.0);
    }
    x
}

pub const SVM_CHANNELS: usize = 43;
pub const SVM_STATS: usize = 4;
pub const SVM_FEATURE_LEN: usize = SVM_CHANNELS * SVM_STATS;

/// Channel names in vector order. Entry `channel * 4 + stat` holds statistic
/// `stat` (mean, std, max, min) of that channel over time.
pub fn svm_feature_names() -> Vec<String> {
    let mut channels: Vec<String> = ["centroid", "rolloff_25", "rolloff_75", "rms"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for prefix in ["mfcc", "delta", "delta2"] {
        channels.extend((0..13).map(|i| format!("{prefix}_{i}")));
    }
    channels
        .iter()
        .flat_map(|c| ["mean", "std", "max", "min"].map(|s| format!("{c}.{s}")))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmFeatureVector {
    pub values: Vec<f64>,
}

/// Mean, population std, max, min. A constant series has std exactly 0.
fn summarize(series: impl Iterator<Item = f64> + Clone) -> [f64; 4] {
    let (mut n, mut sum, mut max, mut min) = (0usize, 0.0, f64::NEG_INFINITY, f64::INFINITY);
    for v in series.clone() {
        n += 1;
        sum += v;
        max = max.max(v);
        min = min.min(v);
    }
    if max == min {
        return [max, 0.0, max, min];
    }
    let mean = sum / n as f64;
    let var = series.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    [mean, var.sqrt(), max, min]
}

/// Handcrafted feature extractor (25 ms / 10 ms frames, 13 MFCCs).
pub struct SvmFeaturizer {
    stft: Stft,
    mfcc: Mfcc,
}

impl SvmFeaturizer {
    pub fn new() -> Result<Self> {
        Self::with_configs(StftConfig::svm(), MfccConfig::svm())
    }

    pub fn with_configs(stft: StftConfig, mfcc: MfccConfig) -> Result<Self> {
        if mfcc.n_mfcc != 13 {
            return Err(Error::InvalidArgument("SVM features use 13 MFCCs".into()));
        }
        Ok(Self {
            mfcc: Mfcc::new(mfcc, &stft)?,
            stft: Stft::new(stft)?,
        })
    }

    /// Features over already condensed audio.
    pub fn from_audio(&self, audio: &AudioBuffer) -> Result<SvmFeatureVector> {
        let win = self.stft.config().win_length;
        let padded = AudioBuffer::new(pad_to(audio.samples().to_vec(), win), audio.sample_rate())?;
        let spec = self.stft.magnitude(&padded)?;
        let desc = frame_descriptors(&spec);
        let c = self.mfcc.compute(&spec)?;
        let r = self.mfcc.config().delta_r;
        let d = delta(&c, r)?;
        let dd = delta(&d, r)?;

        let mut values = Vec::with_capacity(SVM_FEATURE_LEN);
        for series in [&desc.spectral_centroid, &desc.rolloff_25, &desc.rolloff_75, &desc.rms] {
            values.extend(summarize(series.iter().copied()));
        }
        for m in [&c, &d, &dd] {
            for col in m.columns() {
                values.extend(summarize(col.iter().copied()));
            }
        }
        debug_assert_eq!(values.len(), SVM_FEATURE_LEN);
        Ok(SvmFeatureVector { values })
    }

    pub fn compute(&self, buffer: &AudioBuffer, segments: &[CoughSegment]) -> Result<SvmFeatureVector> {
        if buffer.sample_rate() != CANONICAL_RATE {
            return Err(Error::InvalidArgument(format!(
                "SVM features expect {CANONICAL_RATE} Hz audio"
            )));
        }
        self.from_audio(&cough_only_audio(buffer, segments)?)
    }
}

pub fn svm_feature_vector(buffer: &AudioBuffer, segments: &[CoughSegment]) -> Result<SvmFeatureVector> {
    SvmFeaturizer::new()?.compute(buffer, segments)
}

/// Per-dimension training mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const MIN_FEATURE_STD: f64 = 1e-12;

impl FeatureStats {
    pub fn fit(vectors: &[Vec<f64>]) -> Result<Self> {
        let first = vectors.first().ok_or(Error::Empty("training feature set"))?;
        let d = first.len();
        if vectors.iter().any(|v| v.len() != d) {
            return Err(Error::Shape("feature vectors differ in length".into()));
        }
        let n = vectors.len() as f64;
        let mut mean = vec![0.0; d];
        for v in vectors {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = vec![0.0; d];
        for v in vectors {
            for ((s, x), m) in std.iter_mut().zip(v).zip(&mean) {
                *s += (x - m).powi(2);
            }
        }
        std.iter_mut().for_each(|s| *s = (*s / n).sqrt());
        Ok(Self { mean, std })
    }

    /// z-score; dimensions with std below 1e-12 map to 0.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.mean.len() {
            return Err(Error::Shape(format!(
                "vector of length {} against stats of length {}",
                v.len(),
                self.mean.len()
            )));
        }
        Ok(v.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| if *s < MIN_FEATURE_STD { 0.0 } else { (x - m) / s })
            .collect())
    }
}

/// Normalize with `stats`, or fit them on `vectors` when absent.
pub fn normalize_features(
    vectors: &[Vec<f64>],
    stats: Option<&FeatureStats>,
) -> Result<(Vec<Vec<f64>>, FeatureStats)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => FeatureStats::fit(vectors)?,
    };
    let out = vectors.iter().map(|v| stats.apply(v)).collect::<Result<_>>()?;
    Ok((out, stats))
}

pub const SONOGRAPH_SAMPLES: usize = 65_536;
pub const SONOGRAPH_MFCC: usize = 64;
pub const SONOGRAPH_FRAMES: usize = 256;

/// 64 × 256 MFCC image, row-major with coefficients as rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sonograph {
    pub values: Vec<f32>,
    pub id: String,
    pub copy_index: u32,
}

impl Sonograph {
    pub fn shape(&self) -> (usize, usize) {
        (SONOGRAPH_MFCC, SONOGRAPH_FRAMES)
    }

    pub fn at(&self, coeff: usize, frame: usize) -> f32 {
        self.values[coeff * SONOGRAPH_FRAMES + frame]
    }
}

pub struct SonographBuilder {
    stft: Stft,
    mfcc: Mfcc,
}

impl SonographBuilder {
    pub fn new() -> Result<Self> {
        let stft = StftConfig::sonograph();
        Ok(Self {
            mfcc: Mfcc::new(MfccConfig::sonograph(), &stft)?,
            stft: Stft::new(stft)?,
        })
    }

    /// Sonograph of audio that is already condensed: pad or cut to 65,536
    /// samples, optionally augment, then frames at every 256th sample with
    /// zeros beyond the end.
    pub fn from_audio(&self, samples: &[f64], augment: Option<(&AugmentSpec, &mut Rng)>) -> Result<Array2<f64>> {
        let mut x = samples.to_vec();
        x.resize(SONOGRAPH_SAMPLES, 0.0);
        if let Some((spec, rng)) = augment {
            x = augment_audio(&x, spec, rng);
        }
        let spec = self.stft.magnitude_frames(&x, SONOGRAPH_FRAMES);
        Ok(self.mfcc.compute(&spec)?.reversed_axes())
    }

    pub fn build(
        &self,
        buffer: &AudioBuffer,
        segments: &[CoughSegment],
        augment: Option<(&AugmentSpec, &mut Rng)>,
    ) -> Result<Array2<f64>> {
        if buffer.sample_rate() != CANONICAL_RATE {
            return Err(Error::InvalidArgument(format!(
                "sonographs expect {CANONICAL_RATE} Hz audio"
            )));
        }
        let audio = cough_only_audio(buffer, segments)?;
        self.from_audio(audio.samples(), augment)
    }
}

pub fn build_sonograph(
    buffer: &AudioBuffer,
    segments: &[CoughSegment],
    augment: Option<(&AugmentSpec, &mut Rng)>,
    id: &str,
    copy_index: u32,
) -> Result<Sonograph> {
    let m = SonographBuilder::new()?.build(buffer, segments, augment)?;
    Ok(Sonograph {
        values: m.iter().map(|&v| v as f32).collect(),
        id: id.to_string(),
        copy_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;
    use std::f64::consts::PI;

    fn whole(n: usize) -> Vec<CoughSegment> {
        vec![CoughSegment::new(0, n).unwrap()]
    }

    fn noise(n: usize, seed: u64) -> AudioBuffer {
        let mut r = rng::seeded(seed, &[]);
        AudioBuffer::new((0..n).map(|_| r.random_range(-0.5..0.5)).collect(), 16000).unwrap()
    }

    #[test]
    fn cough_only_cases() {
        let x = noise(4000, 1);
        assert_eq!(cough_only_audio(&x, &whole(4000)).unwrap(), x);
        let segs = [CoughSegment::new(0, 1600).unwrap(), CoughSegment::new(2000, 3600).unwrap()];
        assert_eq!(cough_only_audio(&x, &segs).unwrap().len(), 3200);
        let reversed = [segs[1], segs[0]];
        assert!(cough_only_audio(&x, &reversed).is_err());
        assert!(matches!(cough_only_audio(&x, &[]), Err(Error::NoSegments)));
    }

    #[test]
    fn svm_vector_length_and_names() {
        let x = noise(8000, 2);
        let v = svm_feature_vector(&x, &whole(8000)).unwrap();
        assert_eq!(v.values.len(), 172);
        assert!(v.values.iter().all(|x| x.is_finite()));
        assert_eq!(svm_feature_names().len(), 172);
        assert_eq!(svm_feature_names()[4 * 4 + 1], "mfcc_0.std");
    }

    #[test]
    fn constant_input_has_zero_std() {
        let period: Vec<f64> = (0..160)
            .map(|i| 0.3 * (2.0 * PI * i as f64 / 160.0).cos())
            .collect();
        // One period per hop, so every frame sees identical samples.
        let x: Vec<f64> = (0..8000).map(|i| period[i % 160]).collect();
        let v = svm_feature_vector(&AudioBuffer::new(x, 16000).unwrap(), &whole(8000)).unwrap();
        for ch in v.values.chunks_exact(4) {
            assert_eq!(ch[1], 0.0);
            assert_eq!(ch[0], ch[2]);
            assert_eq!(ch[2], ch[3]);
        }
    }

    #[test]
    fn svm_vector_is_deterministic() {
        let x = noise(6000, 3);
        assert_eq!(
            svm_feature_vector(&x, &whole(6000)).unwrap(),
            svm_feature_vector(&x.clone(), &whole(6000)).unwrap()
        );
    }

    #[test]
    fn normalization() {
        let mut r = rng::seeded(4, &[]);
        let v: Vec<Vec<f64>> = (0..50)
            .map(|_| vec![r.random_range(0.0..10.0), 3.0, r.random_range(-1.0..1.0)])
            .collect();
        let (z, stats) = normalize_features(&v, None).unwrap();
        for d in [0, 2] {
            let m = z.iter().map(|x| x[d]).sum::<f64>() / 50.0;
            let s = (z.iter().map(|x| (x[d] - m).powi(2)).sum::<f64>() / 50.0).sqrt();
            assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-6);
        }
        assert!(z.iter().all(|x| x[1] == 0.0));
        let centre = stats.apply(&stats.mean).unwrap();
        assert!(centre.iter().all(|&c| c == 0.0));
        assert!(normalize_features(&[], None).is_err());
    }

    #[test]
    fn sonograph_shape_and_padding() {
        let x = noise(16000, 5);
        let s = build_sonograph(&x, &whole(16000), None, "a", 0).unwrap();
        assert_eq!(s.values.len(), 64 * 256);
        assert!(s.values.iter().all(|v| v.is_finite()));
        // Frame 63 starts at sample 16128, past the audio.
        for f in 64..256 {
            for c in 0..64 {
                assert_eq!(s.at(c, f), s.at(c, 63));
            }
        }
        assert_ne!(s.at(0, 62), s.at(0, 63));
        let long = noise(160000, 6);
        let a = build_sonograph(&long, &whole(160000), None, "b", 0).unwrap();
        let cut = AudioBuffer::new(long.samples()[..SONOGRAPH_SAMPLES].to_vec(), 16000).unwrap();
        let b = build_sonograph(&cut, &whole(SONOGRAPH_SAMPLES), None, "b", 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(build_sonograph(&x, &whole(16000), None, "a", 0).unwrap(), s);
    }
}
