//! Synthetic cough corpus. Positive clips carry band-limited noise bursts
//! centred near 600 Hz, negative clips near 1.8 kHz; both use a sharp
//! attack and exponential decay over a low broadband floor.

use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, AudioBuffer, CANONICAL_RATE};
use crate::dataset::{DatasetManifest, DatasetRecord, Label, Split};
use crate::error::{Error, Result};
use crate::quality::Biquad;
use crate::rng::{self, Rng};

pub const POSITIVE_CENTER_HZ: f64 = 600.0;
pub const NEGATIVE_CENTER_HZ: f64 = 1800.0;

pub fn white_noise(n: usize, rms: f64, rng: &mut Rng) -> Vec<f64> {
    (0..n)
        .map(|_| rms * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Gaussian noise through two cascaded band-pass sections, scaled to unit
/// RMS.
pub fn band_noise(n: usize, rate: u32, center_hz: f64, q: f64, rng: &mut Rng) -> Vec<f64> {
    let mut x = white_noise(n + 2048, 1.0, rng);
    let bp = Biquad::bandpass(center_hz, q, f64::from(rate));
    bp.apply(&mut x);
    bp.apply(&mut x);
    let x = x.split_off(2048);
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        x.into_iter().map(|v| v / rms).collect()
    } else {
        x
    }
}

/// Flat-topped noise bursts (800 Hz band) over a white floor. Burst
/// intervals are in seconds.
pub fn bursts_over_floor(
    rate: u32,
    secs: f64,
    floor_rms: f64,
    burst_rms: f64,
    bursts: &[(f64, f64)],
    seed: u64,
) -> AudioBuffer {
    let n = (secs * f64::from(rate)).round() as usize;
    let mut r = rng::seeded(seed, &[0x5b]);
    let mut x = white_noise(n, floor_rms, &mut r);
    for &(a, b) in bursts {
        let s = ((a * f64::from(rate)).round() as usize).min(n);
        let e = ((b * f64::from(rate)).round() as usize).min(n);
        let burst = band_noise(e - s, rate, 800.0, 1.0, &mut r);
        for (v, w) in x[s..e].iter_mut().zip(burst) {
            *v += burst_rms * w;
        }
    }
    AudioBuffer::new(x, rate).expect("finite synthetic samples")
}

/// Parameters of one synthetic clip.
#[derive(Debug, Clone, PartialEq)]
pub struct CoughClipSpec {
    pub center_hz: f64,
    pub duration_secs: f64,
    /// Onset times in seconds.
    pub onsets: Vec<f64>,
    pub decay_secs: f64,
    pub peak: f64,
    pub floor_rms: f64,
}

impl CoughClipSpec {
    /// Draw a clip description for the given class.
    pub fn random(positive: bool, rng: &mut Rng) -> Self {
        let base = if positive {
            POSITIVE_CENTER_HZ
        } else {
            NEGATIVE_CENTER_HZ
        };
        let n_coughs = rng.random_range(1..=3usize);
        let mut onsets = Vec::with_capacity(n_coughs);
        let mut t = rng.random_range(0.2..0.4);
        for _ in 0..n_coughs {
            onsets.push(t);
            t += rng.random_range(0.45..0.7);
        }
        Self {
            center_hz: base * rng.random_range(0.9..1.1),
            duration_secs: t + rng.random_range(0.2..0.4),
            onsets,
            decay_secs: rng.random_range(0.06..0.1),
            peak: rng.random_range(0.3..0.8),
            floor_rms: rng.random_range(0.002..0.005),
        }
    }

    pub fn render(&self, rate: u32, rng: &mut Rng) -> AudioBuffer {
        let fs = f64::from(rate);
        let n = (self.duration_secs * fs).round() as usize;
        let mut x = vec![0.0; n];
        let attack = 0.01;
        let event_len = ((attack + 6.0 * self.decay_secs) * fs) as usize;
        for &onset in &self.onsets {
            let s = (onset * fs).round() as usize;
            let len = event_len.min(n.saturating_sub(s));
            let tone = band_noise(len, rate, self.center_hz, 3.0, rng);
            for (i, w) in tone.into_iter().enumerate() {
                let t = i as f64 / fs;
                let env = if t < attack {
                    t / attack
                } else {
                    (-(t - attack) / self.decay_secs).exp()
                };
                x[s + i] += env * w;
            }
        }
        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let gain = if peak > 0.0 { self.peak / peak } else { 0.0 };
        let floor = white_noise(n, self.floor_rms, rng);
        let x = x
            .into_iter()
            .zip(floor)
            .map(|(v, f)| (v * gain + f).clamp(-1.0, 1.0))
            .collect();
        AudioBuffer::new(x, rate).expect("finite synthetic samples")
    }
}

/// Deterministic clip for `(seed, class, index)` at 16 kHz.
pub fn synth_cough(positive: bool, index: u64, seed: u64) -> AudioBuffer {
    let mut r = rng::seeded(seed, &[0xc0, u64::from(positive), index]);
    CoughClipSpec::random(positive, &mut r).render(CANONICAL_RATE, &mut r)
}

/// A loud cough driven hard into ±1 so that most of the clip is flat.
pub fn clipped_burst(seed: u64) -> AudioBuffer {
    let mut r = rng::seeded(seed, &[0xc1]);
    let rate = CANONICAL_RATE;
    let n = 2 * rate as usize;
    let (s, e) = (rate as usize / 2, 3 * rate as usize / 2);
    let mut x = white_noise(n, 0.003, &mut r);
    let burst = band_noise(e - s, rate, POSITIVE_CENTER_HZ, 3.0, &mut r);
    for (v, w) in x[s..e].iter_mut().zip(burst) {
        *v = (*v + 20.0 * w).clamp(-1.0, 1.0);
    }
    AudioBuffer::new(x, rate).expect("finite synthetic samples")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Labeled clips per class, across all splits.
    pub n_per_class: usize,
    pub validation_per_class: usize,
    pub test_per_class: usize,
    pub unlabeled: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_per_class: 100,
            validation_per_class: 20,
            test_per_class: 0,
            unlabeled: 0,
            seed: 0,
        }
    }
}

/// One generated clip with its manifest record (path relative to the
/// corpus directory).
pub struct SynthClip {
    pub record: DatasetRecord,
    pub audio: AudioBuffer,
}

/// Generate the corpus in memory. The first `validation_per_class` clips of
/// each class go to validation, the next `test_per_class` to test, the rest
/// to train; unlabeled clips alternate classes and sit in train.
pub fn synth_clips(cfg: &SynthConfig) -> Result<Vec<SynthClip>> {
    if cfg.validation_per_class + cfg.test_per_class > cfg.n_per_class {
        return Err(Error::InvalidArgument(
            "validation and test counts exceed clips per class".into(),
        ));
    }
    let mut clips = Vec::with_capacity(2 * cfg.n_per_class + cfg.unlabeled);
    for i in 0..cfg.n_per_class {
        let split = if i < cfg.validation_per_class {
            Split::Validation
        } else if i < cfg.validation_per_class + cfg.test_per_class {
            Split::Test
        } else {
            Split::Train
        };
        for (positive, label, tag) in [(true, Label::Positive, "pos"), (false, Label::Negative, "neg")] {
            let id = format!("{tag}-{i:05}");
            clips.push(SynthClip {
                record: DatasetRecord::new(&id, format!("audio/{id}.wav"), label, split, "synthetic"),
                audio: synth_cough(positive, i as u64, cfg.seed),
            });
        }
    }
    for i in 0..cfg.unlabeled {
        let id = format!("unl-{i:05}");
        clips.push(SynthClip {
            record: DatasetRecord::new(&id, format!("audio/{id}.wav"), Label::Unlabeled, Split::Train, "synthetic"),
            audio: synth_cough(i % 2 == 0, (1 << 32) + i as u64, cfg.seed),
        });
    }
    Ok(clips)
}

/// Write the corpus as 16-bit WAV files plus `manifest.csv` under `out_dir`.
pub fn synth_corpus(out_dir: &Path, cfg: &SynthConfig) -> Result<DatasetManifest> {
    let clips = synth_clips(cfg)?;
    let audio_dir = out_dir.join("audio");
    std::fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    let mut records = Vec::with_capacity(clips.len());
    for clip in clips {
        write_wav(out_dir.join(&clip.record.audio_path), &clip.audio)?;
        records.push(clip.record);
    }
    let manifest = DatasetManifest::from_records(records)?;
    manifest.write(out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
