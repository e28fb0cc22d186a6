use serde::{Deserialize, Serialize};

use super::stft::Spectrogram;

/// Per-frame spectral shape descriptors, frequencies in Hz.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameDescriptors {
    pub spectral_centroid: Vec<f64>,
    pub rolloff_25: Vec<f64>,
    pub rolloff_75: Vec<f64>,
    pub rms: Vec<f64>,
}

impl FrameDescriptors {
    pub fn len(&self) -> usize {
        self.rms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rms.is_empty()
    }
}

/// Frequency of the first bin whose cumulative magnitude reaches `q` of the
/// frame total.
fn rolloff(frame: &[f64], total: f64, q: f64, bin_hz: impl Fn(usize) -> f64) -> f64 {
    let target = q * total;
    let mut acc = 0.0;
    for (k, m) in frame.iter().enumerate() {
        acc += m;
        if acc >= target * (1.0 - 1e-12) {
            return bin_hz(k);
        }
    }
    bin_hz(frame.len() - 1)
}

/// Centroid, 25%/75% roll-off and RMS of each magnitude frame. All-zero
/// frames give zeros throughout.
pub fn frame_descriptors(spec: &Spectrogram) -> FrameDescriptors {
    let mut d = FrameDescriptors::default();
    let bin_hz = |k: usize| spec.config.bin_hz(k);
    let linear;
    let values = if spec.is_log {
        linear = spec
            .values
            .iter()
            .map(|v| (v.exp() - spec.config.log_floor).max(0.0))
            .collect::<Vec<_>>();
        &linear
    } else {
        &spec.values
    };
    for frame in values.chunks_exact(spec.n_bins.max(1)) {
        let total: f64 = frame.iter().sum();
        if total <= 0.0 {
            d.spectral_centroid.push(0.0);
            d.rolloff_25.push(0.0);
            d.rolloff_75.push(0.0);
            d.rms.push(0.0);
            continue;
        }
        let weighted: f64 = frame.iter().enumerate().map(|(k, m)| bin_hz(k) * m).sum();
        d.spectral_centroid.push(weighted / total);
        d.rolloff_25.push(rolloff(frame, total, 0.25, bin_hz));
        d.rolloff_75.push(rolloff(frame, total, 0.75, bin_hz));
        d.rms
            .push((frame.iter().map(|m| m * m).sum::<f64>() / frame.len() as f64).sqrt());
    }
    d
}
