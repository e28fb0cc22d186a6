//! Quality gate: volume, clipping, cough segmentation, cough detection and
//! background-noise checks, plus the threshold verdict.
//!
//! Check order follows the preprocessing pipeline: volume and clipping run
//! on the 16 kHz buffer, segmentation on a 44.1 kHz copy, and detection and
//! background measurement reuse the segments (expressed on the 16 kHz
//! timeline).

mod filters;

pub use filters::{butterworth4_highpass, butterworth4_lowpass, Biquad};

use serde::{Deserialize, Serialize};

use crate::audio::{resample, AudioBuffer, CANONICAL_RATE, SEGMENTATION_RATE};
use crate::error::{Error, Result};

/// Rate of the envelope follower inside the segmenter.
pub const ENVELOPE_RATE: u32 = 4_410;

/// Half-open sample range `[start, end)` on the 16 kHz timeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoughSegment {
    pub start: usize,
    pub end: usize,
}

impl CoughSegment {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start >= end {
            return Err(Error::InvalidArgument(format!(
                "segment start {start} must precede end {end}"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn seconds(&self) -> (f64, f64) {
        let r = f64::from(CANONICAL_RATE);
        (self.start as f64 / r, self.end as f64 / r)
    }
}

/// Sorted, non-overlapping, non-empty and within `len`.
pub fn validate_segments(segments: &[CoughSegment], len: usize) -> Result<()> {
    for (i, s) in segments.iter().enumerate() {
        if s.is_empty() || s.end > len {
            return Err(Error::InvalidArgument(format!(
                "segment {i} [{}, {}) outside buffer of {len} samples",
                s.start, s.end
            )));
        }
        if i > 0 && segments[i - 1].end > s.start {
            return Err(Error::InvalidArgument(format!(
                "segment {i} overlaps or precedes segment {}",
                i - 1
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateThresholds {
    pub min_max_amplitude: f64,
    pub max_clipping_ratio: f64,
    pub min_cough_probability: f64,
    pub min_background_power_ratio: f64,
}

impl Default for GateThresholds {
    fn default() -> Self {
        Self {
            min_max_amplitude: 0.01,
            max_clipping_ratio: 0.30,
            min_cough_probability: 0.5,
            min_background_power_ratio: 3.16,
        }
    }
}

impl GateThresholds {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("min_max_amplitude", self.min_max_amplitude)?;
        unit("max_clipping_ratio", self.max_clipping_ratio)?;
        unit("min_cough_probability", self.min_cough_probability)?;
        if !(self.min_background_power_ratio >= 0.0) {
            return Err(Error::InvalidArgument(
                "min_background_power_ratio must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Envelope segmentation parameters. Defaults: 100 Hz high-pass and 2 kHz
/// low-pass (4th-order Butterworth), 50 ms RMS window with 10 ms hop at
/// 4.41 kHz, hysteresis at 25% / 10% of the floor-to-peak range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterConfig {
    pub highpass_hz: f64,
    pub lowpass_hz: f64,
    pub window_secs: f64,
    pub hop_secs: f64,
    pub floor_percentile: f64,
    pub on_fraction: f64,
    pub off_fraction: f64,
    pub merge_gap_secs: f64,
    pub min_segment_secs: f64,
    /// Envelopes whose peak is below this multiple of the floor carry no
    /// bursts (stationary noise or silence).
    pub min_peak_to_floor: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            highpass_hz: 100.0,
            lowpass_hz: 2000.0,
            window_secs: 0.05,
            hop_secs: 0.01,
            floor_percentile: 0.10,
            on_fraction: 0.25,
            off_fraction: 0.10,
            merge_gap_secs: 0.05,
            min_segment_secs: 0.10,
            min_peak_to_floor: 2.0,
        }
    }
}

/// Largest absolute sample value.
pub fn measure_volume(buffer: &AudioBuffer) -> Result<f64> {
    if buffer.is_empty() {
        return Err(Error::Empty("audio buffer"));
    }
    Ok(buffer.samples().iter().fold(0.0f64, |m, s| m.max(s.abs())))
}

pub const CLIP_LEVEL_FRACTION: f64 = 0.99;
pub const CLIP_FLAT_TOLERANCE: f64 = 1e-4;
pub const CLIP_MIN_RUN: usize = 3;

/// Fraction of samples inside flat peak runs: at least three consecutive
/// samples at or above 99% of the buffer's maximum magnitude whose
/// successive values differ by no more than 1e-4.
pub fn measure_clipping(buffer: &AudioBuffer) -> Result<f64> {
    let peak = measure_volume(buffer)?;
    if peak == 0.0 {
        return Ok(0.0);
    }
    let level = CLIP_LEVEL_FRACTION * peak;
    let x = buffer.samples();
    let mut clipped = 0usize;
    let mut run = 0usize;
    for i in 0..x.len() {
        let hot = x[i].abs() >= level;
        let continues = hot && run > 0 && (x[i] - x[i - 1]).abs() <= CLIP_FLAT_TOLERANCE;
        if continues {
            run += 1;
        } else {
            if run >= CLIP_MIN_RUN {
                clipped += run;
            }
            run = usize::from(hot);
        }
    }
    if run >= CLIP_MIN_RUN {
        clipped += run;
    }
    Ok(clipped as f64 / x.len() as f64)
}

/// RMS envelope of `x` with the given window and hop, one value per frame.
fn rms_envelope(x: &[f64], win: usize, hop: usize) -> Vec<f64> {
    let mut prefix = Vec::with_capacity(x.len() + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for v in x {
        acc += v * v;
        prefix.push(acc);
    }
    if x.len() < win {
        return vec![(acc / x.len().max(1) as f64).sqrt()];
    }
    let frames = 1 + (x.len() - win) / hop;
    (0..frames)
        .map(|i| {
            let s = i * hop;
            ((prefix[s + win] - prefix[s]).max(0.0) / win as f64).sqrt()
        })
        .collect()
}

fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let idx = ((q * (sorted.len() - 1) as f64).round() as usize).min(sorted.len() - 1);
    sorted[idx]
}

/// Locate cough regions in a 44.1 kHz buffer.
///
/// The signal is band-limited, resampled to 4.41 kHz and reduced to an RMS
/// envelope. Frames switch on above `floor + on·(peak − floor)` and off
/// below `floor + off·(peak − floor)`, where floor is the 10th percentile.
/// Region boundaries sit at the centres of the first and last active
/// frames. Regions closer than the merge gap are joined; shorter than the
/// minimum duration are dropped. Returned indices are on the 16 kHz
/// timeline.
pub fn segment_coughs(buffer: &AudioBuffer, config: &SegmenterConfig) -> Result<Vec<CoughSegment>> {
    if buffer.sample_rate() != SEGMENTATION_RATE {
        return Err(Error::InvalidArgument(format!(
            "segmentation expects {SEGMENTATION_RATE} Hz audio, got {} Hz",
            buffer.sample_rate()
        )));
    }
    let min_len = (config.window_secs * f64::from(SEGMENTATION_RATE)).ceil() as usize;
    if buffer.len() < min_len {
        return Err(Error::InvalidArgument(format!(
            "buffer of {} samples is shorter than one {} s window",
            buffer.len(),
            config.window_secs
        )));
    }

    let rate = f64::from(SEGMENTATION_RATE);
    let mut x = buffer.samples().to_vec();
    for f in butterworth4_highpass(config.highpass_hz, rate)
        .iter()
        .chain(&butterworth4_lowpass(config.lowpass_hz, rate))
    {
        f.apply(&mut x);
    }
    let low = resample(&AudioBuffer::new(x, SEGMENTATION_RATE)?, ENVELOPE_RATE)?;

    let env_rate = f64::from(ENVELOPE_RATE);
    let win = ((config.window_secs * env_rate) as usize).max(1);
    let hop = ((config.hop_secs * env_rate) as usize).max(1);
    let env = rms_envelope(low.samples(), win, hop);

    let peak = env.iter().cloned().fold(0.0, f64::max);
    let floor = percentile(&env, config.floor_percentile);
    if peak <= 1e-9 || peak < config.min_peak_to_floor * floor {
        return Ok(Vec::new());
    }
    let on = floor + config.on_fraction * (peak - floor);
    let off = floor + config.off_fraction * (peak - floor);

    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut active: Option<(usize, usize)> = None;
    for (i, &e) in env.iter().enumerate() {
        active = match active {
            None if e >= on => Some((i, i)),
            Some((first, _)) if e >= off => Some((first, i)),
            Some(run) => {
                runs.push(run);
                None
            }
            None => None,
        };
    }
    runs.extend(active);

    let centre = |i: usize| (i * hop) as f64 / env_rate + win as f64 / (2.0 * env_rate);
    let mut spans: Vec<(f64, f64)> = Vec::new();
    for (first, last) in runs {
        let (s, e) = (centre(first), centre(last));
        match spans.last_mut() {
            Some(prev) if s - prev.1 < config.merge_gap_secs => prev.1 = e,
            _ => spans.push((s, e)),
        }
    }

    let out_len = (buffer.len() as f64 * f64::from(CANONICAL_RATE) / rate).round() as usize;
    let to_index = |t: f64| ((t * f64::from(CANONICAL_RATE)).round() as usize).min(out_len);
    Ok(spans
        .into_iter()
        .filter(|(s, e)| e - s >= config.min_segment_secs)
        .map(|(s, e)| CoughSegment {
            start: to_index(s),
            end: to_index(e),
        })
        .filter(|s| !s.is_empty())
        .collect())
}

/// Cap applied to the background ratio when the non-cough regions are
/// exactly silent.
pub const DEFAULT_BACKGROUND_CAP: f64 = 1e6;
pub const BACKGROUND_FRAME_SECS: f64 = 0.025;
pub const MIN_BACKGROUND_REGION_SECS: f64 = 0.05;

fn max_frame_power(x: &[f64], frame: usize) -> f64 {
    if x.len() < frame {
        return x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64;
    }
    x.chunks_exact(frame)
        .map(|c| c.iter().map(|v| v * v).sum::<f64>() / frame as f64)
        .fold(0.0, f64::max)
}

/// Ratio of the strongest 25 ms frame inside the cough segments to the
/// strongest 25 ms frame outside them. A silent background yields `cap`.
pub fn measure_background(
    buffer: &AudioBuffer,
    segments: &[CoughSegment],
    cap: f64,
) -> Result<f64> {
    if buffer.sample_rate() != CANONICAL_RATE {
        return Err(Error::InvalidArgument(format!(
            "background measurement expects {CANONICAL_RATE} Hz audio"
        )));
    }
    if segments.is_empty() {
        return Err(Error::NoSegments);
    }
    validate_segments(segments, buffer.len())?;
    let rate = f64::from(CANONICAL_RATE);
    let frame = (BACKGROUND_FRAME_SECS * rate).round() as usize;
    let min_region = (MIN_BACKGROUND_REGION_SECS * rate).round() as usize;
    let x = buffer.samples();

    let inside = segments
        .iter()
        .map(|s| max_frame_power(&x[s.start..s.end], frame))
        .fold(0.0, f64::max);

    let mut gaps = Vec::new();
    let mut cursor = 0;
    for s in segments {
        if s.start > cursor {
            gaps.push((cursor, s.start));
        }
        cursor = s.end;
    }
    if cursor < x.len() {
        gaps.push((cursor, x.len()));
    }
    if !gaps.iter().any(|(a, b)| b - a >= min_region) {
        return Err(Error::InvalidArgument(
            "no non-cough region of at least 50 ms".into(),
        ));
    }
    let outside = gaps
        .iter()
        .filter(|(a, b)| b - a >= frame)
        .map(|&(a, b)| max_frame_power(&x[a..b], frame))
        .fold(0.0, f64::max);

    Ok(if outside > 0.0 {
        (inside / outside).min(cap)
    } else if inside > 0.0 {
        cap
    } else {
        1.0
    })
}

/// Pluggable cough detector producing a probability in `[0, 1]`.
pub trait CoughDetector: Send + Sync {
    fn probability(&self, buffer: &AudioBuffer, segments: &[CoughSegment]) -> f64;
}

/// Default detector: a logistic curve over the segment-to-background SNR,
/// `1 / (1 + exp(-(S - midpoint) / slope))` with `S` in dB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrCoughDetector {
    pub midpoint_db: f64,
    pub slope_db: f64,
    pub background_cap: f64,
}

impl Default for SnrCoughDetector {
    fn default() -> Self {
        Self {
            midpoint_db: 6.0,
            slope_db: 3.0,
            background_cap: DEFAULT_BACKGROUND_CAP,
        }
    }
}

impl SnrCoughDetector {
    pub fn probability_from_ratio(&self, ratio: f64) -> f64 {
        if !(ratio > 0.0) {
            return 0.0;
        }
        let snr_db = 10.0 * ratio.log10();
        1.0 / (1.0 + (-(snr_db - self.midpoint_db) / self.slope_db).exp())
    }
}

impl CoughDetector for SnrCoughDetector {
    fn probability(&self, buffer: &AudioBuffer, segments: &[CoughSegment]) -> f64 {
        if segments.is_empty() {
            return 0.0;
        }
        match measure_background(buffer, segments, self.background_cap) {
            Ok(ratio) => self.probability_from_ratio(ratio),
            Err(_) => 0.0,
        }
    }
}

pub fn detect_cough(buffer: &AudioBuffer, segments: &[CoughSegment]) -> f64 {
    SnrCoughDetector::default().probability(buffer, segments)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityCheck {
    Volume,
    Clipping,
    CoughDetection,
    Segmentation,
    BackgroundNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub max_amplitude: f64,
    pub clipping_ratio: f64,
    pub cough_probability: f64,
    pub segments: Vec<CoughSegment>,
    pub background_power_ratio: f64,
    pub failed_checks: Vec<QualityCheck>,
    /// Reasons for checks that could not be evaluated.
    pub notes: Vec<String>,
}

impl QualityReport {
    pub fn passed(&self) -> bool {
        self.failed_checks.is_empty()
    }

    /// One JSON object per file, with segment bounds in seconds.
    pub fn to_json(&self, id: &str) -> serde_json::Value {
        serde_json::json!({
            "id": id,
            "max_amplitude": self.max_amplitude,
            "clipping_ratio": self.clipping_ratio,
            "cough_probability": self.cough_probability,
            "background_power_ratio": self.background_power_ratio,
            "segments": self.segments.iter().map(|s| {
                let (a, b) = s.seconds();
                serde_json::json!({"start": a, "end": b})
            }).collect::<Vec<_>>(),
            "verdict": if self.passed() { "pass" } else { "fail" },
            "failed_checks": self.failed_checks,
            "notes": self.notes,
        })
    }
}

pub struct Screener {
    pub thresholds: GateThresholds,
    pub segmenter: SegmenterConfig,
    pub background_cap: f64,
    pub detector: Box<dyn CoughDetector>,
}

impl Default for Screener {
    fn default() -> Self {
        Self::new(GateThresholds::default())
    }
}

impl Screener {
    pub fn new(thresholds: GateThresholds) -> Self {
        Self {
            thresholds,
            segmenter: SegmenterConfig::default(),
            background_cap: DEFAULT_BACKGROUND_CAP,
            detector: Box::new(SnrCoughDetector::default()),
        }
    }

    pub fn with_detector(mut self, detector: Box<dyn CoughDetector>) -> Self {
        self.detector = detector;
        self
    }

    /// Run every check. Failures of individual checks become failed
    /// verdict entries with a note rather than errors. The background check
    /// only applies when segmentation found at least one cough.
    pub fn screen(&self, buffer: &AudioBuffer) -> QualityReport {
        let mut report = QualityReport {
            max_amplitude: 0.0,
            clipping_ratio: 0.0,
            cough_probability: 0.0,
            segments: Vec::new(),
            background_power_ratio: 0.0,
            failed_checks: Vec::new(),
            notes: Vec::new(),
        };
        let t = &self.thresholds;
        let fail = |r: &mut QualityReport, check: QualityCheck, note: Option<String>| {
            if !r.failed_checks.contains(&check) {
                r.failed_checks.push(check);
            }
            r.notes.extend(note);
        };

        let audio = match resample(buffer, CANONICAL_RATE) {
            Ok(a) if !a.is_empty() => a,
            Ok(_) => {
                for c in [QualityCheck::Volume, QualityCheck::Segmentation, QualityCheck::CoughDetection] {
                    fail(&mut report, c, None);
                }
                report.notes.push("empty audio buffer".into());
                return report;
            }
            Err(e) => {
                fail(&mut report, QualityCheck::Volume, Some(e.to_string()));
                return report;
            }
        };

        report.max_amplitude = measure_volume(&audio).unwrap_or(0.0);
        if report.max_amplitude < t.min_max_amplitude {
            fail(&mut report, QualityCheck::Volume, None);
        }

        report.clipping_ratio = measure_clipping(&audio).unwrap_or(0.0);
        if report.clipping_ratio > t.max_clipping_ratio {
            fail(&mut report, QualityCheck::Clipping, None);
        }

        let segmented = resample(buffer, SEGMENTATION_RATE)
            .and_then(|hi| segment_coughs(&hi, &self.segmenter));
        match segmented {
            Ok(segments) => report.segments = segments,
            Err(e) => fail(
                &mut report,
                QualityCheck::Segmentation,
                Some(format!("segmentation: {e}")),
            ),
        }

        report.cough_probability = self.detector.probability(&audio, &report.segments);
        if report.cough_probability < t.min_cough_probability {
            fail(&mut report, QualityCheck::CoughDetection, None);
        }

        if !report.segments.is_empty() {
            match measure_background(&audio, &report.segments, self.background_cap) {
                Ok(ratio) => {
                    report.background_power_ratio = ratio;
                    if ratio < t.min_background_power_ratio {
                        fail(&mut report, QualityCheck::BackgroundNoise, None);
                    }
                }
                Err(e) => fail(
                    &mut report,
                    QualityCheck::BackgroundNoise,
                    Some(format!("background: {e}")),
                ),
            }
        }
        report.failed_checks.sort();
        report
    }
}

/// Screen with the default detector and segmenter.
pub fn screen(buffer: &AudioBuffer, thresholds: &GateThresholds) -> QualityReport {
    Screener::new(*thresholds).screen(buffer)
}
