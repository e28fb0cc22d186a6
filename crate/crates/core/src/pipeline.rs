//! Loading, screening and segmenting records ahead of the model trainers.

use std::path::Path;

use crate::audio::{downmix_mono, read_wav, resample, AudioBuffer, CANONICAL_RATE};
use crate::dataset::{resolve_audio_path, DatasetRecord};
use crate::error::{Error, Result};
use crate::quality::{CoughSegment, QualityReport, Screener};
use crate::synth::SynthClip;

/// 16 kHz audio with its cough segments and label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub id: String,
    /// `None` for unlabeled records.
    pub label: Option<bool>,
    pub audio: AudioBuffer,
    pub segments: Vec<CoughSegment>,
}

impl LabeledClip {
    pub fn positive(&self) -> Result<bool> {
        self.label
            .ok_or_else(|| Error::InvalidArgument(format!("record {:?} is unlabeled", self.id)))
    }
}

pub fn labels(clips: &[LabeledClip]) -> Result<Vec<bool>> {
    clips.iter().map(LabeledClip::positive).collect()
}

/// Screen a decoded buffer; `None` if it fails the gate.
pub fn screen_clip(
    id: &str,
    label: Option<bool>,
    buffer: &AudioBuffer,
    screener: &Screener,
) -> Result<(Option<LabeledClip>, QualityReport)> {
    let report = screener.screen(buffer);
    if !report.passed() {
        return Ok((None, report));
    }
    let audio = resample(buffer, CANONICAL_RATE)?;
    let clip = LabeledClip {
        id: id.to_string(),
        label,
        // The two resampling paths can disagree on length by a sample.
        segments: report
            .segments
            .iter()
            .map(|s| CoughSegment {
                start: s.start,
                end: s.end.min(audio.len()),
            })
            .filter(|s| !s.is_empty())
            .collect(),
        audio,
    };
    Ok((Some(clip), report))
}

/// Decode and screen one manifest record at its native rate.
pub fn load_record(
    manifest_path: &Path,
    record: &DatasetRecord,
    screener: &Screener,
) -> Result<(Option<LabeledClip>, QualityReport)> {
    let buffer = downmix_mono(&read_wav(resolve_audio_path(manifest_path, record))?)?;
    screen_clip(&record.id, record.label.as_binary(), &buffer, screener)
}

/// Clips for every record that passes the gate, in record order.
pub fn load_records(
    manifest_path: &Path,
    records: &[DatasetRecord],
    screener: &Screener,
) -> Result<Vec<LabeledClip>> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        match load_record(manifest_path, r, screener)? {
            (Some(c), _) => out.push(c),
            (None, rep) => log::info!("{}: excluded by quality gate {:?}", r.id, rep.failed_checks),
        }
    }
    Ok(out)
}

/// Same as [`load_records`] for in-memory synthetic clips.
pub fn screen_synth(clips: &[SynthClip], screener: &Screener) -> Result<Vec<LabeledClip>> {
    let mut out = Vec::with_capacity(clips.len());
    for c in clips {
        if let (Some(clip), _) = screen_clip(&c.record.id, c.record.label.as_binary(), &c.audio, screener)? {
            out.push(clip);
        }
    }
    Ok(out)
}
