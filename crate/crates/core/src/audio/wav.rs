use std::io::Cursor;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::AudioBuffer;
use crate::error::{Error, Result};

fn map_hound(err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::TruncatedAudio(e.to_string())
        }
        hound::Error::IoError(e) => Error::TruncatedAudio(e.to_string()),
        hound::Error::Unsupported => Error::UnsupportedAudio("unsupported WAV encoding".into()),
        hound::Error::FormatError(msg) => Error::UnsupportedAudio(msg.to_string()),
        other => Error::UnsupportedAudio(other.to_string()),
    }
}

/// Decode a RIFF/WAVE byte stream into one buffer per channel.
///
/// Integer PCM is scaled by the type's maximum magnitude (`2^(bits-1)`), so
/// 16-bit `-32768` maps to exactly `-1.0`. IEEE float data is passed through.
pub fn decode_wav(bytes: &[u8]) -> Result<Vec<AudioBuffer>> {
    let reader = WavReader::new(Cursor::new(bytes)).map_err(map_hound)?;
    let spec = reader.spec();
    let n_channels = usize::from(spec.channels);
    if n_channels == 0 {
        return Err(Error::UnsupportedAudio("zero channels".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = 1.0 / f64::from(1u32 << (bits - 1));
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| f64::from(v) * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(map_hound)?
        }
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (fmt, bits) => {
            return Err(Error::UnsupportedAudio(format!(
                "{bits}-bit {fmt:?} samples"
            )))
        }
    };
    if interleaved.is_empty() {
        return Err(Error::EmptyStream);
    }
    if !interleaved.len().is_multiple_of(n_channels) {
        return Err(Error::TruncatedAudio(format!(
            "{} samples do not divide into {n_channels} channels",
            interleaved.len()
        )));
    }
    let frames = interleaved.len() / n_channels;
    (0..n_channels)
        .map(|c| {
            let ch: Vec<f64> = (0..frames).map(|f| interleaved[f * n_channels + c]).collect();
            AudioBuffer::new(ch, spec.sample_rate)
        })
        .collect()
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Vec<AudioBuffer>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes)
}

/// Encode a mono buffer as 16-bit PCM. Samples are clamped to `[-1, 1]` and
/// rounded to the nearest integer level.
pub fn encode_wav_pcm16(buffer: &AudioBuffer) -> Result<Vec<u8>> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: buffer.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut out = Cursor::new(Vec::with_capacity(44 + 2 * buffer.len()));
    {
        let mut writer = WavWriter::new(&mut out, spec).map_err(map_hound)?;
        for &s in buffer.samples() {
            let level = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0);
            writer.write_sample(level as i16).map_err(map_hound)?;
        }
        writer.finalize().map_err(map_hound)?;
    }
    Ok(out.into_inner())
}

pub fn write_wav(path: impl AsRef<Path>, buffer: &AudioBuffer) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_wav_pcm16(buffer)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
