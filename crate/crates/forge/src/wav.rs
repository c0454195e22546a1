//! 16-bit PCM mono WAV IO.

use std::path::Path;

use ser_forge_core::fbank::{Waveform, SAMPLE_RATE};

use crate::error::{ForgeError, Result};

const FULL_SCALE: f32 = 32768.0;

fn wav_err(path: &Path, message: impl Into<String>) -> ForgeError {
    ForgeError::Wav {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Reads a 16 kHz mono 16-bit PCM file, scaling samples by 1/32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => ForgeError::io(path, io),
        other => wav_err(path, other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(wav_err(path, format!("channels={}", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(wav_err(path, format!("sample_rate={}", spec.sample_rate)));
    }
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(wav_err(path, "sample_format=float"));
    }
    if spec.bits_per_sample != 16 {
        return Err(wav_err(path, format!("bits_per_sample={}", spec.bits_per_sample)));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / FULL_SCALE))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| wav_err(path, e.to_string()))?;
    Waveform::new(samples, spec.sample_rate).map_err(|e| wav_err(path, e.to_string()))
}

/// Writes `samples` (clipped to [-1, 1)) as 16 kHz mono 16-bit PCM.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f32]) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let fail = |e: hound::Error| match e {
        hound::Error::IoError(io) => ForgeError::io(path, io),
        other => wav_err(path, other.to_string()),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(fail)?;
    for &s in samples {
        let v = (s * FULL_SCALE).round().clamp(i16::MIN as f32, i16::MAX as f32) as i16;
        w.write_sample(v).map_err(fail)?;
    }
    w.finalize().map_err(fail)
}
