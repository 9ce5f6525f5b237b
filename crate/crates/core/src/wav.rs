//! 16-bit mono PCM WAV input and output.

use std::path::Path;

use crate::error::{Result, SonarError};
use crate::signal::Signal;

const FULL_SCALE: f64 = 32768.0;

pub fn read_wav(path: &Path) -> Result<Signal> {
    let wav_err = |source| SonarError::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(SonarError::InvalidData(format!(
            "{}: expected mono 16-bit PCM, got {} channel(s) of {}-bit {:?}",
            path.display(),
            spec.channels,
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / FULL_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_err)?;
    Signal::new(samples, spec.sample_rate)
        .map_err(|e| SonarError::InvalidData(format!("{}: {e}", path.display())))
}

/// Quantises to 16-bit PCM, rounding to nearest and saturating at full scale.
pub fn write_wav(path: &Path, sig: &Signal) -> Result<()> {
    let wav_err = |source| SonarError::Wav {
        path: path.to_path_buf(),
        source,
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: sig.sample_rate_hz(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &v in sig.samples() {
        writer.write_sample(quantize(v)).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

pub fn quantize(v: f64) -> i16 {
    (v * FULL_SCALE)
        .round()
        .clamp(i16::MIN as f64, i16::MAX as f64) as i16
}
