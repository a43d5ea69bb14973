use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};

const SCALE: f64 = 32768.0;

/// Reads a 16-bit PCM mono RIFF/WAVE file into `[-1, 1)`.
pub fn wav_read(path: &Path) -> Result<Waveform> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader =
        hound::WavReader::new(std::io::BufReader::new(file)).map_err(|e| parse_error(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Wav(format!(
            "{}: unsupported encoding {:?} {}-bit (only 16-bit PCM is read)",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    if spec.channels != 1 {
        return Err(Error::Wav(format!(
            "{}: {} channels (only mono is read)",
            path.display(),
            spec.channels
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| parse_error(path, e))?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes 16-bit PCM mono, clipping to the representable range.
pub fn wav_write(path: &Path, y: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: y.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &v in y.samples() {
        let q = (v * SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        w.write_sample(q).map_err(|e| wav_error(path, e))?;
    }
    w.finalize().map_err(|e| wav_error(path, e))
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(format!("{}: {other}", path.display())),
    }
}

/// Read failures after the file is open are malformed or truncated content.
fn parse_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => {
            Error::Wav(format!("{}: truncated or malformed ({io})", path.display()))
        }
        other => Error::Wav(format!("{}: {other}", path.display())),
    }
}
