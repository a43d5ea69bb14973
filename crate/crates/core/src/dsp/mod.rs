//! Audio signals, log-mel features and objective quality metrics.

mod mel;
mod metrics;
mod pitch;
mod wav;

pub use mel::{hz_to_mel, mel_filterbank, mel_to_hz, MelConfig, MelExtractor, MelSpectrogram};
pub use metrics::{align_pair, dct_ii_orthonormal, mfcc, MetricConfig, Scores, MCD_SCALE};
pub use pitch::{PitchConfig, PitchTrack};
pub use wav::{wav_read, wav_write};

use crate::error::{check_finite, Error, Result};

/// A mono signal at a declared sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        check_finite(&samples, "waveform")?;
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<Waveform> {
        let end = start
            .checked_add(len)
            .filter(|&e| e <= self.samples.len())
            .ok_or_else(|| {
                Error::invalid(format!(
                    "slice {start}..{} outside waveform of {} samples",
                    start.saturating_add(len),
                    self.samples.len()
                ))
            })?;
        Ok(Waveform {
            samples: self.samples[start..end].to_vec(),
            sample_rate: self.sample_rate,
        })
    }
}
