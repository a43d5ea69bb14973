use std::f64::consts::{LN_10, PI, SQRT_2};

use super::{MelConfig, MelExtractor, MelSpectrogram, PitchConfig, Waveform};
use crate::error::{Error, Result};

/// `10 √2 / ln 10`, converting cepstral distance to decibels.
pub const MCD_SCALE: f64 = 10.0 * SQRT_2 / LN_10;

/// The three objective metrics for one reference/hypothesis pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub ls_mse: f64,
    pub mcd: f64,
    pub ffe: f64,
}

/// Settings for LS-MSE, MCD and FFE.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricConfig {
    pub mel: MelConfig,
    pub pitch: PitchConfig,
    pub n_mfcc: usize,
}

impl MetricConfig {
    /// Scoring framing derived from a conditioning mel config (half the hop).
    pub fn for_conditioning(mel: &MelConfig) -> Self {
        Self {
            mel: mel.metric_variant(),
            pitch: PitchConfig::default(),
            n_mfcc: 13,
        }
    }

    fn log_mels(
        &self,
        reference: &Waveform,
        hypothesis: &Waveform,
    ) -> Result<(MelSpectrogram, MelSpectrogram)> {
        let (r, h) = align_pair(reference, hypothesis, self.mel.hop_length)?;
        let ex = MelExtractor::new(&self.mel)?;
        Ok((ex.compute(&r)?, ex.compute(&h)?))
    }

    /// Mean squared difference of log-mel matrices.
    pub fn ls_mse(&self, reference: &Waveform, hypothesis: &Waveform) -> Result<f64> {
        let (r, h) = self.log_mels(reference, hypothesis)?;
        let n = r.values().len() as f64;
        Ok(r.values()
            .iter()
            .zip(h.values())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / n)
    }

    fn cepstral_distance(
        &self,
        reference: &Waveform,
        hypothesis: &Waveform,
        skip: usize,
    ) -> Result<f64> {
        let (r, h) = self.log_mels(reference, hypothesis)?;
        let (cr, ch) = (mfcc(&r, self.n_mfcc), mfcc(&h, self.n_mfcc));
        let total: f64 = cr
            .iter()
            .zip(&ch)
            .map(|(a, b)| {
                a[skip..]
                    .iter()
                    .zip(&b[skip..])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum();
        Ok(MCD_SCALE * total / cr.len() as f64)
    }

    /// Frame-averaged cepstral distance over `n_mfcc` coefficients including c0.
    pub fn mcd(&self, reference: &Waveform, hypothesis: &Waveform) -> Result<f64> {
        self.cepstral_distance(reference, hypothesis, 0)
    }

    /// As [`MetricConfig::mcd`] without c0, hence insensitive to overall gain.
    pub fn mcd_excluding_c0(&self, reference: &Waveform, hypothesis: &Waveform) -> Result<f64> {
        self.cepstral_distance(reference, hypothesis, 1)
    }

    pub fn evaluate(&self, reference: &Waveform, hypothesis: &Waveform) -> Result<Scores> {
        Ok(Scores {
            ls_mse: self.ls_mse(reference, hypothesis)?,
            mcd: self.mcd(reference, hypothesis)?,
            ffe: self.ffe(reference, hypothesis)?,
        })
    }

    /// F0 frame error with `reference` supplying ground-truth voicing.
    pub fn ffe(&self, reference: &Waveform, hypothesis: &Waveform) -> Result<f64> {
        let (r, h) = align_pair(reference, hypothesis, self.mel.hop_length)?;
        let tr = self.pitch.track(&r)?;
        let th = self.pitch.track(&h)?;
        Ok(self.pitch.frame_error(&tr, &th))
    }
}

/// Checks rates and trims the longer signal; differences beyond `tolerance`
/// samples are rejected.
pub fn align_pair(
    reference: &Waveform,
    hypothesis: &Waveform,
    tolerance: usize,
) -> Result<(Waveform, Waveform)> {
    if reference.sample_rate() != hypothesis.sample_rate() {
        return Err(Error::invalid(format!(
            "sample rates differ: {} vs {} Hz",
            reference.sample_rate(),
            hypothesis.sample_rate()
        )));
    }
    if reference.len().abs_diff(hypothesis.len()) > tolerance {
        return Err(Error::LengthMismatch {
            context: "metric inputs",
            expected: reference.len(),
            got: hypothesis.len(),
        });
    }
    let n = reference.len().min(hypothesis.len());
    Ok((reference.slice(0, n)?, hypothesis.slice(0, n)?))
}

/// Orthonormal DCT-II of `x`, first `n_out` coefficients.
pub fn dct_ii_orthonormal(x: &[f64], n_out: usize) -> Vec<f64> {
    let m = x.len() as f64;
    (0..n_out)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (PI * k as f64 * (i as f64 + 0.5) / m).cos())
                .sum();
            let norm = if k == 0 {
                (1.0 / m).sqrt()
            } else {
                (2.0 / m).sqrt()
            };
            norm * s
        })
        .collect()
}

/// Per-frame cepstra of a log-mel matrix.
pub fn mfcc(mel: &MelSpectrogram, n: usize) -> Vec<Vec<f64>> {
    (0..mel.frames())
        .map(|t| {
            let col: Vec<f64> = (0..mel.n_mels()).map(|b| mel.get(b, t)).collect();
            dct_ii_orthonormal(&col, n.min(mel.n_mels()))
        })
        .collect()
}
