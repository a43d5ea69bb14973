use super::Waveform;
use crate::error::{Error, Result};

/// Normalized-autocorrelation pitch tracker settings.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchConfig {
    pub frame_seconds: f64,
    pub hop_seconds: f64,
    pub fmin: f64,
    pub fmax: f64,
    /// Minimum peak normalized autocorrelation for a voiced frame.
    pub voicing_threshold: f64,
    /// Frames with RMS below this are unvoiced regardless of periodicity.
    pub energy_floor: f64,
    /// Relative deviation above which a voiced frame counts as a gross pitch error.
    pub gross_error: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self {
            frame_seconds: 0.025,
            hop_seconds: 0.00625,
            fmin: 50.0,
            fmax: 600.0,
            voicing_threshold: 0.3,
            energy_floor: 1e-3,
            gross_error: 0.2,
        }
    }
}

/// Per-frame F0 in Hz; `None` marks unvoiced frames.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchTrack {
    pub f0: Vec<Option<f64>>,
}

impl PitchTrack {
    pub fn voiced_fraction(&self) -> f64 {
        if self.f0.is_empty() {
            return 0.0;
        }
        self.f0.iter().filter(|f| f.is_some()).count() as f64 / self.f0.len() as f64
    }
}

impl PitchConfig {
    fn geometry(&self, sr: u32) -> Result<(usize, usize, usize, usize)> {
        let sr = sr as f64;
        let frame = (self.frame_seconds * sr).round() as usize;
        let hop = (self.hop_seconds * sr).round() as usize;
        let lag_min = (sr / self.fmax).floor().max(1.0) as usize;
        let lag_max = (sr / self.fmin).ceil() as usize;
        if frame < 2 || hop == 0 || lag_min >= lag_max {
            return Err(Error::invalid(format!(
                "pitch config does not fit {sr} Hz: frame {frame}, hop {hop}, lags {lag_min}..{lag_max}"
            )));
        }
        Ok((frame, hop, lag_min, lag_max))
    }

    /// Frames start at multiples of the hop; correlation looks ahead up to
    /// the longest lag, using whatever signal remains near the end.
    pub fn track(&self, y: &Waveform) -> Result<PitchTrack> {
        let (frame, hop, lag_min, lag_max) = self.geometry(y.sample_rate())?;
        let x = y.samples();
        if x.len() < frame {
            return Ok(PitchTrack { f0: Vec::new() });
        }
        let frames = 1 + (x.len() - frame) / hop;
        let f0 = (0..frames)
            .map(|t| self.frame_pitch(x, t * hop, frame, lag_min, lag_max, y.sample_rate() as f64))
            .collect();
        Ok(PitchTrack { f0 })
    }

    fn frame_pitch(
        &self,
        x: &[f64],
        start: usize,
        frame: usize,
        lag_min: usize,
        lag_max: usize,
        sr: f64,
    ) -> Option<f64> {
        let seg = &x[start..start + frame];
        let mean = seg.iter().sum::<f64>() / frame as f64;
        let rms = (seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / frame as f64).sqrt();
        if rms < self.energy_floor {
            return None;
        }
        let at = |i: usize| x.get(i).map_or(0.0, |v| v - mean);
        let corr: Vec<f64> = (lag_min - 1..=lag_max + 1)
            .map(|lag| {
                let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
                for i in start..start + frame {
                    let (a, b) = (at(i), at(i + lag));
                    xy += a * b;
                    xx += a * a;
                    yy += b * b;
                }
                if xx > 0.0 && yy > 0.0 {
                    xy / (xx * yy).sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        // corr[j] holds lag lag_min - 1 + j; peaks are searched strictly inside
        let peaks: Vec<usize> = (1..corr.len() - 1)
            .filter(|&j| corr[j] > corr[j - 1] && corr[j] >= corr[j + 1])
            .collect();
        let best = peaks
            .iter()
            .map(|&j| corr[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if !(best >= self.voicing_threshold) {
            return None;
        }
        // earliest strong peak avoids locking onto period multiples
        let j = *peaks.iter().find(|&&j| corr[j] >= 0.9 * best)?;
        let (a, b, c) = (corr[j - 1], corr[j], corr[j + 1]);
        let denom = a - 2.0 * b + c;
        let shift = if denom.abs() > 1e-12 {
            0.5 * (a - c) / denom
        } else {
            0.0
        };
        let lag = (lag_min - 1 + j) as f64 + shift.clamp(-0.5, 0.5);
        Some(sr / lag)
    }

    /// Fraction of frames with a voicing mismatch or a gross pitch error,
    /// taking `reference` as ground truth.
    pub fn frame_error(&self, reference: &PitchTrack, hypothesis: &PitchTrack) -> f64 {
        let n = reference.f0.len().min(hypothesis.f0.len());
        if n == 0 {
            return 0.0;
        }
        let errors = reference.f0[..n]
            .iter()
            .zip(&hypothesis.f0[..n])
            .filter(|(r, h)| match (r, h) {
                (Some(r), Some(h)) => (h / r - 1.0).abs() > self.gross_error,
                (None, None) => false,
                _ => true,
            })
            .count();
        errors as f64 / n as f64
    }
}
