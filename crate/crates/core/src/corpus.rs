//! Synthetic harmonic corpus and WAV directory helpers.

use std::f64::consts::PI;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{wav_read, wav_write, Waveform};
use crate::error::{Error, Result};

/// Sine-mixture utterances: a harmonic tone with a gliding f0 and a 1/k
/// spectral tilt under a fade-in/fade-out envelope, preceded and followed
/// by silence.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub utterances: usize,
    pub samples: usize,
    pub sample_rate: u32,
    pub f0_min: f64,
    pub f0_max: f64,
    pub harmonics: usize,
    /// Range of the per-utterance peak amplitude.
    pub peak_min: f64,
    pub peak_max: f64,
    /// Upper bound on the silent fraction before onset and after offset.
    pub max_silence: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            utterances: 16,
            samples: 2048,
            sample_rate: 8_000,
            f0_min: 120.0,
            f0_max: 320.0,
            harmonics: 10,
            peak_min: 0.2,
            peak_max: 0.6,
            max_silence: 0.15,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.utterances == 0 || self.samples == 0 || self.harmonics == 0 {
            return Err(Error::invalid(
                "corpus needs utterances, samples and harmonics > 0",
            ));
        }
        if !(self.peak_min > 0.0 && self.peak_min <= self.peak_max && self.peak_max <= 1.0) {
            return Err(Error::invalid(
                "peak amplitudes must satisfy 0 < peak_min <= peak_max <= 1",
            ));
        }
        if !(0.0..0.5).contains(&self.max_silence) {
            return Err(Error::invalid("max_silence must lie in [0, 0.5)"));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.f0_min > 0.0
            && self.f0_min <= self.f0_max
            && self.f0_max * 1.1 * (self.harmonics as f64) < nyquist)
        {
            return Err(Error::invalid(format!(
                "f0 range {}..{} Hz with {} harmonics does not fit below {nyquist} Hz",
                self.f0_min, self.f0_max, self.harmonics
            )));
        }
        Ok(())
    }

    /// Utterance `index`, independent of how many others are generated.
    pub fn utterance(&self, index: usize) -> Result<Waveform> {
        self.utterance_with_pitch(index, 1.0)
    }

    /// Utterance `index` with its f0 contour multiplied by `scale`; the
    /// envelope and phases are unchanged and harmonics that would reach
    /// Nyquist are dropped.
    pub fn utterance_with_pitch(&self, index: usize, scale: f64) -> Result<Waveform> {
        self.validate()?;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!(
                "pitch scale must be positive, got {scale}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let sr = self.sample_rate as f64;
        let n = self.samples;
        let f0 = rng.random_range(self.f0_min..=self.f0_max) * scale;
        let glide_rate = rng.random_range(1.0..4.0);
        let glide_phase = rng.random_range(0.0..2.0 * PI);
        let depth = rng.random_range(0.0..0.1);
        let peak = rng.random_range(self.peak_min..=self.peak_max);
        let phases: Vec<f64> = (0..self.harmonics)
            .map(|_| rng.random_range(0.0..2.0 * PI))
            .collect();
        let margin = self.max_silence;
        let onset = (n as f64 * rng.random_range(0.0..=margin)) as usize;
        let offset = n - (n as f64 * rng.random_range(0.0..=margin)) as usize;
        let fade = ((offset - onset) / 8).max(1);

        let norm: f64 = (1..=self.harmonics).map(|k| 1.0 / k as f64).sum();
        let audible = (1..=self.harmonics)
            .take_while(|&k| k as f64 * f0 * (1.0 + depth) < sr / 2.0)
            .count();
        let mut phase = 0.0;
        let samples = (0..n)
            .map(|i| {
                let t = i as f64 / sr;
                let f = f0 * (1.0 + depth * (2.0 * PI * glide_rate * t + glide_phase).sin());
                phase += 2.0 * PI * f / sr;
                if i < onset || i >= offset {
                    return 0.0;
                }
                let edge = (i - onset).min(offset - 1 - i);
                let env = if edge < fade {
                    0.5 - 0.5 * (PI * edge as f64 / fade as f64).cos()
                } else {
                    1.0
                };
                let tone: f64 = phases[..audible]
                    .iter()
                    .enumerate()
                    .map(|(k, p)| ((k + 1) as f64 * phase + p).sin() / (k + 1) as f64)
                    .sum();
                peak * env * tone / norm
            })
            .collect();
        Waveform::new(samples, self.sample_rate)
    }

    pub fn generate(&self) -> Result<Vec<(String, Waveform)>> {
        self.generate_range(0..self.utterances)
    }

    /// Utterances with the given indices; disjoint ranges give disjoint sets from one seed.
    pub fn generate_range(&self, indices: Range<usize>) -> Result<Vec<(String, Waveform)>> {
        indices
            .map(|i| Ok((format!("utt_{i:03}.wav"), self.utterance(i)?)))
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        self.write_range(dir, 0..self.utterances)
    }

    pub fn write_range(&self, dir: &Path, indices: Range<usize>) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.generate_range(indices)?
            .into_iter()
            .map(|(name, y)| {
                let path = dir.join(name);
                wav_write(&path, &y)?;
                Ok(path)
            })
            .collect()
    }
}

/// All `*.wav` files in `dir`, sorted by file name.
pub fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
        {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Reads every WAV in `dir` as `(file name, waveform)`.
pub fn read_wav_dir(dir: &Path) -> Result<Vec<(String, Waveform)>> {
    wav_files(dir)?
        .into_iter()
        .map(|p| {
            let name = p
                .file_name()
                .expect("file path")
                .to_string_lossy()
                .into_owned();
            Ok((name, wav_read(&p)?))
        })
        .collect()
}
