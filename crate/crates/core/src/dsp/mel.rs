use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::Waveform;
use crate::error::{Error, Result};
use crate::kv::KvDoc;

const MEL_MAGIC: &[u8; 4] = b"MELM";
const MEL_VERSION: u32 = 1;

/// STFT and filterbank settings for log-mel features.
#[derive(Debug, Clone, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl MelConfig {
    /// 24 kHz, 50 ms Hann window, 12.5 ms hop, 2048-point FFT, 128 bins over 20 Hz to 12 kHz.
    pub fn full() -> Self {
        Self {
            sample_rate: 24_000,
            win_length: 1200,
            hop_length: 300,
            n_fft: 2048,
            n_mels: 128,
            fmin: 20.0,
            fmax: 12_000.0,
            log_floor: 1e-5,
        }
    }

    /// Small 8 kHz profile whose hop matches the toy model's upsampling.
    pub fn toy() -> Self {
        Self {
            sample_rate: 8_000,
            win_length: 32,
            hop_length: 4,
            n_fft: 64,
            n_mels: 8,
            fmin: 20.0,
            fmax: 4_000.0,
            log_floor: 1e-5,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::invalid(format!(
                "unknown mel preset `{other}` (expected full or toy)"
            ))),
        }
    }

    /// Same analysis with half the hop, used for scoring rather than conditioning.
    pub fn metric_variant(&self) -> Self {
        Self {
            hop_length: (self.hop_length / 2).max(1),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("mel config: {m}")));
        if self.sample_rate == 0 || self.hop_length == 0 || self.n_mels == 0 {
            return bad("sample_rate, hop_length and n_mels must be positive".into());
        }
        if self.win_length == 0 || self.win_length > self.n_fft {
            return bad(format!(
                "window {} must be in 1..={} (the FFT size)",
                self.win_length, self.n_fft
            ));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= nyquist) {
            return bad(format!(
                "need 0 <= fmin < fmax <= {nyquist} Hz, got {}..{}",
                self.fmin, self.fmax
            ));
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive".into());
        }
        Ok(())
    }

    pub fn to_doc(&self) -> KvDoc {
        let mut d = KvDoc::new();
        d.set("sample_rate", self.sample_rate);
        d.set("win_length", self.win_length);
        d.set("hop_length", self.hop_length);
        d.set("n_fft", self.n_fft);
        d.set("n_mels", self.n_mels);
        d.set("fmin", self.fmin);
        d.set("fmax", self.fmax);
        d.set("log_floor", format!("{:e}", self.log_floor));
        d
    }

    /// Reads keys over `base`; absent keys keep the base value.
    pub fn from_doc(doc: &KvDoc, base: &MelConfig) -> Result<Self> {
        let cfg = Self {
            sample_rate: doc.parse_or("sample_rate", base.sample_rate)?,
            win_length: doc.parse_or("win_length", base.win_length)?,
            hop_length: doc.parse_or("hop_length", base.hop_length)?,
            n_fft: doc.parse_or("n_fft", base.n_fft)?,
            n_mels: doc.parse_or("n_mels", base.n_mels)?,
            fmin: doc.parse_or("fmin", base.fmin)?,
            fmax: doc.parse_or("fmax", base.fmax)?,
            log_floor: doc.parse_or("log_floor", base.log_floor)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Number of frames for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        len / self.hop_length
    }
}

/// Log-mel matrix stored bin-major: `values[bin * frames + frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    n_mels: usize,
    frames: usize,
    values: Vec<f64>,
}

impl MelSpectrogram {
    pub fn new(n_mels: usize, frames: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_mels * frames {
            return Err(Error::shape(format!(
                "mel matrix {n_mels}x{frames} needs {} values, got {}",
                n_mels * frames,
                values.len()
            )));
        }
        Ok(Self {
            n_mels,
            frames,
            values,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.values[bin * self.frames + frame]
    }

    pub fn crop(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames {
            return Err(Error::invalid(format!(
                "mel crop {start}..{} outside {} frames",
                start + len,
                self.frames
            )));
        }
        let mut values = Vec::with_capacity(self.n_mels * len);
        for b in 0..self.n_mels {
            let row = &self.values[b * self.frames..(b + 1) * self.frames];
            values.extend_from_slice(&row[start..start + len]);
        }
        Self::new(self.n_mels, len, values)
    }

    /// `MELM`, u32 version, u32 bins, u32 frames, f32 little-endian values.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(16 + self.values.len() * 4);
        out.extend_from_slice(MEL_MAGIC);
        out.extend_from_slice(&MEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n_mels as u32).to_le_bytes());
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        for &v in &self.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Data(format!("{}: {m}", path.display()));
        if bytes.len() < 16 || &bytes[..4] != MEL_MAGIC {
            return Err(bad("not a mel matrix file"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        if word(4) != MEL_VERSION {
            return Err(bad("unsupported mel file version"));
        }
        let (bins, frames) = (word(8) as usize, word(12) as usize);
        let body = &bytes[16..];
        if body.len() != bins * frames * 4 {
            return Err(bad("mel matrix size does not match its header"));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Self::new(bins, frames, values)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with unit peak, edges equally spaced on the mel scale.
/// Row-major `[n_mels][n_fft / 2 + 1]`.
pub fn mel_filterbank(cfg: &MelConfig) -> Vec<Vec<f64>> {
    let n_bins = cfg.n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let up = (f - l) / (c - l);
                    let down = (r - f) / (r - c);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Reusable STFT plan, window and filterbank for one [`MelConfig`].
pub struct MelExtractor {
    cfg: MelConfig,
    window: Vec<f64>,
    filters: Vec<(usize, Vec<f64>)>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelExtractor")
            .field("cfg", &self.cfg)
            .finish()
    }
}

impl MelExtractor {
    pub fn new(cfg: &MelConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.win_length;
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
            .collect();
        // keep only the nonzero span of each filter
        let filters = mel_filterbank(cfg)
            .into_iter()
            .map(|row| {
                let first = row.iter().position(|&w| w > 0.0).unwrap_or(0);
                let last = row.iter().rposition(|&w| w > 0.0).map_or(first, |p| p + 1);
                (first, row[first..last].to_vec())
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self {
            cfg: cfg.clone(),
            window,
            filters,
            fft,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// Magnitude spectrum of frame `t`: a window centred on `t * hop + hop / 2`.
    pub fn frame_magnitude(&self, samples: &[f64], t: usize) -> Vec<f64> {
        let cfg = &self.cfg;
        let start =
            (t * cfg.hop_length + cfg.hop_length / 2) as isize - (cfg.win_length / 2) as isize;
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        for (i, (b, &w)) in buf.iter_mut().zip(&self.window).enumerate() {
            let idx = start + i as isize;
            if idx >= 0 && (idx as usize) < samples.len() {
                b.re = samples[idx as usize] * w;
            }
        }
        self.fft.process(&mut buf);
        buf[..cfg.n_fft / 2 + 1].iter().map(|c| c.norm()).collect()
    }

    pub fn compute(&self, y: &Waveform) -> Result<MelSpectrogram> {
        let cfg = &self.cfg;
        if y.sample_rate() != cfg.sample_rate {
            return Err(Error::invalid(format!(
                "waveform rate {} Hz does not match mel config {} Hz",
                y.sample_rate(),
                cfg.sample_rate
            )));
        }
        if y.len() < cfg.win_length {
            return Err(Error::invalid(format!(
                "signal of {} samples is shorter than one {}-sample window",
                y.len(),
                cfg.win_length
            )));
        }
        let frames = cfg.frame_count(y.len());
        let mut values = vec![0.0; cfg.n_mels * frames];
        for t in 0..frames {
            let mag = self.frame_magnitude(y.samples(), t);
            for (m, (first, w)) in self.filters.iter().enumerate() {
                let e: f64 = w.iter().zip(&mag[*first..]).map(|(a, b)| a * b).sum();
                values[m * frames + t] = e.max(cfg.log_floor).ln();
            }
        }
        MelSpectrogram::new(cfg.n_mels, frames, values)
    }
}
