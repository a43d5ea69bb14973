use crate::error::{Error, Result};
use crate::kv::{self, KvDoc};

/// Layer widths, rates and dilations of the denoiser.
///
/// UBlock `i` is modulated by the feature map at its output rate: the input
/// convolution's output for the last UBlock, DBlock `L - 2 - i` otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub mel_bins: usize,
    /// Width of the convolution applied to the noisy waveform.
    pub input_channels: usize,
    /// Width of the convolution applied to the mel spectrogram.
    pub mel_channels: usize,
    pub upsample_factors: Vec<usize>,
    pub ublock_channels: Vec<usize>,
    pub ublock_dilations: Vec<[usize; 4]>,
    pub dblock_channels: Vec<usize>,
    pub dblock_factors: Vec<usize>,
    pub dblock_dilations: [usize; 3],
    pub positional_scale: f64,
    pub leaky_slope: f64,
    /// Follow every block with a rate-preserving copy.
    pub large: bool,
}

impl ModelConfig {
    /// Base architecture: 24 kHz audio from 80 Hz, 128-bin mel frames.
    pub fn base() -> Self {
        Self {
            mel_bins: 128,
            input_channels: 32,
            mel_channels: 768,
            upsample_factors: vec![5, 5, 3, 2, 2],
            ublock_channels: vec![512, 512, 256, 128, 128],
            ublock_dilations: vec![
                [1, 2, 4, 8],
                [1, 2, 4, 8],
                [1, 2, 4, 8],
                [1, 2, 1, 2],
                [1, 2, 1, 2],
            ],
            dblock_channels: vec![128, 128, 256, 512],
            dblock_factors: vec![2, 2, 3, 5],
            dblock_dilations: [1, 2, 4],
            positional_scale: 5000.0,
            leaky_slope: 0.2,
            large: false,
        }
    }

    pub fn large() -> Self {
        Self {
            ublock_dilations: vec![[1, 2, 4, 8]; 5],
            large: true,
            ..Self::base()
        }
    }

    /// Tiny profile for tests and desk-scale training: two UBlocks, one DBlock.
    pub fn toy() -> Self {
        Self {
            mel_bins: 8,
            input_channels: 16,
            mel_channels: 16,
            upsample_factors: vec![2, 2],
            ublock_channels: vec![16, 16],
            ublock_dilations: vec![[1, 2, 4, 8], [1, 2, 4, 8]],
            dblock_channels: vec![16],
            dblock_factors: vec![2],
            dblock_dilations: [1, 2, 4],
            positional_scale: 5000.0,
            leaky_slope: 0.2,
            large: false,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "base" => Ok(Self::base()),
            "large" => Ok(Self::large()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::invalid(format!(
                "unknown model preset `{other}` (expected base, large or toy)"
            ))),
        }
    }

    /// Waveform samples per mel frame.
    pub fn hop(&self) -> usize {
        self.upsample_factors.iter().product()
    }

    /// Channel count of feature level `k`: 0 is the input convolution, `k >= 1` is DBlock `k - 1`.
    pub fn feature_channels(&self, k: usize) -> usize {
        if k == 0 {
            self.input_channels
        } else {
            self.dblock_channels[k - 1]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("model config: {m}")));
        let n = self.upsample_factors.len();
        if n == 0 {
            return bad("at least one UBlock is required".into());
        }
        if self.ublock_channels.len() != n || self.ublock_dilations.len() != n {
            return bad(format!(
                "{n} upsample factors but {} channel counts and {} dilation sets",
                self.ublock_channels.len(),
                self.ublock_dilations.len()
            ));
        }
        if self.dblock_channels.len() != n - 1 || self.dblock_factors.len() != n - 1 {
            return bad(format!(
                "{n} UBlocks need {} DBlocks, got {} channel counts and {} factors",
                n - 1,
                self.dblock_channels.len(),
                self.dblock_factors.len()
            ));
        }
        let mirrored: Vec<usize> = self.dblock_factors.iter().rev().copied().collect();
        if mirrored[..] != self.upsample_factors[1..] {
            return bad(format!(
                "DBlock factors {:?} must mirror upsample factors {:?} after the first",
                self.dblock_factors, self.upsample_factors
            ));
        }
        let sizes = [self.mel_bins, self.input_channels, self.mel_channels];
        if sizes.contains(&0)
            || self.upsample_factors.contains(&0)
            || self.ublock_channels.contains(&0)
            || self.dblock_channels.contains(&0)
            || self.ublock_dilations.iter().flatten().any(|&d| d == 0)
            || self.dblock_dilations.contains(&0)
        {
            return bad("sizes, factors and dilations must be positive".into());
        }
        if let Some(c) = self.ublock_channels.iter().find(|c| *c % 2 == 1) {
            return bad(format!(
                "UBlock width {c} must be even for the positional encoding"
            ));
        }
        if !(self.positional_scale > 0.0) {
            return bad("positional_scale must be positive".into());
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return bad("leaky_slope must lie in (0, 1)".into());
        }
        Ok(())
    }

    pub fn to_doc(&self) -> KvDoc {
        let mut d = KvDoc::new();
        d.set("mel_bins", self.mel_bins);
        d.set("input_channels", self.input_channels);
        d.set("mel_channels", self.mel_channels);
        d.set("upsample_factors", kv::join_list(&self.upsample_factors));
        d.set("ublock_channels", kv::join_list(&self.ublock_channels));
        let dil: Vec<String> = self
            .ublock_dilations
            .iter()
            .map(|q| kv::join_list(q))
            .collect();
        d.set("ublock_dilations", dil.join("; "));
        d.set("dblock_channels", kv::join_list(&self.dblock_channels));
        d.set("dblock_factors", kv::join_list(&self.dblock_factors));
        d.set("dblock_dilations", kv::join_list(&self.dblock_dilations));
        d.set("positional_scale", self.positional_scale);
        d.set("leaky_slope", self.leaky_slope);
        d.set("large", self.large);
        d
    }

    /// Reads keys over a `preset` base (default `base`).
    pub fn from_doc(doc: &KvDoc) -> Result<Self> {
        let base = Self::preset(doc.get("preset").unwrap_or("base"))
            .map_err(|e| doc.error_at(doc.line_of("preset"), e.to_string()))?;
        let list = |key: &str, default: &Vec<usize>| -> Result<Vec<usize>> {
            if doc.contains(key) {
                doc.parse_list(key)
            } else {
                Ok(default.clone())
            }
        };
        let ublock_dilations = match doc.get("ublock_dilations") {
            None => base.ublock_dilations.clone(),
            Some(raw) => raw
                .split(';')
                .map(|part| {
                    let v: Vec<usize> = kv::parse_list(part)
                        .map_err(|e| doc.error_at(doc.line_of("ublock_dilations"), e))?;
                    <[usize; 4]>::try_from(v).map_err(|_| {
                        doc.error_at(
                            doc.line_of("ublock_dilations"),
                            "each UBlock needs four dilations",
                        )
                    })
                })
                .collect::<Result<_>>()?,
        };
        let dblock_dilations = match doc.get("dblock_dilations") {
            None => base.dblock_dilations,
            Some(_) => <[usize; 3]>::try_from(doc.parse_list::<usize>("dblock_dilations")?)
                .map_err(|_| {
                    doc.error_at(
                        doc.line_of("dblock_dilations"),
                        "DBlocks need three dilations",
                    )
                })?,
        };
        let cfg = Self {
            mel_bins: doc.parse_or("mel_bins", base.mel_bins)?,
            input_channels: doc.parse_or("input_channels", base.input_channels)?,
            mel_channels: doc.parse_or("mel_channels", base.mel_channels)?,
            upsample_factors: list("upsample_factors", &base.upsample_factors)?,
            ublock_channels: list("ublock_channels", &base.ublock_channels)?,
            ublock_dilations,
            dblock_channels: list("dblock_channels", &base.dblock_channels)?,
            dblock_factors: list("dblock_factors", &base.dblock_factors)?,
            dblock_dilations,
            positional_scale: doc.parse_or("positional_scale", base.positional_scale)?,
            leaky_slope: doc.parse_or("leaky_slope", base.leaky_slope)?,
            large: doc.parse_or("large", base.large)?,
        };
        cfg.validate().map_err(|e| doc.error_at(0, e.to_string()))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for cfg in [
            ModelConfig::base(),
            ModelConfig::large(),
            ModelConfig::toy(),
        ] {
            cfg.validate().unwrap();
        }
        assert_eq!(ModelConfig::base().hop(), 300);
        assert_eq!(ModelConfig::toy().hop(), 4);
    }

    #[test]
    fn doc_round_trip() {
        for cfg in [
            ModelConfig::base(),
            ModelConfig::large(),
            ModelConfig::toy(),
        ] {
            assert_eq!(ModelConfig::from_doc(&cfg.to_doc()).unwrap(), cfg);
        }
    }

    #[test]
    fn rejects_inconsistent_factors() {
        let mut cfg = ModelConfig::base();
        cfg.dblock_factors = vec![2, 2, 5, 3];
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy();
        cfg.ublock_channels = vec![16];
        assert!(cfg.validate().is_err());
    }
}
