//! Training run configuration file.
//!
//! ```text
//! data_dir = data
//! checkpoint_dir = runs/toy
//! held_out_utterances = 2
//! model.preset = toy
//! train.preset = toy
//! train.max_steps = 2000
//! mel.preset = toy
//! ```
//!
//! Relative directories resolve against `WAVEGRAD_DATA_ROOT` and
//! `WAVEGRAD_CHECKPOINT_ROOT` when set, otherwise against the directory
//! holding the config file.

use std::path::{Path, PathBuf};

use wavegrad::kv::KvDoc;
use wavegrad::{Error, MelConfig, ModelConfig, TrainConfig};

pub const DATA_ROOT_ENV: &str = "WAVEGRAD_DATA_ROOT";
pub const CHECKPOINT_ROOT_ENV: &str = "WAVEGRAD_CHECKPOINT_ROOT";

const TOP_LEVEL: &[&str] = &[
    "data_dir",
    "checkpoint_dir",
    "held_out_utterances",
    "held_out_batch",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    /// The last this many files (by name) are kept out of training.
    pub held_out_utterances: usize,
    /// Segments in the fixed held-out batch.
    pub held_out_batch: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mel: MelConfig,
}

/// Resolves `path` against the directory named by `env`, falling back to `base`.
pub fn resolve(path: &Path, env: &str, base: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(env) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(path),
        _ => base.join(path),
    }
}

fn check_keys(doc: &KvDoc) -> Result<(), Error> {
    let known = |section: &str, keys: KvDoc| -> Vec<String> {
        keys.keys()
            .map(|k| format!("{section}.{k}"))
            .chain(std::iter::once(format!("{section}.preset")))
            .collect()
    };
    let mut allowed: Vec<String> = TOP_LEVEL.iter().map(|s| s.to_string()).collect();
    allowed.extend(known("model", ModelConfig::toy().to_doc()));
    allowed.extend(known("train", TrainConfig::toy().to_doc()));
    allowed.extend(known("mel", MelConfig::toy().to_doc()));
    for key in doc.keys() {
        if !allowed.iter().any(|a| a == key) {
            return Err(doc.error_at(doc.line_of(key), format!("unknown key `{key}`")));
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, Error> {
        let doc = KvDoc::parse(text, &path.display().to_string())?;
        check_keys(&doc)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let dir = |key: &str, env: &str| -> Result<PathBuf, Error> {
            Ok(resolve(Path::new(doc.require(key)?), env, base))
        };
        let at = |key: &str, e: Error| match e {
            e @ Error::Config { .. } => e,
            other => doc.error_at(doc.line_of(key), other.to_string()),
        };

        let model_doc = doc.section("model");
        let model = ModelConfig::from_doc(&model_doc).map_err(|e| at("model.preset", e))?;
        let train_doc = doc.section("train");
        let train_base = TrainConfig::preset(train_doc.get("preset").unwrap_or("full"))
            .map_err(|e| at("train.preset", e))?;
        let train = TrainConfig::from_doc(&train_doc, &train_base)?;
        let mel_doc = doc.section("mel");
        let mel_base = MelConfig::preset(mel_doc.get("preset").unwrap_or("full"))
            .map_err(|e| at("mel.preset", e))?;
        let mel = MelConfig::from_doc(&mel_doc, &mel_base).map_err(|e| at("mel.preset", e))?;

        train
            .validate(&model)
            .map_err(|e| at("train.segment_samples", e))?;
        if mel.n_mels != model.mel_bins {
            return Err(doc.error_at(
                doc.line_of("mel.n_mels"),
                format!(
                    "mel has {} bins but the model expects {}",
                    mel.n_mels, model.mel_bins
                ),
            ));
        }
        if mel.hop_length != model.hop() {
            return Err(doc.error_at(
                doc.line_of("mel.hop_length"),
                format!(
                    "mel hop {} differs from the model's upsampling factor {}",
                    mel.hop_length,
                    model.hop()
                ),
            ));
        }
        let cfg = Self {
            data_dir: dir("data_dir", DATA_ROOT_ENV)?,
            checkpoint_dir: dir("checkpoint_dir", CHECKPOINT_ROOT_ENV)?,
            held_out_utterances: doc.parse_or("held_out_utterances", 0)?,
            held_out_batch: doc.parse_or("held_out_batch", 32)?,
            model,
            train,
            mel,
        };
        if cfg.held_out_batch == 0 {
            return Err(doc.error_at(
                doc.line_of("held_out_batch"),
                "held_out_batch must be positive",
            ));
        }
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }
}
