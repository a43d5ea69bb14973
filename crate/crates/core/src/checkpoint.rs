//! Checkpoint directories and the loaded-model wrapper used for synthesis.
//!
//! A checkpoint holds `manifest.cfg` (configs, step, precision),
//! `params.wgta`, `optimizer.wgta` and `loss.csv`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::dsp::{MelConfig, MelSpectrogram};
use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::net::{DenoiserModel, ModelConfig};
use crate::sample::NoisePredictor;
use crate::schedule::NoiseSchedule;
use crate::tensor::{DType, Real, TensorArchive};
use crate::train::{Adam, LossRecord, TrainConfig, TrainState};

const FORMAT: &str = "wavegrad-checkpoint-1";
pub const MANIFEST: &str = "manifest.cfg";
pub const PARAMS: &str = "params.wgta";
pub const OPTIMIZER: &str = "optimizer.wgta";
pub const LOSS_LOG: &str = "loss.csv";

/// Short hex digest of `text`, used to tag outputs with the configuration that produced them.
pub fn fingerprint(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    hex::encode(&digest[..8])
}

/// Everything in a manifest except the tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub step: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mel: MelConfig,
}

impl CheckpointMeta {
    fn config_doc(&self) -> KvDoc {
        let mut d = KvDoc::new();
        d.merge_section("model", &self.model.to_doc());
        d.merge_section("train", &self.train.to_doc());
        d.merge_section("mel", &self.mel.to_doc());
        d
    }

    /// Digest of the configuration, independent of the step.
    pub fn fingerprint(&self) -> String {
        fingerprint(&self.config_doc().to_text())
    }

    pub fn to_doc(&self) -> KvDoc {
        let mut d = KvDoc::new();
        d.set("format", FORMAT);
        d.set("step", self.step);
        d.set("fingerprint", self.fingerprint());
        let cfg = self.config_doc();
        for k in cfg.keys() {
            d.set(k, cfg.get(k).unwrap_or_default());
        }
        d
    }

    pub fn from_doc(doc: &KvDoc) -> Result<Self> {
        let format = doc.require("format")?;
        if format != FORMAT {
            return Err(doc.error_at(
                doc.line_of("format"),
                format!("unsupported checkpoint format `{format}`"),
            ));
        }
        Ok(Self {
            step: doc.parse_value("step")?,
            model: ModelConfig::from_doc(&doc.section("model"))?,
            train: TrainConfig::from_doc(&doc.section("train"), &TrainConfig::default())?,
            mel: MelConfig::from_doc(&doc.section("mel"), &MelConfig::full())?,
        })
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Self::from_doc(&KvDoc::read(&dir.join(MANIFEST))?)
    }
}

/// `step,loss,wall_seconds` rows under a fingerprint comment.
pub fn loss_csv(records: &[LossRecord], fingerprint: &str) -> String {
    let mut out = format!("# fingerprint={fingerprint}\nstep,loss,wall_seconds\n");
    for r in records {
        let _ = writeln!(out, "{},{},{:.3}", r.step, r.loss, r.wall_seconds);
    }
    out
}

pub fn parse_loss_csv(text: &str, source: &Path) -> Result<Vec<LossRecord>> {
    let bad = |line: usize, msg: &str| Error::Config {
        path: source.display().to_string(),
        line,
        message: msg.into(),
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("step,") {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(bad(i + 1, "expected step,loss,wall_seconds"));
        }
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| bad(i + 1, "malformed number"))
        };
        out.push(LossRecord {
            step: parts[0]
                .trim()
                .parse()
                .map_err(|_| bad(i + 1, "malformed step"))?,
            loss: num(parts[1])?,
            wall_seconds: num(parts[2])?,
        });
    }
    Ok(out)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes the full training state; files are replaced one by one via renames.
pub fn save<R: Real>(
    dir: &Path,
    state: &TrainState<R>,
    train: &TrainConfig,
    mel: &MelConfig,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut train = train.clone();
    train.precision = R::DTYPE;
    let meta = CheckpointMeta {
        step: state.step,
        model: state.model.config().clone(),
        train,
        mel: mel.clone(),
    };
    write_atomic(
        &dir.join(PARAMS),
        &state.model.params().to_archive().to_bytes(),
    )?;
    write_atomic(
        &dir.join(OPTIMIZER),
        &state.optimizer.to_archive(state.model.params())?.to_bytes(),
    )?;
    let fp = meta.fingerprint();
    write_atomic(
        &dir.join(LOSS_LOG),
        loss_csv(&state.history, &fp).as_bytes(),
    )?;
    write_atomic(&dir.join(MANIFEST), meta.to_doc().to_text().as_bytes())
}

fn load_model<R: Real>(dir: &Path, meta: &CheckpointMeta) -> Result<DenoiserModel<R>> {
    // parameters are overwritten below; the init seed is irrelevant
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut model = DenoiserModel::<R>::new(meta.model.clone(), &mut rng)?;
    let archive = TensorArchive::read(&dir.join(PARAMS))?;
    model.params_mut().load_archive(&archive)?;
    Ok(model)
}

/// Restores a run for continued training in precision `R`.
pub fn load_state<R: Real>(dir: &Path) -> Result<(CheckpointMeta, TrainState<R>)> {
    let meta = CheckpointMeta::read(dir)?;
    let model = load_model::<R>(dir, &meta)?;
    let mut optimizer = Adam::new(meta.train.adam, model.params());
    optimizer.load_archive(
        model.params(),
        &TensorArchive::read(&dir.join(OPTIMIZER))?,
        meta.step,
    )?;
    let log = dir.join(LOSS_LOG);
    let history = match std::fs::read_to_string(&log) {
        Ok(text) => parse_loss_csv(&text, &log)?
            .into_iter()
            .filter(|r| r.step <= meta.step)
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(Error::io(log, e)),
    };
    let state = TrainState {
        step: meta.step,
        model,
        optimizer,
        history,
    };
    Ok((meta, state))
}

#[derive(Debug, Clone)]
pub enum AnyModel {
    F32(DenoiserModel<f32>),
    F64(DenoiserModel<f64>),
}

impl AnyModel {
    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::F32(m) => m.config(),
            AnyModel::F64(m) => m.config(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        match self {
            AnyModel::F32(m) => m.num_parameters(),
            AnyModel::F64(m) => m.num_parameters(),
        }
    }
}

/// A trained denoiser with the schedule binding implied by its training mode.
#[derive(Debug, Clone)]
pub struct Vocoder {
    pub meta: CheckpointMeta,
    pub model: AnyModel,
    pub path: Option<PathBuf>,
}

impl Vocoder {
    pub fn load(dir: &Path) -> Result<Self> {
        let meta = CheckpointMeta::read(dir)?;
        let model = match meta.train.precision {
            DType::F32 => AnyModel::F32(load_model(dir, &meta)?),
            DType::F64 => AnyModel::F64(load_model(dir, &meta)?),
        };
        Ok(Self {
            meta,
            model,
            path: Some(dir.to_path_buf()),
        })
    }

    pub fn from_state<R: Real>(
        state: &TrainState<R>,
        train: &TrainConfig,
        mel: &MelConfig,
    ) -> Self {
        let model = match R::DTYPE {
            DType::F32 => AnyModel::F32(state.model.cast()),
            DType::F64 => AnyModel::F64(state.model.cast()),
        };
        Self {
            meta: CheckpointMeta {
                step: state.step,
                model: state.model.config().clone(),
                train: train.clone(),
                mel: mel.clone(),
            },
            model,
            path: None,
        }
    }

    /// `true` when any inference schedule is accepted.
    pub fn is_continuous(&self) -> bool {
        self.meta.train.conditioning.binding().is_none()
    }
}

impl NoisePredictor for Vocoder {
    fn output_len(&self, mel: &MelSpectrogram) -> Result<usize> {
        match &self.model {
            AnyModel::F32(m) => m.output_len(mel),
            AnyModel::F64(m) => m.output_len(mel),
        }
    }

    fn predict_noise(
        &self,
        y: &[f64],
        mel: &MelSpectrogram,
        sqrt_alpha_bar: f64,
    ) -> Result<Vec<f64>> {
        match &self.model {
            AnyModel::F32(m) => m.predict(y, mel, sqrt_alpha_bar),
            AnyModel::F64(m) => m.predict(y, mel, sqrt_alpha_bar),
        }
    }

    fn schedule_binding(&self) -> Option<&NoiseSchedule> {
        self.meta.train.conditioning.binding()
    }
}
