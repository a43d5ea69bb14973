use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use log::info;
use wavegrad::checkpoint::{self, loss_csv, parse_loss_csv, CheckpointMeta, MANIFEST};
use wavegrad::corpus::read_wav_dir;
use wavegrad::tensor::{DType, Real};
use wavegrad::train::{run as run_steps, HeldOut, LossRecord, SegmentStore, TrainState};
use wavegrad::Error;

use crate::config::RunConfig;

/// Held-out loss at every checkpoint, in the loss-log format.
pub const HELD_OUT_LOG: &str = "held_out.csv";

/// Offsets the run seed for the held-out draw so it never coincides with a training step stream.
const HELD_OUT_SEED: u64 = 0x6865_6c64;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Run config file.
    config: PathBuf,
    /// Overrides `data_dir` from the config.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Overrides `checkpoint_dir` from the config.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Overrides `train.max_steps`.
    #[arg(long)]
    max_steps: Option<u64>,
    /// Start from step 0 even if the checkpoint directory holds a run.
    #[arg(long)]
    restart: bool,
}

pub fn run(args: Args) -> Result<()> {
    let mut cfg = RunConfig::read(&args.config)?;
    if let Some(d) = args.data_dir {
        cfg.data_dir = d;
    }
    if let Some(d) = args.checkpoint_dir {
        cfg.checkpoint_dir = d;
    }
    if let Some(n) = args.max_steps {
        cfg.train.max_steps = n;
    }
    match cfg.train.precision {
        DType::F32 => train::<f32>(&cfg, args.restart),
        DType::F64 => train::<f64>(&cfg, args.restart),
    }
}

fn check_compatible(meta: &CheckpointMeta, cfg: &RunConfig, dir: &Path) -> Result<(), Error> {
    let mut train = meta.train.clone();
    train.max_steps = cfg.train.max_steps;
    train.checkpoint_every = cfg.train.checkpoint_every;
    if meta.model != cfg.model || meta.mel != cfg.mel || train != cfg.train {
        return Err(Error::InvalidArgument(format!(
            "checkpoint in {} was written with a different configuration; pass --restart to replace it",
            dir.display()
        )));
    }
    Ok(())
}

fn read_held_out_log(dir: &Path, step: u64) -> Result<Vec<LossRecord>> {
    let path = dir.join(HELD_OUT_LOG);
    match std::fs::read_to_string(&path) {
        Ok(text) => Ok(parse_loss_csv(&text, &path)?
            .into_iter()
            .filter(|r| r.step <= step)
            .collect()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(source) => Err(Error::Io { path, source }.into()),
    }
}

fn train<R: Real>(cfg: &RunConfig, restart: bool) -> Result<()> {
    let files = read_wav_dir(&cfg.data_dir)
        .with_context(|| format!("reading dataset {}", cfg.data_dir.display()))?;
    if files.is_empty() {
        return Err(Error::Data(format!("no WAV files in {}", cfg.data_dir.display())).into());
    }
    if cfg.held_out_utterances >= files.len() {
        return Err(Error::Data(format!(
            "holding out {} of {} utterances leaves nothing to train on",
            cfg.held_out_utterances,
            files.len()
        ))
        .into());
    }
    let split = files.len() - cfg.held_out_utterances;
    let mut files = files;
    let held_files = files.split_off(split);
    let store = SegmentStore::new(files, &cfg.mel, cfg.train.segment_samples)?;
    let held_store = if held_files.is_empty() {
        info!("no held-out utterances configured; tracking loss on a fixed batch of training segments");
        None
    } else {
        Some(SegmentStore::new(
            held_files,
            &cfg.mel,
            cfg.train.segment_samples,
        )?)
    };
    let held = HeldOut::new(
        held_store.as_ref().unwrap_or(&store),
        &cfg.train,
        cfg.held_out_batch,
        cfg.train.seed ^ HELD_OUT_SEED,
    )?;

    let dir = &cfg.checkpoint_dir;
    let (mut state, mut held_log) = if dir.join(MANIFEST).exists() && !restart {
        let meta = CheckpointMeta::read(dir)?;
        check_compatible(&meta, cfg, dir)?;
        let (_, state) = checkpoint::load_state::<R>(dir)?;
        info!("resuming {} from step {}", dir.display(), state.step);
        let log = read_held_out_log(dir, state.step)?;
        (state, log)
    } else {
        (
            TrainState::<R>::new(cfg.model.clone(), &cfg.train)?,
            Vec::new(),
        )
    };
    let fingerprint = CheckpointMeta {
        step: 0,
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        mel: cfg.mel.clone(),
    }
    .fingerprint();
    info!(
        "model with {} parameters, {} training utterances, fingerprint {fingerprint}",
        state.model.num_parameters(),
        store.len()
    );

    let start = Instant::now();
    if held_log.last().map(|r| r.step) != Some(state.step) {
        held_log.push(LossRecord {
            step: state.step,
            loss: held.loss(&state.model)?,
            wall_seconds: 0.0,
        });
    }
    let max = cfg.train.max_steps;
    let every = cfg.train.checkpoint_every;
    let checkpoint = |s: &TrainState<R>, log: &mut Vec<LossRecord>| -> Result<(), Error> {
        if log.last().map(|r| r.step) != Some(s.step) {
            log.push(LossRecord {
                step: s.step,
                loss: held.loss(&s.model)?,
                wall_seconds: start.elapsed().as_secs_f64(),
            });
        }
        checkpoint::save(dir, s, &cfg.train, &cfg.mel)?;
        let path = dir.join(HELD_OUT_LOG);
        std::fs::write(&path, loss_csv(log, &fingerprint))
            .map_err(|source| Error::Io { path, source })?;
        info!(
            "step {}: train loss {:.4}, held-out loss {:.4}",
            s.step,
            s.history.last().map_or(f64::NAN, |r| r.loss),
            log.last().map_or(f64::NAN, |r| r.loss)
        );
        Ok(())
    };
    if state.step >= max {
        info!("already at step {} (max_steps {max})", state.step);
    }
    run_steps(&mut state, &cfg.train, &store, max, |s| {
        if (every > 0 && s.step % every == 0) || s.step == max {
            checkpoint(s, &mut held_log)?;
        }
        Ok(())
    })?;
    if !dir.join(MANIFEST).exists() || held_log.last().map(|r| r.step) != Some(state.step) {
        checkpoint(&state, &mut held_log)?;
    }

    let first = held_log.first().expect("initial held-out loss");
    let last = held_log.last().expect("final held-out loss");
    println!(
        "step {}: held-out loss {:.4} at step {} -> {:.4} ({:.1}% lower); checkpoint in {}",
        state.step,
        first.loss,
        first.step,
        last.loss,
        100.0 * (1.0 - last.loss / first.loss),
        dir.display()
    );
    Ok(())
}
