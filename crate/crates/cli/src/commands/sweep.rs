use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{Context, Result};
use log::info;
use wavegrad::corpus::read_wav_dir;
use wavegrad::kv;
use wavegrad::{run_sweep, Error, Scored, SweepSpec, ValidationSet, Vocoder};

use crate::output::{csv, emit, provenance};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Continuous-mode checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of ground-truth validation WAVs.
    #[arg(long)]
    validation: PathBuf,
    /// Schedule length of each candidate.
    #[arg(long, default_value_t = 6)]
    iterations: usize,
    /// Random candidates drawn before refinement.
    #[arg(long, default_value_t = 64)]
    budget: usize,
    /// Coordinate-descent passes over the best candidate.
    #[arg(long, default_value_t = 2)]
    refine_rounds: usize,
    /// Seed of the candidate search.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Score only the given comma-separated β lists (repeatable).
    #[arg(long = "candidate")]
    candidates: Vec<String>,
    /// Admit β sequences that decrease somewhere.
    #[arg(long)]
    allow_decreasing: bool,
    /// Base seed for synthesizing the validation set.
    #[arg(long, default_value_t = 0)]
    synth_seed: u64,
    /// Clip every iterate to `[-c, c]` while scoring.
    #[arg(long)]
    clamp: Option<f64>,
    /// Report path; stdout by default.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn report(results: &[Scored], fingerprint: &str) -> String {
    let width = results.iter().map(|r| r.betas.len()).max().unwrap_or(0);
    let mut body = String::from("rank,ls_mse");
    for i in 1..=width {
        let _ = write!(body, ",beta_{i}");
    }
    body.push('\n');
    for (rank, r) in results.iter().enumerate() {
        let _ = write!(body, "{},{}", rank + 1, r.score);
        for b in &r.betas {
            let _ = write!(body, ",{b:e}");
        }
        body.push('\n');
    }
    csv(fingerprint, &body)
}

pub fn run(args: Args) -> Result<()> {
    let dir = crate::checkpoint_path(args.checkpoint);
    let vocoder =
        Vocoder::load(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    if !vocoder.is_continuous() {
        return Err(Error::IncompatibleSchedule(format!(
            "{} was trained in discrete mode and only samples with its own schedule; sweeping requires a continuous-mode checkpoint",
            dir.display()
        ))
        .into());
    }
    let fixed = args
        .candidates
        .iter()
        .map(|c| {
            kv::parse_list::<f64>(c)
                .map_err(|e| Error::InvalidArgument(format!("candidate `{c}`: {e}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let spec = SweepSpec {
        iterations: fixed.first().map_or(args.iterations, Vec::len),
        non_decreasing: !args.allow_decreasing,
        budget: args.budget,
        refine_rounds: args.refine_rounds,
        seed: args.seed,
        fixed,
        ..SweepSpec::default()
    };
    let vdir = crate::data_path(args.validation);
    let waves = read_wav_dir(&vdir)
        .with_context(|| format!("reading validation set {}", vdir.display()))?
        .into_iter()
        .map(|(_, w)| w)
        .collect();
    let mut set = ValidationSet::new(waves, &vocoder.meta.mel, args.synth_seed)
        .with_context(|| format!("validation set {}", vdir.display()))?;
    set.clamp = args.clamp;
    info!("scoring on {} validation utterances", set.len());
    let results = run_sweep(&spec, |s| set.ls_mse(&vocoder, s))?;

    let fp = provenance(&[
        &vocoder.meta.fingerprint(),
        &format!("{spec:?}"),
        &args.synth_seed.to_string(),
        &format!("{:?}", args.clamp),
    ]);
    emit(args.out.as_deref(), &report(&results, &fp))?;
    if let Some(best) = results.first() {
        info!(
            "best of {} candidates: LS-MSE {:.4} with {:?}",
            results.len(),
            best.score,
            best.betas
        );
    }
    Ok(())
}
