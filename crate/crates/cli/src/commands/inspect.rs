use std::path::PathBuf;

use anyhow::Result;
use log::warn;
use wavegrad::dsp::wav_read;
use wavegrad::parse_schedule_spec;
use wavegrad::schedule::{DiagnosticThresholds, ScheduleDiagnostics};

use crate::output::{csv, emit, provenance};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Schedule preset or spec, e.g. `fibonacci-25` or `manual:1e-4,1e-2,0.5`.
    schedule: String,
    /// Reference waveform for the terminal KL check.
    #[arg(long)]
    y0: Option<PathBuf>,
    /// Maximum terminal KL per sample (nats).
    #[arg(long)]
    kl_threshold: Option<f64>,
    /// Maximum admissible first β.
    #[arg(long)]
    beta_threshold: Option<f64>,
    /// Table path; stdout by default.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(args: Args) -> Result<()> {
    let schedule = parse_schedule_spec(&args.schedule)?;
    let defaults = DiagnosticThresholds::default();
    let thresholds = DiagnosticThresholds {
        kl_per_sample: args.kl_threshold.unwrap_or(defaults.kl_per_sample),
        first_beta: args.beta_threshold.unwrap_or(defaults.first_beta),
    };
    let y0 = args.y0.as_deref().map(wav_read).transpose()?;
    let diag =
        ScheduleDiagnostics::compute(&schedule, y0.as_ref().map(|y| y.samples()), thresholds)?;

    let mut text = String::new();
    if let Some(kl) = diag.terminal_kl {
        text.push_str(&format!("# terminal_kl={kl:e}\n"));
    }
    for w in &diag.warnings {
        warn!("{w}");
        text.push_str(&format!("# warning: {w}\n"));
    }
    text.push_str(&diag.to_csv());
    let fp = provenance(&[&schedule.to_text(), &format!("{thresholds:?}")]);
    emit(args.out.as_deref(), &csv(&fp, &text))
}
