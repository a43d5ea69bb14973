use std::path::PathBuf;

use anyhow::Result;
use wavegrad::CorpusConfig;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Output directory.
    dir: PathBuf,
    #[arg(long, default_value_t = 16)]
    utterances: usize,
    /// Samples per utterance.
    #[arg(long, default_value_t = 2048)]
    samples: usize,
    #[arg(long, default_value_t = 8000)]
    sample_rate: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Upper bound on the leading and trailing silent fraction.
    #[arg(long)]
    max_silence: Option<f64>,
    /// Index of the first utterance written.
    #[arg(long, default_value_t = 0)]
    first: usize,
}

pub fn run(args: Args) -> Result<()> {
    let base = CorpusConfig::default();
    let cfg = CorpusConfig {
        utterances: args.utterances,
        samples: args.samples,
        sample_rate: args.sample_rate,
        seed: args.seed,
        max_silence: args.max_silence.unwrap_or(base.max_silence),
        ..base
    };
    let dir = crate::data_path(args.dir);
    let paths = cfg.write_range(&dir, args.first..args.first + args.utterances)?;
    println!("wrote {} utterances to {}", paths.len(), dir.display());
    Ok(())
}
