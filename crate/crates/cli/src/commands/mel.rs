use std::path::PathBuf;

use anyhow::Result;
use wavegrad::dsp::wav_read;
use wavegrad::{MelConfig, MelExtractor, Vocoder};

#[derive(Debug, clap::Args)]
pub struct Args {
    input: PathBuf,
    out: PathBuf,
    /// Take the framing from this checkpoint instead of `--preset`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// `full` or `toy`.
    #[arg(long, default_value = "full")]
    preset: String,
}

pub fn run(args: Args) -> Result<()> {
    let mel = match args.checkpoint {
        Some(c) => Vocoder::load(&crate::checkpoint_path(c))?.meta.mel,
        None => MelConfig::preset(&args.preset)?,
    };
    let m = MelExtractor::new(&mel)?.compute(&wav_read(&args.input)?)?;
    m.write(&args.out)?;
    println!(
        "wrote {} ({} bins x {} frames)",
        args.out.display(),
        m.n_mels(),
        m.frames()
    );
    Ok(())
}
