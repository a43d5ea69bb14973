use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use wavegrad::dsp::{wav_read, wav_write};
use wavegrad::{
    parse_schedule_spec, synthesize, MelExtractor, MelSpectrogram, NoiseSchedule, SigmaRule,
    SynthRequest, Vocoder, Waveform,
};

use crate::output::{csv, emit, provenance};

pub const INTERMEDIATES: &str = "intermediates.csv";

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Conditioning: a `.wav` (its mel is extracted) or a mel matrix file.
    #[arg(long)]
    input: PathBuf,
    /// Schedule preset or spec; defaults to the checkpoint's own schedule
    /// in discrete mode and to `linear-50` otherwise.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output WAV path.
    #[arg(long)]
    out: PathBuf,
    /// Directory receiving every iterate `y_N .. y_0` as CSV columns.
    #[arg(long)]
    emit_intermediates: Option<PathBuf>,
    /// Noise scale of each reverse step: `posterior` or `beta`.
    #[arg(long, default_value = "posterior")]
    sigma: SigmaRule,
    /// Clip every iterate to `[-c, c]`.
    #[arg(long)]
    clamp: Option<f64>,
}

pub fn conditioning(vocoder: &Vocoder, input: &Path) -> Result<MelSpectrogram> {
    let is_wav = input
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    if is_wav {
        let y = wav_read(input)?;
        Ok(MelExtractor::new(&vocoder.meta.mel)?
            .compute(&y)
            .with_context(|| format!("extracting mel from {}", input.display()))?)
    } else {
        Ok(MelSpectrogram::read(input)?)
    }
}

pub fn schedule_for(vocoder: &Vocoder, spec: Option<&str>) -> Result<NoiseSchedule> {
    Ok(match (spec, vocoder.meta.train.conditioning.binding()) {
        (Some(s), _) => parse_schedule_spec(s)?,
        (None, Some(bound)) => bound.clone(),
        (None, None) => parse_schedule_spec("linear-50")?,
    })
}

pub fn run(args: Args) -> Result<()> {
    let dir = crate::checkpoint_path(args.checkpoint);
    let vocoder =
        Vocoder::load(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    let mel = conditioning(&vocoder, &args.input)?;
    let schedule = schedule_for(&vocoder, args.schedule.as_deref())?;
    let mut req = SynthRequest::new(&mel, &schedule, args.seed);
    req.sigma_rule = args.sigma;
    req.clamp = args.clamp;
    req.emit_intermediates = args.emit_intermediates.is_some();
    let out = synthesize(&vocoder, &req)?;

    let y = Waveform::new(out.waveform, vocoder.meta.mel.sample_rate)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    wav_write(&args.out, &y)?;

    if let Some(idir) = &args.emit_intermediates {
        let n = schedule.len();
        let mut body = String::from("index");
        for k in (0..=n).rev() {
            let _ = write!(body, ",y_{k}");
        }
        body.push('\n');
        for i in 0..y.len() {
            let _ = write!(body, "{i}");
            for signal in &out.intermediates {
                let _ = write!(body, ",{}", signal[i]);
            }
            body.push('\n');
        }
        let fp = provenance(&[
            &vocoder.meta.fingerprint(),
            &schedule.to_text(),
            &args.seed.to_string(),
            args.sigma.name(),
        ]);
        emit(Some(&idir.join(INTERMEDIATES)), &csv(&fp, &body))?;
    }
    info!(
        "{} frames -> {} samples with `{}` ({} steps), seed {}",
        mel.frames(),
        y.len(),
        schedule.describe(),
        schedule.len(),
        args.seed
    );
    println!("wrote {}", args.out.display());
    Ok(())
}
