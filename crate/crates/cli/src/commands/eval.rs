use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::warn;
use rayon::prelude::*;
use wavegrad::corpus::read_wav_dir;
use wavegrad::kv::KvDoc;
use wavegrad::{Error, MelConfig, MetricConfig, Scores};

use crate::output::{csv, emit, provenance};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Reference WAV directory.
    ref_dir: PathBuf,
    /// Hypothesis WAV directory; files are matched by name.
    hyp_dir: PathBuf,
    /// Mel framing the metrics derive from: `full`, `toy`, or a config
    /// file (`mel.*` keys, e.g. a checkpoint manifest).
    #[arg(long, default_value = "full")]
    mel: String,
    /// Table path; stdout by default.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn mel_config(spec: &str) -> Result<MelConfig> {
    if let Ok(m) = MelConfig::preset(spec) {
        return Ok(m);
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(Error::InvalidArgument(format!(
            "`{spec}` is neither a mel preset nor a config file"
        ))
        .into());
    }
    let doc = KvDoc::read(path)?;
    let section = doc.section("mel");
    let base = MelConfig::preset(section.get("preset").unwrap_or("full"))?;
    Ok(MelConfig::from_doc(&section, &base)?)
}

pub fn table(rows: &[(String, Scores)], fingerprint: &str) -> String {
    let mut body = String::from("file,ls_mse,mcd,ffe\n");
    for (name, s) in rows {
        let _ = writeln!(body, "{name},{},{},{}", s.ls_mse, s.mcd, s.ffe);
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        let mean = |f: fn(&Scores) -> f64| rows.iter().map(|(_, s)| f(s)).sum::<f64>() / n;
        let _ = writeln!(
            body,
            "mean,{},{},{}",
            mean(|s| s.ls_mse),
            mean(|s| s.mcd),
            mean(|s| s.ffe)
        );
    }
    csv(fingerprint, &body)
}

pub fn run(args: Args) -> Result<()> {
    let mel = mel_config(&args.mel)?;
    let metric = MetricConfig::for_conditioning(&mel);
    let read = |d: &Path| -> Result<BTreeMap<String, wavegrad::Waveform>> {
        Ok(read_wav_dir(d)
            .with_context(|| format!("reading {}", d.display()))?
            .into_iter()
            .collect())
    };
    let refs = read(&args.ref_dir)?;
    let hyps = read(&args.hyp_dir)?;
    let only_ref: Vec<&str> = refs
        .keys()
        .filter(|k| !hyps.contains_key(*k))
        .map(String::as_str)
        .collect();
    let only_hyp: Vec<&str> = hyps
        .keys()
        .filter(|k| !refs.contains_key(*k))
        .map(String::as_str)
        .collect();
    let matched: Vec<(&String, &wavegrad::Waveform, &wavegrad::Waveform)> = refs
        .iter()
        .filter_map(|(k, r)| hyps.get(k).map(|h| (k, r, h)))
        .collect();
    let mismatch = format!(
        "only in {}: [{}]; only in {}: [{}]",
        args.ref_dir.display(),
        only_ref.join(", "),
        args.hyp_dir.display(),
        only_hyp.join(", ")
    );
    if matched.is_empty() {
        return Err(Error::Data(format!("no file names in common; {mismatch}")).into());
    }
    if !only_ref.is_empty() || !only_hyp.is_empty() {
        warn!("unmatched files skipped; {mismatch}");
    }
    let rows = matched
        .par_iter()
        .map(|(name, r, h)| {
            let s = metric
                .evaluate(r, h)
                .with_context(|| format!("scoring {name}"))?;
            Ok(((*name).clone(), s))
        })
        .collect::<Result<Vec<_>>>()?;
    let fp = provenance(&[
        &mel.to_doc().to_text(),
        &format!("{:?}", metric.pitch),
        &metric.n_mfcc.to_string(),
    ]);
    emit(args.out.as_deref(), &table(&rows, &fp))
}
