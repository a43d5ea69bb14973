use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};

/// Digest over the given configuration fragments.
pub fn provenance(parts: &[&str]) -> String {
    wavegrad::fingerprint(&parts.join("\n"))
}

/// Prefixes CSV `body` (header included) with the fingerprint comment line.
pub fn csv(fingerprint: &str, body: &str) -> String {
    format!("# fingerprint={fingerprint}\n{body}")
}

/// Writes `text` to `path`, or to stdout when no path is given.
pub fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)
                    .with_context(|| format!("creating {}", dir.display()))?;
            }
            std::fs::write(p, text).map_err(|source| wavegrad::Error::Io {
                path: p.to_path_buf(),
                source,
            })?;
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
        }
    }
    Ok(())
}
