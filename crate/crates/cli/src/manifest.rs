//! Run manifests: the resolved configuration followed by artifact
//! checksums as comment lines, so a manifest is itself a valid config.

use std::fmt::Write as _;
use std::path::Path;

use crate::{CliError, Result, RunConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    /// Path relative to the output directory.
    pub name: String,
    pub crc32: u32,
    pub bytes: u64,
}

impl Artifact {
    pub fn of(name: &str, data: &[u8]) -> Self {
        Self {
            name: name.to_string(),
            crc32: crc32fast::hash(data),
            bytes: data.len() as u64,
        }
    }
}

pub fn render(command: &str, config: &RunConfig, artifacts: &[Artifact]) -> String {
    let mut out = format!("# nfem {command} manifest\n");
    out.push_str(&config.echo());
    for key in ["dataset.seed", "dataset.noise_seed", "dataset.split_seed", "model.seed", "train.seed", "eval.seed"] {
        let _ = writeln!(out, "# seed {key} {}", config.text(key));
    }
    for a in artifacts {
        let _ = writeln!(out, "# artifact {} crc32={:08x} bytes={}", a.name, a.crc32, a.bytes);
    }
    out
}

/// Artifact lines of a manifest file.
pub fn read_artifacts(path: &Path) -> Result<Vec<Artifact>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let Some(rest) = line.strip_prefix("# artifact ") else {
            continue;
        };
        let bad = || CliError::config(Some(i + 1), format!("malformed artifact line '{line}'"));
        let mut parts = rest.split(' ');
        let name = parts.next().ok_or_else(bad)?.to_string();
        let crc = parts
            .next()
            .and_then(|s| s.strip_prefix("crc32="))
            .and_then(|s| u32::from_str_radix(s, 16).ok())
            .ok_or_else(bad)?;
        let bytes = parts
            .next()
            .and_then(|s| s.strip_prefix("bytes="))
            .and_then(|s| s.parse().ok())
            .ok_or_else(bad)?;
        out.push(Artifact { name, crc32: crc, bytes });
    }
    Ok(out)
}
