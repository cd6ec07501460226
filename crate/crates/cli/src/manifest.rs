//! Run manifests: every subcommand records its flags, seed, input/output
//! digests and wall time next to its primary output.

use std::path::{Path, PathBuf};
use std::time::Instant;

use gridmend_core::{Error, Result};
use sha2::{Digest, Sha256};

pub struct Manifest {
    subcommand: String,
    argv: String,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

fn hex(digest: impl IntoIterator<Item = u8>) -> String {
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{:02x}", b));
    }
    out
}

/// File digest; directories digest their sorted (name, file-digest) listing.
fn sha256_hex(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            // .manifest files are run metadata, not data
            .filter(|p| {
                p.is_file() && p.extension().map(|x| x != "manifest").unwrap_or(true)
            })
            .collect();
        entries.sort();
        let mut hasher = Sha256::new();
        for p in entries {
            hasher.update(p.file_name().unwrap_or_default().as_encoded_bytes());
            hasher.update(sha256_hex(&p)?.as_bytes());
        }
        return Ok(hex(hasher.finalize()));
    }
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))?;
    Ok(hex(Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn new(subcommand: &str, argv: &[String], started: Instant) -> Self {
        Manifest {
            subcommand: subcommand.to_string(),
            argv: argv.join(" "),
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started,
        }
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.seed = Some(seed);
        self
    }

    pub fn input(&mut self, path: &Path) -> &mut Self {
        self.inputs.push(path.to_path_buf());
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.to_path_buf());
        self
    }

    /// Write `<primary output>.manifest`. Digests are stable across reruns;
    /// only `wall_ms` varies.
    pub fn write(&self) -> Result<()> {
        let primary = self
            .outputs
            .first()
            .ok_or_else(|| Error::Contract("manifest without outputs".into()))?;
        let mut text = String::new();
        text.push_str(&format!("subcommand={}\n", self.subcommand));
        text.push_str(&format!("argv={}\n", self.argv));
        if let Some(seed) = self.seed {
            text.push_str(&format!("seed={}\n", seed));
        }
        for p in &self.inputs {
            text.push_str(&format!("input.{}={}\n", p.display(), sha256_hex(p)?));
        }
        for p in &self.outputs {
            text.push_str(&format!("output.{}={}\n", p.display(), sha256_hex(p)?));
        }
        text.push_str(&format!("wall_ms={}\n", self.started.elapsed().as_millis()));
        let mut path = primary.as_os_str().to_owned();
        path.push(".manifest");
        std::fs::write(PathBuf::from(path), text)?;
        Ok(())
    }
}
