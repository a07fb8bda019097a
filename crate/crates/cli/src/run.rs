//! Run directories: every command hashes its inputs, derives an output
//! directory from the hash and writes `run.json` before doing any work.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<PathBuf>,
    pub seed: u64,
    /// SHA-256 over the command, its arguments and every input file.
    pub input_hash: String,
    pub output_dir: PathBuf,
    pub args: serde_json::Value,
}

pub struct InputHasher {
    h: Sha256,
}

impl InputHasher {
    pub fn new(command: &str, args: &serde_json::Value) -> Self {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update([0]);
        h.update(args.to_string().as_bytes());
        Self { h }
    }

    /// Mix in a file, or every file under a directory in sorted order.
    pub fn path(&mut self, p: &Path) -> Result<()> {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("reading {}", p.display()))?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            entries.sort();
            for e in entries {
                self.h.update(e.file_name().unwrap_or_default().as_encoded_bytes());
                self.path(&e)?;
            }
        } else {
            let bytes = fs::read(p).map_err(|e| slt_core::Error::io(p, e))?;
            self.h.update((bytes.len() as u64).to_le_bytes());
            self.h.update(&bytes);
        }
        Ok(())
    }

    pub fn finish(self) -> String {
        hex::encode(self.h.finalize())
    }
}

/// Create `<root>/<command>-<hash prefix>` (or `explicit`) and write the
/// manifest into it.
pub fn start(
    root: &Path,
    explicit: Option<&Path>,
    command: &str,
    config: Option<&Path>,
    seed: u64,
    args: serde_json::Value,
    hasher: InputHasher,
) -> Result<RunManifest> {
    let input_hash = hasher.finish();
    let output_dir = match explicit {
        Some(p) => p.to_path_buf(),
        None => root.join(format!("{command}-{}", &input_hash[..16])),
    };
    fs::create_dir_all(&output_dir).map_err(|e| slt_core::Error::io(&output_dir, e))?;
    let manifest = RunManifest {
        command: command.to_string(),
        config: config.map(Path::to_path_buf),
        seed,
        input_hash,
        output_dir: output_dir.clone(),
        args,
    };
    write_json(&output_dir.join("run.json"), &manifest)?;
    log::info!("{command}: writing to {}", output_dir.display());
    Ok(manifest)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| slt_core::Error::io(path, e))?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| slt_core::Error::io(path, e))?;
    Ok(())
}
