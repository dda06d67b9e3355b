//! `run.json`: the resolved config plus content hashes of every input.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const RUN_FILE: &str = "run.json";

#[derive(Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    argv: Vec<String>,
    tool_version: &'static str,
    config: &'a RunConfig,
    /// sha256 over the sorted `"<sha256> <path>\n"` lines of `inputs`.
    input_hash: String,
    inputs: Vec<InputDigest>,
}

fn collect(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<_> = fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            // Earlier run records inside an input directory are not inputs.
            if e.file_name().is_some_and(|n| n == RUN_FILE) {
                continue;
            }
            collect(&e, out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Digest of a file or directory tree, independent of where it lives.
pub fn tree_hash(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect(root, &mut files)?;
    let mut h = Sha256::new();
    for f in &files {
        let rel = f.strip_prefix(root).unwrap_or(f);
        h.update(format!("{} {}\n", file_digest(f)?, rel.display()));
    }
    Ok(hex::encode(h.finalize()))
}

pub fn write(out_dir: &Path, command: &str, cfg: &RunConfig, inputs: &[&Path]) -> Result<PathBuf> {
    let mut files = Vec::new();
    for p in inputs {
        collect(p, &mut files)?;
    }
    files.sort();
    files.dedup();
    let inputs = files
        .iter()
        .map(|f| Ok(InputDigest { path: f.display().to_string(), sha256: file_digest(f)? }))
        .collect::<Result<Vec<_>>>()?;
    let mut h = Sha256::new();
    for d in &inputs {
        h.update(format!("{} {}\n", d.sha256, d.path));
    }
    let record = RunRecord {
        command,
        argv: std::env::args().collect(),
        tool_version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        input_hash: hex::encode(h.finalize()),
        inputs,
    };
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let path = out_dir.join(RUN_FILE);
    fs::write(&path, serde_json::to_string_pretty(&record)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}
