//! Run manifests: enough to re-execute a command and reproduce its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::failure::{CliResult, Context, Failure};

pub const MANIFEST_FILE: &str = "run.json";

/// Written before a command starts its work. Contains no timestamps or host
/// details so that repeated runs produce identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Arguments after the program name; `wormloc rerun` replays them.
    pub argv: Vec<String>,
    /// Fully resolved configuration after defaults, file and flags.
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String], config: serde_json::Value, seeds: Vec<u64>, outputs: Vec<String>) -> Self {
        Self {
            tool: env!("CARGO_BIN_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            argv: argv.to_vec(),
            config,
            seeds,
            outputs,
        }
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).context(format!("creating {}", dir.display()))?;
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).context(format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).context(format!("reading {}", path.display()))?;
        serde_json::from_str(&text).context(format!("parsing {}", path.display()))
    }
}

/// Manifest path for a single-file output: `fig.svg` → `fig.run.json`.
pub fn sidecar(output: &Path) -> PathBuf {
    output.with_extension(MANIFEST_FILE)
}

pub fn display(p: &Path) -> String {
    p.display().to_string()
}

fn normalized(p: &Path) -> PathBuf {
    let abs = if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
    };
    // resolve symlinks and `..` for existing prefixes
    let mut existing = abs.clone();
    let mut rest = Vec::new();
    while !existing.exists() {
        match (existing.file_name().map(|n| n.to_os_string()), existing.parent()) {
            (Some(name), Some(parent)) => {
                rest.push(name);
                existing = parent.to_path_buf();
            }
            _ => return abs,
        }
    }
    let mut out = existing.canonicalize().unwrap_or(existing);
    for name in rest.into_iter().rev() {
        out.push(name);
    }
    out
}

/// Refuses to write `output` when it is (or lies inside) an input directory
/// or is an input file.
pub fn guard_output(output: &Path, inputs: &[&Path]) -> CliResult<()> {
    let out = normalized(output);
    for input in inputs {
        let inp = normalized(input);
        let clash = if inp.is_dir() { out.starts_with(&inp) } else { out == inp };
        if clash {
            return Err(Failure::usage(format!(
                "output {} would overwrite input {}",
                output.display(),
                input.display()
            )));
        }
    }
    Ok(())
}
