//! Run directories and the manifest written beside their outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use srpo_core::config::Config;

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA: &str = "srpo-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const SUMMARY_FILE: &str = "summary.txt";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub version: u32,
    pub tool_version: String,
    pub subcommand: String,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    pub config: Config,
    /// Inputs by role (`data`, `corpus`, `model`, ...).
    pub inputs: BTreeMap<String, InputDigest>,
    /// Output file name to SHA-256.
    pub artifacts: BTreeMap<String, String>,
    /// File holding plot-ready series, when the run produced one.
    pub plot_data: Option<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Collects outputs for one run and writes its manifest last.
pub struct RunDir {
    dir: PathBuf,
    manifest: RunManifest,
}

impl RunDir {
    pub fn create(dir: &Path, subcommand: &str, argv: Vec<String>, config: &Config, seed: Option<u64>) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let mut run = Self {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                schema: MANIFEST_SCHEMA.into(),
                version: MANIFEST_VERSION,
                tool_version: env!("CARGO_PKG_VERSION").into(),
                subcommand: subcommand.into(),
                argv,
                seed,
                config: config.clone(),
                inputs: BTreeMap::new(),
                artifacts: BTreeMap::new(),
                plot_data: None,
                started_unix: now(),
                finished_unix: 0,
            },
        };
        run.write(CONFIG_FILE, config.to_toml())?;
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        let sha256 = file_sha256(path)?;
        self.manifest.inputs.insert(
            role.into(),
            InputDigest {
                path: path.display().to_string(),
                sha256,
            },
        );
        Ok(())
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, contents.as_ref()).map_err(|e| CliError::io(&path, e))?;
        self.manifest.artifacts.insert(name.into(), sha256_hex(contents.as_ref()));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).expect("report serializes");
        text.push('\n');
        self.write(name, text)
    }

    /// Records a file another writer already produced in the run directory.
    pub fn adopt(&mut self, name: &str) -> Result<()> {
        let sha = file_sha256(&self.path(name))?;
        self.manifest.artifacts.insert(name.into(), sha);
        Ok(())
    }

    pub fn plot_data(&mut self, name: &str) {
        self.manifest.plot_data = Some(name.into());
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.finished_unix = now();
        let path = self.path(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(self.manifest)
    }
}

/// Reads a manifest and checks every recorded artifact against its digest.
pub fn read_verified(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        let listing = fs::read_dir(dir)
            .map(|rd| {
                let mut names: Vec<String> = rd.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect();
                names.sort();
                names
            })
            .unwrap_or_default();
        return Err(CliError::data(format!(
            "{} is not a run directory: expected {MANIFEST_FILE}, {SUMMARY_FILE} and {CONFIG_FILE} plus the outputs listed in the manifest (found: {})",
            dir.display(),
            if listing.is_empty() { "nothing".to_string() } else { listing.join(", ") }
        )));
    }
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let manifest: RunManifest =
        serde_json::from_str(&text).map_err(|e| CliError::data(format!("corrupt manifest {}: {e}", path.display())))?;
    if manifest.schema != MANIFEST_SCHEMA || manifest.version != MANIFEST_VERSION {
        return Err(CliError::data(format!(
            "manifest schema {} v{} is not supported (expected {MANIFEST_SCHEMA} v{MANIFEST_VERSION})",
            manifest.schema, manifest.version
        )));
    }
    for (name, expected) in &manifest.artifacts {
        let p = dir.join(name);
        if !p.is_file() {
            return Err(CliError::data(format!("integrity error: artifact {name} is missing")));
        }
        let found = file_sha256(&p)?;
        if &found != expected {
            return Err(CliError::data(format!(
                "integrity error: {name} has checksum {found}, manifest records {expected}"
            )));
        }
    }
    Ok(manifest)
}
