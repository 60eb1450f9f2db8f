//! Output directories with hash-stamped files and a manifest.
//!
//! Every file written through [`OutputDir`] starts with a comment line
//! `# config_hash=<sha256> seed=<seed>`. `manifest.toml` records the SHA-256
//! of each file so [`verify`] can detect edits and mismatched inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.toml";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn of(cfg: &ExperimentConfig) -> Self {
        Provenance { config_hash: sha256_hex(cfg.canonical().as_bytes()), seed: cfg.seed }
    }

    pub fn header(&self) -> String {
        format!("# config_hash={} seed={}\n", self.config_hash, self.seed)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config_hash: String,
    seed: u64,
    files: BTreeMap<String, String>,
}

/// Output directory bound to one configuration.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    prov: Provenance,
    manifest: Manifest,
}

impl OutputDir {
    /// Opens `root`, creating it if needed. An existing manifest written
    /// under a different configuration is an error.
    pub fn open(root: &Path, cfg: &ExperimentConfig) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let prov = Provenance::of(cfg);
        let manifest_path = root.join(MANIFEST);
        let manifest = if manifest_path.exists() {
            let m = read_manifest(root)?;
            if m.config_hash != prov.config_hash {
                return Err(CliError::Provenance(format!(
                    "{} was produced with config hash {}, current config hashes to {}",
                    root.display(),
                    m.config_hash,
                    prov.config_hash
                )));
            }
            m
        } else {
            Manifest { config_hash: prov.config_hash.clone(), seed: prov.seed, files: BTreeMap::new() }
        };
        let mut dir = OutputDir { root: root.to_path_buf(), prov, manifest };
        dir.write(CONFIG_FILE, &cfg.canonical())?;
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn provenance(&self) -> &Provenance {
        &self.prov
    }

    /// Writes `body` under the provenance header and records its hash.
    pub fn write(&mut self, rel: &str, body: &str) -> CliResult<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        let mut text = self.prov.header();
        text.push_str(body);
        fs::write(&path, &text).map_err(|e| CliError::io(&path, e))?;
        self.manifest.files.insert(rel.to_string(), sha256_hex(text.as_bytes()));
        self.save_manifest()
    }

    /// Deletes a stale output left by an earlier run.
    pub fn remove(&mut self, rel: &str) -> CliResult<()> {
        let path = self.root.join(rel);
        if path.exists() {
            fs::remove_file(&path).map_err(|e| CliError::io(&path, e))?;
        }
        if self.manifest.files.remove(rel).is_some() {
            self.save_manifest()?;
        }
        Ok(())
    }

    /// Reads a file previously written under this configuration.
    pub fn read(&self, rel: &str) -> CliResult<String> {
        let path = self.root.join(rel);
        if !path.exists() {
            return Err(CliError::MissingInput(path.display().to_string()));
        }
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        match self.manifest.files.get(rel) {
            Some(h) if *h == sha256_hex(text.as_bytes()) => Ok(text),
            Some(_) => Err(CliError::Provenance(format!("{} does not match its manifest hash", path.display()))),
            None => Err(CliError::Provenance(format!("{} is not listed in the manifest", path.display()))),
        }
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.manifest.files.contains_key(rel)
    }

    fn save_manifest(&self) -> CliResult<()> {
        let path = self.root.join(MANIFEST);
        let text = toml::to_string(&self.manifest).map_err(|e| CliError::Io(e.to_string()))?;
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

fn read_manifest(root: &Path) -> CliResult<Manifest> {
    let path = root.join(MANIFEST);
    if !path.exists() {
        return Err(CliError::MissingInput(path.display().to_string()));
    }
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    toml::from_str(&text).map_err(|e| CliError::Provenance(format!("{}: {e}", path.display())))
}

/// Re-checks every file listed in the manifest of `root`: its hash, its
/// provenance header, and that `config.toml` hashes to the recorded value.
/// Returns the number of files checked.
pub fn verify(root: &Path) -> CliResult<usize> {
    let m = read_manifest(root)?;
    let expected_header = Provenance { config_hash: m.config_hash.clone(), seed: m.seed }.header();
    let mut problems = Vec::new();
    for (rel, hash) in &m.files {
        let path = root.join(rel);
        let Ok(text) = fs::read_to_string(&path) else {
            problems.push(format!("{rel}: missing or unreadable"));
            continue;
        };
        if sha256_hex(text.as_bytes()) != *hash {
            problems.push(format!("{rel}: content hash mismatch"));
        }
        if !text.starts_with(&expected_header) {
            problems.push(format!("{rel}: provenance header mismatch"));
        }
    }
    match m.files.get(CONFIG_FILE) {
        None => problems.push(format!("{CONFIG_FILE}: not listed")),
        Some(_) => {
            let text = fs::read_to_string(root.join(CONFIG_FILE)).unwrap_or_default();
            match ExperimentConfig::from_toml(&text, None) {
                Ok(cfg) if Provenance::of(&cfg).config_hash == m.config_hash => {}
                Ok(_) => problems.push(format!("{CONFIG_FILE}: hashes to a different value than recorded")),
                Err(e) => problems.push(format!("{CONFIG_FILE}: {e}")),
            }
        }
    }
    if problems.is_empty() {
        Ok(m.files.len())
    } else {
        Err(CliError::Provenance(problems.join("; ")))
    }
}
