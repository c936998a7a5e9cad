use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ckd_core::ehr::PhenotypeRegistry;
use ckd_core::model::{Classifier, CONFIG_FILE, WEIGHTS_FILE};
use ckd_core::pipeline::{sha256_hex, PipelineConfig};
use serde::{Deserialize, Serialize};

use crate::args::Command;
use crate::exit::Missing;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to re-execute a command: the resolved subcommand, the
/// full effective config and hashes of what went in and came out. Output
/// paths are relative to the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: Command,
    pub config: String,
    pub config_sha256: String,
    pub seed: u64,
    pub registry: Option<PathBuf>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    /// Wall-clock files; excluded from replay comparison.
    pub timing_outputs: Vec<String>,
    pub versions: BTreeMap<String, String>,
}

pub fn manifest_name(command: &str) -> String {
    format!("manifest.{command}.json")
}

pub struct Run {
    pub out: PathBuf,
    pub cfg: PipelineConfig,
    pub registry: PhenotypeRegistry,
    registry_path: Option<PathBuf>,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
    timing: Vec<String>,
}

impl Run {
    pub fn new(out: PathBuf, cfg: PipelineConfig, registry_path: Option<PathBuf>) -> Result<Self> {
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let mut run = Self {
            out,
            cfg,
            registry: PhenotypeRegistry::default(),
            registry_path: registry_path.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timing: Vec::new(),
        };
        if let Some(p) = registry_path {
            let text = run.read_text(&p)?;
            run.registry = PhenotypeRegistry::parse(&text).with_context(|| format!("registry {}", p.display()))?;
        }
        Ok(run)
    }

    /// Reads and records an input file; a missing file is [`Missing`].
    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        if !path.is_file() {
            return Err(Missing(path.to_path_buf()).into());
        }
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push(FileHash {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(bytes)
    }

    pub fn read_text(&mut self, path: &Path) -> Result<String> {
        String::from_utf8(self.read(path)?).with_context(|| format!("{} is not UTF-8", path.display()))
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        self.put(rel, bytes)?;
        self.outputs.push(FileHash {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn write_timing(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        self.put(rel, bytes)?;
        self.timing.push(rel.to_string());
        Ok(())
    }

    fn put(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
    }

    pub fn save_model(&mut self, dir: &str, model: &Classifier) -> Result<()> {
        self.write(&format!("{dir}/{CONFIG_FILE}"), model.config_text().as_bytes())?;
        self.write(&format!("{dir}/{WEIGHTS_FILE}"), &model.checkpoint_bytes()?)
    }

    pub fn load_model(&mut self, dir: &Path) -> Result<Classifier> {
        // recorded and checked for presence before the loader opens them
        self.read(&dir.join(CONFIG_FILE))?;
        self.read(&dir.join(WEIGHTS_FILE))?;
        Classifier::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
    }

    pub fn finish(self, command: Command) -> Result<Manifest> {
        let config = self.cfg.to_kv().to_string();
        let mut versions = BTreeMap::new();
        versions.insert("ckd".to_string(), env!("CARGO_PKG_VERSION").to_string());
        versions.insert("format".to_string(), "1".to_string());
        let manifest = Manifest {
            command: command.clone(),
            config_sha256: sha256_hex(config.as_bytes()),
            config,
            seed: self.cfg.seed,
            registry: self.registry_path,
            inputs: self.inputs,
            outputs: self.outputs,
            timing_outputs: self.timing,
            versions,
        };
        let path = self.out.join(manifest_name(&command.manifest_key()));
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(manifest)
    }
}
