use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::module::MAModule;
use crate::checkpoint::{Checkpoint, FORMAT_VERSION};
use crate::error::{ensure, DormError, Result};
use crate::nn::Parameters;

pub const BANK_FILE: &str = "bank.json";

#[derive(Serialize, Deserialize)]
struct BankIndex {
    format_version: u32,
    source_hash: String,
    domains: Vec<BankEntry>,
}

#[derive(Serialize, Deserialize)]
struct BankEntry {
    name: String,
    file: String,
    default_alpha: f32,
    module_hash: String,
}

/// Named collection of modules that all target the same source generator.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DomainBank {
    source_hash: String,
    modules: BTreeMap<String, MAModule>,
}

impl DomainBank {
    pub fn new(source_hash: impl Into<String>) -> Self {
        Self {
            source_hash: source_hash.into(),
            modules: BTreeMap::new(),
        }
    }

    pub fn source_hash(&self) -> &str {
        &self.source_hash
    }

    /// Add a module; names must be unique and the module must target this bank's source.
    pub fn insert(&mut self, module: MAModule) -> Result<()> {
        if module.provenance.source_hash != self.source_hash {
            return Err(DormError::IncompatibleCheckpoint(format!(
                "module `{}` targets a different source generator",
                module.domain_name
            )));
        }
        ensure!(!module.domain_name.is_empty(), "domain name must not be empty");
        ensure!(
            !self.modules.contains_key(&module.domain_name),
            "domain `{}` is already in the bank",
            module.domain_name
        );
        self.modules.insert(module.domain_name.clone(), module);
        Ok(())
    }

    /// Insert or overwrite.
    pub fn replace(&mut self, module: MAModule) -> Result<()> {
        self.modules.remove(&module.domain_name);
        self.insert(module)
    }

    pub fn get(&self, name: &str) -> Option<&MAModule> {
        self.modules.get(name)
    }

    /// Sorted domain names.
    pub fn names(&self) -> Vec<&str> {
        self.modules.keys().map(String::as_str).collect()
    }

    pub fn modules(&self) -> impl Iterator<Item = &MAModule> {
        self.modules.values()
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    /// Hash over the source hash and every module's name and parameters.
    pub fn bank_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.source_hash.as_bytes());
        for (name, m) in &self.modules {
            h.update(name.as_bytes());
            h.update(m.default_alpha.to_le_bytes());
            h.update(m.content_hash().as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Write `bank.json` plus one checkpoint per module into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut domains = Vec::new();
        for (i, (name, m)) in self.modules.iter().enumerate() {
            let file = format!("module_{i:03}.{}", crate::checkpoint::EXTENSION);
            m.to_checkpoint().save(&dir.join(&file))?;
            domains.push(BankEntry {
                name: name.clone(),
                file,
                default_alpha: m.default_alpha,
                module_hash: m.content_hash(),
            });
        }
        let index = BankIndex {
            format_version: FORMAT_VERSION,
            source_hash: self.source_hash.clone(),
            domains,
        };
        std::fs::write(dir.join(BANK_FILE), serde_json::to_vec_pretty(&index)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join(BANK_FILE);
        let raw = std::fs::read(&index_path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                DormError::NotFound(format!("domain bank {}", index_path.display()))
            }
            _ => DormError::Io(e),
        })?;
        let index: BankIndex = serde_json::from_slice(&raw)
            .map_err(|e| DormError::CorruptCheckpoint(format!("{}: {e}", index_path.display())))?;
        if index.format_version != FORMAT_VERSION {
            return Err(DormError::VersionMismatch {
                found: index.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let mut bank = Self::new(index.source_hash);
        for entry in index.domains {
            ensure!(
                !entry.file.contains(['/', '\\']) && entry.file != "..",
                "bank entry `{}` points outside the bank directory",
                entry.name
            );
            let ckpt = Checkpoint::load(&dir.join(&entry.file))?;
            let mut module = MAModule::from_checkpoint(&ckpt)?;
            if module.domain_name != entry.name {
                return Err(DormError::CorruptCheckpoint(format!(
                    "file {} holds domain `{}`, index says `{}`",
                    entry.file, module.domain_name, entry.name
                )));
            }
            if module.content_hash() != entry.module_hash {
                return Err(DormError::Checksum(format!("module `{}`", entry.name)));
            }
            module.default_alpha = entry.default_alpha;
            bank.insert(module)?;
        }
        Ok(bank)
    }

    /// Total bytes of the module checkpoints as they would be written.
    pub fn storage_bytes(&self) -> Result<usize> {
        self.modules
            .values()
            .map(|m| Ok(m.to_checkpoint().to_bytes()?.len()))
            .sum()
    }
}
