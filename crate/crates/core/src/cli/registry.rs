//! JSON index of trained teachers, keyed by name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, RobError};
use crate::models::checkpoint::{file_digest, sha256_hex};
use crate::models::{CheckpointHeader, EncoderConfig, ModelBundle};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherRegistryEntry {
    pub name: String,
    pub checkpoint: PathBuf,
    /// SHA-256 of the checkpoint file.
    pub checkpoint_digest: String,
    /// Training method that produced the weights.
    pub method: String,
    pub encoder_digest: String,
    pub seed: u64,
    pub steps: u64,
    pub code_version: String,
    pub created_unix: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TeacherRegistry {
    pub teachers: Vec<TeacherRegistryEntry>,
}

pub fn encoder_digest(cfg: &EncoderConfig) -> String {
    sha256_hex(serde_json::to_string(cfg).expect("serializable").as_bytes())
}

impl TeacherRegistry {
    /// A missing file is an empty registry.
    pub fn load(path: &Path) -> Result<TeacherRegistry> {
        if !path.exists() {
            return Ok(TeacherRegistry::default());
        }
        let text = std::fs::read_to_string(path).map_err(|e| RobError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| RobError::Format {
            what: "teacher registry",
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| RobError::io(dir, e))?;
        }
        let tmp = path.with_extension("json.partial");
        let text = serde_json::to_string_pretty(self).expect("serializable") + "\n";
        std::fs::write(&tmp, text).map_err(|e| RobError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| RobError::io(path, e))
    }

    pub fn get(&self, name: &str) -> Option<&TeacherRegistryEntry> {
        self.teachers.iter().find(|e| e.name == name)
    }

    /// Adds `entry`, replacing any entry with the same name.
    pub fn register(&mut self, entry: TeacherRegistryEntry) {
        self.teachers.retain(|e| e.name != entry.name);
        self.teachers.push(entry);
    }

    /// Loads the named teacher after checking both digests.
    pub fn load_teacher(
        &self,
        name: &str,
    ) -> Result<(ModelBundle, CheckpointHeader, &TeacherRegistryEntry)> {
        let entry = self.get(name).ok_or_else(|| {
            let known: Vec<&str> = self.teachers.iter().map(|e| e.name.as_str()).collect();
            RobError::NotFound(format!("teacher {name:?} in registry (known: {known:?})"))
        })?;
        let found = file_digest(&entry.checkpoint)?;
        if found != entry.checkpoint_digest {
            return Err(RobError::Digest {
                what: entry.checkpoint.display().to_string(),
                expected: entry.checkpoint_digest.clone(),
                found,
            });
        }
        let (bundle, header, _) = ModelBundle::load(&entry.checkpoint)?;
        let enc = encoder_digest(&bundle.encoder);
        if enc != entry.encoder_digest {
            return Err(RobError::Digest {
                what: format!("encoder config of teacher {name:?}"),
                expected: entry.encoder_digest.clone(),
                found: enc,
            });
        }
        Ok((bundle.into_teacher(), header, entry))
    }
}
