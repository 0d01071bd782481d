//! `manifest.json`: every artifact under the output directory with its
//! SHA-256. Paths are relative and sorted; nothing time-dependent is stored.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    pub fn scan(root: &Path) -> Result<Self> {
        let mut files = BTreeMap::new();
        for entry in WalkDir::new(root).sort_by_file_name() {
            let entry = entry.map_err(|e| CliError::new(crate::error::Kind::Io, e.to_string()))?;
            if !entry.file_type().is_file() {
                continue;
            }
            let rel = entry.path().strip_prefix(root).expect("walk stays under root");
            if rel == Path::new(MANIFEST) {
                continue;
            }
            let bytes = fs::read(entry.path()).map_err(|e| CliError::io(entry.path(), e))?;
            let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            files.insert(key, sha256_hex(&bytes));
        }
        Ok(Self { files })
    }

    /// Rescans `root` and rewrites its manifest.
    pub fn refresh(root: &Path) -> Result<Self> {
        let m = Self::scan(root)?;
        let path = root.join(MANIFEST);
        let body = serde_json::to_string_pretty(&m).expect("manifest serializes");
        fs::write(&path, body).map_err(|e| CliError::io(&path, e))?;
        Ok(m)
    }
}
