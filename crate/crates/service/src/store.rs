//! Crash-safe JSON file store: one file per (kind, id), written through a
//! temp file and an atomic rename.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STORE_SCHEMA_VERSION: u32 = 1;

/// Environment variable naming the store root.
pub const ENV_DATA_DIR: &str = "GATE_DATA_DIR";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("corrupt record {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("record {path} has schema version {found}, expected {expected}")]
    VersionMismatch { path: PathBuf, found: u32, expected: u32 },
    #[error("invalid record id `{0}`")]
    InvalidId(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Session,
    Predictions,
    Report,
}

impl RecordKind {
    pub fn dir_name(self) -> &'static str {
        match self {
            RecordKind::Session => "sessions",
            RecordKind::Predictions => "predictions",
            RecordKind::Report => "reports",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreRecord<T> {
    pub schema_version: u32,
    pub kind: RecordKind,
    pub id: String,
    pub revision: u64,
    pub payload: T,
}

#[derive(Debug, Deserialize)]
struct Header {
    schema_version: u32,
    revision: u64,
}

#[derive(Debug, Clone)]
pub struct FileStore {
    root: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn check_id(id: &str) -> Result<(), StoreError> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == ':' || c == '.')
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidId(id.to_string()))
    }
}

impl FileStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, kind: RecordKind, id: &str) -> Result<PathBuf, StoreError> {
        check_id(id)?;
        Ok(self.root.join(kind.dir_name()).join(format!("{id}.json")))
    }

    /// Current revision, or 0 when absent. A corrupt file counts as absent
    /// so a fresh write can replace it.
    fn current_revision(&self, path: &Path) -> u64 {
        fs::read(path)
            .ok()
            .and_then(|bytes| serde_json::from_slice::<Header>(&bytes).ok())
            .map_or(0, |h| h.revision)
    }

    /// Writes `payload` as the next revision of (kind, id). Callers must
    /// serialize writes per key.
    pub fn put<T: Serialize>(&self, kind: RecordKind, id: &str, payload: &T) -> Result<u64, StoreError> {
        let path = self.path(kind, id)?;
        let dir = path.parent().expect("record path has a parent");
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let record = StoreRecord {
            schema_version: STORE_SCHEMA_VERSION,
            kind,
            id: id.to_string(),
            revision: self.current_revision(&path) + 1,
            payload,
        };
        let bytes = serde_json::to_vec_pretty(&record).map_err(|e| StoreError::Corrupt {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
        tmp.write_all(&bytes).map_err(io_err(&path))?;
        tmp.as_file().sync_all().map_err(io_err(&path))?;
        tmp.persist(&path).map_err(|e| StoreError::Io {
            path: path.clone(),
            source: e.error,
        })?;
        Ok(record.revision)
    }

    pub fn get<T: DeserializeOwned>(&self, kind: RecordKind, id: &str) -> Result<Option<StoreRecord<T>>, StoreError> {
        let path = self.path(kind, id)?;
        let bytes = match fs::read(&path) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&path)(e)),
        };
        Self::decode(&path, &bytes).map(Some)
    }

    fn decode<T: DeserializeOwned>(path: &Path, bytes: &[u8]) -> Result<StoreRecord<T>, StoreError> {
        let corrupt = |e: serde_json::Error| StoreError::Corrupt {
            path: path.to_path_buf(),
            reason: e.to_string(),
        };
        let header: Header = serde_json::from_slice(bytes).map_err(corrupt)?;
        if header.schema_version != STORE_SCHEMA_VERSION {
            return Err(StoreError::VersionMismatch {
                path: path.to_path_buf(),
                found: header.schema_version,
                expected: STORE_SCHEMA_VERSION,
            });
        }
        serde_json::from_slice(bytes).map_err(corrupt)
    }

    /// Ids present for `kind`, sorted.
    pub fn list(&self, kind: RecordKind) -> Result<Vec<String>, StoreError> {
        let dir = self.root.join(kind.dir_name());
        let entries = match fs::read_dir(&dir) {
            Ok(entries) => entries,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&dir)(e)),
        };
        let mut ids = Vec::new();
        for entry in entries {
            let entry = entry.map_err(io_err(&dir))?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if let Some(id) = name.strip_suffix(".json") {
                if check_id(id).is_ok() {
                    ids.push(id.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn delete(&self, kind: RecordKind, id: &str) -> Result<(), StoreError> {
        let path = self.path(kind, id)?;
        match fs::remove_file(&path) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(io_err(&path)(e)),
            _ => Ok(()),
        }
    }
}
