//! Durable state: a content-addressed artifact directory and the append-only
//! decision log.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xedge_core::augment::{DecisionAction, SampleId};

use crate::ServiceError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Files named by the SHA-256 of their content.
#[derive(Debug, Clone)]
pub struct ArtifactStore {
    dir: PathBuf,
}

impl ArtifactStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| ServiceError::storage(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Stores `bytes` and returns their digest. Existing content is left untouched.
    pub fn put(&self, bytes: &[u8]) -> Result<String, ServiceError> {
        let digest = sha256_hex(bytes);
        let path = self.dir.join(&digest);
        if !path.exists() {
            let tmp = self.dir.join(format!(".{digest}.tmp{}", std::process::id()));
            std::fs::write(&tmp, bytes).map_err(|e| ServiceError::storage(&tmp, e))?;
            std::fs::rename(&tmp, &path).map_err(|e| ServiceError::storage(&path, e))?;
        }
        Ok(digest)
    }

    pub fn get(&self, digest: &str) -> Result<Vec<u8>, ServiceError> {
        if digest.len() != 64 || !digest.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(ServiceError::NotFound(format!("artifact {digest}")));
        }
        std::fs::read(self.dir.join(digest)).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ServiceError::NotFound(format!("artifact {digest}")),
            _ => ServiceError::storage(&self.dir.join(digest), e),
        })
    }

    pub fn contains(&self, digest: &str) -> bool {
        self.dir.join(digest).is_file()
    }
}

/// Media type guessed from the leading bytes.
pub fn sniff_media_type(bytes: &[u8]) -> &'static str {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        "image/png"
    } else if bytes.first().is_some_and(|b| *b == b'{' || *b == b'[') {
        "application/json"
    } else {
        "application/octet-stream"
    }
}

pub const GENESIS_DIGEST: &str = "0000000000000000000000000000000000000000000000000000000000000000";

/// Fields covered by an entry's chained digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntryBody {
    pub index: u64,
    pub decision_id: String,
    pub sample: SampleId,
    pub decision: DecisionAction,
    pub author: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_token: Option<String>,
    pub timestamp: String,
    pub prev: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    #[serde(flatten)]
    pub body: LogEntryBody,
    pub digest: String,
}

fn entry_digest(body: &LogEntryBody) -> String {
    sha256_hex(&serde_json::to_vec(body).expect("log entry serializes"))
}

/// Append-only JSONL decision log. Each entry's digest covers its body,
/// including the previous entry's digest.
#[derive(Debug)]
pub struct DecisionLog {
    path: PathBuf,
    entries: Vec<LogEntry>,
}

impl DecisionLog {
    /// Loads and verifies the chain; a missing file is an empty log.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let path = path.into();
        let mut entries = Vec::new();
        match File::open(&path) {
            Ok(f) => {
                for (n, line) in BufReader::new(f).lines().enumerate() {
                    let line = line.map_err(|e| ServiceError::storage(&path, e))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let entry: LogEntry = serde_json::from_str(&line)
                        .map_err(|e| ServiceError::Corrupt(format!("{} line {}: {e}", path.display(), n + 1)))?;
                    let prev = entries.last().map_or(GENESIS_DIGEST, |e: &LogEntry| e.digest.as_str());
                    if entry.body.prev != prev || entry.body.index != entries.len() as u64 || entry_digest(&entry.body) != entry.digest {
                        return Err(ServiceError::Corrupt(format!("{} line {}: broken chain", path.display(), n + 1)));
                    }
                    entries.push(entry);
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(ServiceError::storage(&path, e)),
        }
        Ok(Self { path, entries })
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn head(&self) -> &str {
        self.entries.last().map_or(GENESIS_DIGEST, |e| e.digest.as_str())
    }

    pub fn find_token(&self, token: &str) -> Option<&LogEntry> {
        self.entries.iter().find(|e| e.body.client_token.as_deref() == Some(token))
    }

    /// Appends and syncs one entry. Fields other than the chain are taken from `body`.
    pub fn append(&mut self, mut body: LogEntryBody) -> Result<&LogEntry, ServiceError> {
        body.index = self.entries.len() as u64;
        body.prev = self.head().to_string();
        let entry = LogEntry { digest: entry_digest(&body), body };
        let mut line = serde_json::to_vec(&entry).expect("log entry serializes");
        line.push(b'\n');
        if let Some(parent) = self.path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| ServiceError::storage(parent, e))?;
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| ServiceError::storage(&self.path, e))?;
        f.write_all(&line).map_err(|e| ServiceError::storage(&self.path, e))?;
        f.sync_data().map_err(|e| ServiceError::storage(&self.path, e))?;
        self.entries.push(entry);
        Ok(self.entries.last().expect("just pushed"))
    }
}
