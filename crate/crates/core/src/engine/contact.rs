//! Rendezvous files of the stream engine.
//!
//! The leading writer publishes its control endpoint in a note next to
//! the contact path so the other writer ranks can join. Once the whole
//! writer group has joined, the leader writes the [`ContactDocument`]
//! that readers wait for. Both files are written to a temporary name and
//! renamed into place.

use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::EngineError;

pub const CONTACT_VERSION: u32 = 1;
const POLL: Duration = Duration::from_millis(10);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriterContact {
    pub rank: usize,
    pub hostname: String,
    pub data_endpoint: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContactDocument {
    pub version: u32,
    pub series: String,
    pub writer_group_size: usize,
    /// One entry per writer rank, ordered by rank.
    pub writers: Vec<WriterContact>,
    pub control_endpoint: String,
}

impl ContactDocument {
    pub fn check(&self) -> Result<(), EngineError> {
        if self.version != CONTACT_VERSION {
            return Err(EngineError::VersionMismatch {
                found: self.version,
                expected: CONTACT_VERSION,
            });
        }
        let contiguous = self.writers.len() == self.writer_group_size
            && self.writers.iter().enumerate().all(|(i, w)| w.rank == i);
        if !contiguous {
            return Err(EngineError::Protocol("contact document writer ranks are not contiguous".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub(crate) struct LeaderNote {
    pub version: u32,
    pub control_endpoint: String,
}

pub(crate) fn leader_note_path(contact: &Path) -> PathBuf {
    let mut s = contact.as_os_str().to_owned();
    s.push(".leader");
    PathBuf::from(s)
}

pub fn write_atomic<T: Serialize>(path: &Path, doc: &T) -> Result<(), EngineError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, serde_json::to_vec_pretty(doc).expect("contact serializes"))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, EngineError> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| EngineError::Protocol(format!("{}: {e}", path.display())))
}

/// Polls for a rendezvous file until it can be parsed or `timeout` passes.
pub fn wait_for<T: DeserializeOwned>(path: &Path, timeout: Duration) -> Result<T, EngineError> {
    let deadline = Instant::now() + timeout;
    loop {
        if path.exists() {
            return read_json(path);
        }
        if Instant::now() >= deadline {
            return Err(EngineError::RendezvousTimeout(path.to_owned()));
        }
        thread::sleep(POLL);
    }
}

pub fn wait_for_contact(path: &Path, timeout: Duration) -> Result<ContactDocument, EngineError> {
    let doc: ContactDocument = wait_for(path, timeout)?;
    doc.check()?;
    Ok(doc)
}
