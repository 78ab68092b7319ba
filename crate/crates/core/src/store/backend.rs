use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use super::records::{ApiCredential, Cluster, Instance, Request, UserAccount};
use crate::cluster::ClusterDefinition;
use crate::context::{Context, MarketplaceEntry};
use crate::error::{Error, Result};
use crate::ids::{ClusterId, ContextId, CredentialId, DefinitionId, InstanceId, RequestId};
use crate::pairing::PairingSession;

/// Everything the store persists.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Tables {
    pub(crate) contexts: BTreeMap<ContextId, Context>,
    pub(crate) market: Vec<MarketplaceEntry>,
    /// Sessions per pin, oldest first.
    pub(crate) pairings: BTreeMap<String, Vec<PairingSession>>,
    pub(crate) definitions: BTreeMap<DefinitionId, ClusterDefinition>,
    pub(crate) clusters: BTreeMap<ClusterId, Cluster>,
    pub(crate) instances: BTreeMap<InstanceId, Instance>,
    pub(crate) requests: BTreeMap<RequestId, Request>,
    /// `"<user>\n<key>"` to the request it created.
    pub(crate) idempotency: BTreeMap<String, RequestId>,
    pub(crate) users: BTreeMap<String, UserAccount>,
    pub(crate) credentials: BTreeMap<CredentialId, ApiCredential>,
    pub(crate) next_seq: u64,
}

impl Tables {
    pub(crate) fn next_seq(&mut self) -> u64 {
        self.next_seq += 1;
        self.next_seq
    }
}

/// Storage behind [`Store`](super::Store). Writes are serializable: the
/// closure runs with exclusive access and its changes become visible together.
/// A closure that returns an error must not have modified the tables.
pub trait Backend: Send + Sync {
    fn read(&self, f: &mut dyn FnMut(&Tables)) -> Result<()>;
    fn write(&self, f: &mut dyn FnMut(&mut Tables) -> Result<()>) -> Result<()>;
}

#[derive(Debug, Default)]
pub struct MemoryBackend {
    tables: RwLock<Tables>,
}

impl MemoryBackend {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Backend for MemoryBackend {
    fn read(&self, f: &mut dyn FnMut(&Tables)) -> Result<()> {
        f(&self.tables.read());
        Ok(())
    }

    fn write(&self, f: &mut dyn FnMut(&mut Tables) -> Result<()>) -> Result<()> {
        f(&mut self.tables.write())
    }
}

/// A single JSON document on disk shared by any number of processes.
///
/// Every operation takes an OS lock on a sibling `.lock` file, reloads the
/// document, and on writes replaces it through a rename.
#[derive(Debug)]
pub struct FileBackend {
    path: PathBuf,
    tmp_path: PathBuf,
    lock: Mutex<File>,
}

impl FileBackend {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(storage)?;
        }
        let lock_path = with_suffix(&path, ".lock");
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .read(true)
            .write(true)
            .open(&lock_path)
            .map_err(storage)?;
        let backend = Self {
            tmp_path: with_suffix(&path, &format!(".tmp.{}", std::process::id())),
            path,
            lock: Mutex::new(lock),
        };
        // Fail early on a corrupt document.
        backend.read(&mut |_| {})?;
        Ok(backend)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn load(&self) -> Result<(Tables, Vec<u8>)> {
        match fs::read(&self.path) {
            Ok(raw) => {
                let tables = serde_json::from_slice(&raw)
                    .map_err(|e| Error::Storage(format!("{}: {e}", self.path.display())))?;
                Ok((tables, raw))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok((Tables::default(), Vec::new())),
            Err(e) => Err(storage(e)),
        }
    }

    fn store(&self, tables: &Tables, previous: &[u8]) -> Result<()> {
        let raw = serde_json::to_vec(tables).map_err(|e| Error::Storage(e.to_string()))?;
        if raw == previous {
            return Ok(());
        }
        let mut tmp = File::create(&self.tmp_path).map_err(storage)?;
        tmp.write_all(&raw).map_err(storage)?;
        tmp.sync_all().map_err(storage)?;
        fs::rename(&self.tmp_path, &self.path).map_err(storage)
    }
}

impl Backend for FileBackend {
    fn read(&self, f: &mut dyn FnMut(&Tables)) -> Result<()> {
        let guard = self.lock.lock();
        guard.lock_shared().map_err(storage)?;
        let loaded = self.load();
        let _ = guard.unlock();
        f(&loaded?.0);
        Ok(())
    }

    fn write(&self, f: &mut dyn FnMut(&mut Tables) -> Result<()>) -> Result<()> {
        let guard = self.lock.lock();
        guard.lock().map_err(storage)?;
        let outcome = self.load().and_then(|(mut tables, raw)| {
            f(&mut tables)?;
            self.store(&tables, &raw)
        });
        let _ = guard.unlock();
        outcome
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn storage(err: std::io::Error) -> Error {
    Error::Storage(err.to_string())
}
