//! Backend adaptor contracts. A Pilot-Data is backed by a [`StorageBackend`],
//! a Pilot-Compute by a [`Sandbox`]; adaptors are selected by URL scheme.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::topology::AffinityLabel;
use crate::units::{digest_bytes, ComputeUnitDescription, FileEntry, ResourceId};

/// File content as moved between storages and sandboxes.
#[derive(Clone, PartialEq, Eq)]
pub enum Blob {
    Bytes(Vec<u8>),
    /// Size-only content used by the simulator.
    Synthetic { size: u64, digest: String },
}

impl fmt::Debug for Blob {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Blob::Bytes(b) => write!(f, "Bytes({} bytes)", b.len()),
            Blob::Synthetic { size, .. } => write!(f, "Synthetic({size} bytes)"),
        }
    }
}

impl Blob {
    pub fn size(&self) -> u64 {
        match self {
            Blob::Bytes(b) => b.len() as u64,
            Blob::Synthetic { size, .. } => *size,
        }
    }

    pub fn digest(&self) -> String {
        match self {
            Blob::Bytes(b) => digest_bytes(b),
            Blob::Synthetic { digest, .. } => digest.clone(),
        }
    }

    pub fn entry(&self) -> FileEntry {
        FileEntry {
            size: self.size(),
            digest: self.digest(),
        }
    }

    pub fn bytes(&self) -> Option<&[u8]> {
        match self {
            Blob::Bytes(b) => Some(b),
            Blob::Synthetic { .. } => None,
        }
    }
}

/// Faults that tests can inject into a storage backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StorageFault {
    /// Writes succeed but the stored bytes differ from what was sent.
    CorruptWrites,
    /// Every write fails.
    RejectWrites,
}

pub trait StorageBackend: Send + Sync {
    /// Stores one file and returns the entry recomputed from what was stored.
    fn put(&self, du: &ResourceId, rel: &str, blob: &Blob) -> Result<FileEntry>;
    fn get(&self, du: &ResourceId, rel: &str) -> Result<Blob>;
    /// Entry recomputed from the stored content.
    fn entry(&self, du: &ResourceId, rel: &str) -> Result<FileEntry>;
    fn remove_du(&self, du: &ResourceId) -> Result<()>;
    /// Filesystem path of a stored file, when the backend has one.
    fn path_of(&self, du: &ResourceId, rel: &str) -> Option<PathBuf>;
    fn set_fault(&self, fault: Option<StorageFault>);
}

/// Cooperative stop signals for a running CU.
#[derive(Debug, Clone, Default)]
pub struct ExecControl {
    pub cancel: Arc<AtomicBool>,
    pub deadline: Option<Instant>,
}

impl ExecControl {
    pub fn canceled(&self) -> bool {
        self.cancel.load(Ordering::SeqCst)
    }

    pub fn expired(&self) -> bool {
        self.deadline.is_some_and(|d| Instant::now() >= d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interrupt {
    Canceled,
    Walltime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecOutcome {
    pub success: bool,
    /// Wall seconds for real runs; the nominal duration for synthetic runs.
    pub seconds: f64,
    pub diagnostics: Option<String>,
    pub interrupted: Option<Interrupt>,
}

/// Per-pilot working area: one directory per CU plus a shared `_pilot` area.
pub trait Sandbox: Send + Sync {
    fn root(&self) -> &Path;
    /// Creates the CU directory; idempotent.
    fn prepare(&self, cu: &ResourceId) -> Result<()>;
    /// Makes a stored file visible without copying when the backend allows it.
    fn link_input(
        &self,
        cu: &ResourceId,
        rel: &str,
        storage: &dyn StorageBackend,
        du: &ResourceId,
    ) -> Result<()>;
    fn copy_input(&self, cu: &ResourceId, rel: &str, blob: &Blob) -> Result<()>;
    /// Entry of a file present in the CU directory.
    fn file_entry(&self, cu: &ResourceId, rel: &str) -> Result<FileEntry>;
    fn execute(
        &self,
        cu: &ResourceId,
        desc: &ComputeUnitDescription,
        ctl: &ExecControl,
    ) -> Result<ExecOutcome>;
    /// Files created by the CU whose names match `pattern`, excluding `exclude`.
    fn collect_outputs(
        &self,
        cu: &ResourceId,
        pattern: &glob::Pattern,
        exclude: &BTreeSet<String>,
    ) -> Result<Vec<(String, Blob)>>;
    fn read_file(&self, cu: &ResourceId, rel: &str) -> Result<Blob>;
}

/// Address part of a `scheme://address` service URL.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceUrl {
    pub scheme: String,
    pub address: String,
}

impl ServiceUrl {
    pub fn parse(url: &str) -> Result<Self> {
        let (scheme, address) = url
            .split_once("://")
            .ok_or_else(|| Error::validation(format!("service url {url:?} has no scheme")))?;
        if scheme.is_empty() {
            return Err(Error::validation(format!("service url {url:?} has no scheme")));
        }
        Ok(ServiceUrl {
            scheme: scheme.to_owned(),
            address: address.to_owned(),
        })
    }
}

/// What an adaptor needs to bring up a pilot.
pub struct PilotTarget<'a> {
    pub url: &'a ServiceUrl,
    pub local_name: &'a str,
    pub affinity: &'a AffinityLabel,
}

pub trait Adaptor: Send + Sync {
    /// Affinity implied by the URL itself, if any.
    fn implied_affinity(&self, _url: &ServiceUrl) -> Result<Option<AffinityLabel>> {
        Ok(None)
    }
    fn open_storage(&self, target: &PilotTarget<'_>) -> Result<Arc<dyn StorageBackend>>;
    fn open_sandbox(&self, target: &PilotTarget<'_>) -> Result<Arc<dyn Sandbox>>;
    /// True when pilots run on the simulated clock.
    fn simulated(&self) -> bool;
}

/// Scheme string -> adaptor.
#[derive(Clone, Default)]
pub struct AdaptorRegistry {
    adaptors: BTreeMap<String, Arc<dyn Adaptor>>,
}

impl AdaptorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, scheme: impl Into<String>, adaptor: Arc<dyn Adaptor>) {
        self.adaptors.insert(scheme.into(), adaptor);
    }

    pub fn get(&self, scheme: &str) -> Result<&Arc<dyn Adaptor>> {
        self.adaptors
            .get(scheme)
            .ok_or_else(|| Error::Adaptor(scheme.to_owned()))
    }

    pub fn schemes(&self) -> impl Iterator<Item = &str> {
        self.adaptors.keys().map(String::as_str)
    }
}

/// Parses `name=size` arguments of synthetic tasks, expanding `{cu}`.
pub(crate) fn synthetic_outputs(cu: &ResourceId, args: &[String]) -> Result<Vec<(String, u64)>> {
    let mut out = Vec::new();
    for a in args {
        let (name, size) = a
            .split_once('=')
            .ok_or_else(|| Error::validation(format!("synthetic argument {a:?} is not name=size")))?;
        let size = size
            .parse::<u64>()
            .map_err(|_| Error::validation(format!("synthetic argument {a:?}: bad size")))?;
        let name = name.replace("{cu}", &cu.local_name());
        if name.is_empty() || name.contains('/') {
            return Err(Error::validation(format!("synthetic output name {name:?}")));
        }
        out.push((name, size));
    }
    Ok(out)
}

pub(crate) fn check_rel(rel: &str) -> Result<()> {
    if rel.is_empty()
        || rel.starts_with('/')
        || rel.split('/').any(|s| s.is_empty() || s == "..")
    {
        return Err(Error::validation(format!("bad relative path {rel:?}")));
    }
    Ok(())
}
