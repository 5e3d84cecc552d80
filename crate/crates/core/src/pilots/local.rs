//! `local://<abs-path>` adaptor: storage pools and sandboxes are directories,
//! tasks are real subprocesses.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::units::{synthetic_seconds, ComputeUnitDescription, FileEntry, ResourceId};

use super::adaptor::{
    check_rel, synthetic_outputs, Adaptor, Blob, ExecControl, ExecOutcome, Interrupt, PilotTarget,
    Sandbox, ServiceUrl, StorageBackend, StorageFault,
};

pub const PILOT_SHARED_DIR: &str = "_pilot";
pub const STDOUT_FILE: &str = "stdout";
pub const STDERR_FILE: &str = "stderr";
const POLL: Duration = Duration::from_millis(5);

#[derive(Debug, Default)]
pub struct LocalAdaptor;

fn root_of(url: &ServiceUrl) -> Result<PathBuf> {
    let p = PathBuf::from(&url.address);
    if !p.is_absolute() {
        return Err(Error::validation(format!(
            "local:// needs an absolute path, got {:?}",
            url.address
        )));
    }
    Ok(p)
}

fn ensure_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::Storage(format!("{}: {e}", dir.display())))?;
    let probe = dir.join(".ps-probe");
    fs::write(&probe, b"")
        .map_err(|e| Error::Storage(format!("{} is not writable: {e}", dir.display())))?;
    let _ = fs::remove_file(probe);
    Ok(())
}

impl Adaptor for LocalAdaptor {
    fn open_storage(&self, target: &PilotTarget<'_>) -> Result<Arc<dyn StorageBackend>> {
        let root = root_of(target.url)?;
        ensure_writable(&root)?;
        Ok(Arc::new(LocalStorage {
            root,
            fault: Mutex::new(None),
        }))
    }

    fn open_sandbox(&self, target: &PilotTarget<'_>) -> Result<Arc<dyn Sandbox>> {
        let root = root_of(target.url)?;
        ensure_writable(&root)?;
        fs::create_dir_all(root.join(PILOT_SHARED_DIR))?;
        Ok(Arc::new(LocalSandbox { root }))
    }

    fn simulated(&self) -> bool {
        false
    }
}

/// Deterministic filler for synthetic outputs on a real filesystem.
fn synthetic_content(name: &str, size: u64) -> Vec<u8> {
    let salt = name.bytes().fold(0u8, |a, b| a.wrapping_mul(31).wrapping_add(b));
    (0..size).map(|i| (i % 251) as u8 ^ salt).collect()
}

pub struct LocalStorage {
    root: PathBuf,
    fault: Mutex<Option<StorageFault>>,
}

impl LocalStorage {
    fn path(&self, du: &ResourceId, rel: &str) -> PathBuf {
        self.root.join(du.local_name()).join(rel)
    }
}

impl StorageBackend for LocalStorage {
    fn put(&self, du: &ResourceId, rel: &str, blob: &Blob) -> Result<FileEntry> {
        check_rel(rel)?;
        let fault = *self.fault.lock().unwrap();
        if fault == Some(StorageFault::RejectWrites) {
            return Err(Error::Storage(format!("write of {rel:?} rejected")));
        }
        let bytes = blob.bytes().ok_or_else(|| {
            Error::Staging(format!(
                "{rel:?}: synthetic content cannot be stored on a local:// pool"
            ))
        })?;
        let path = self.path(du, rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        if fault == Some(StorageFault::CorruptWrites) && !bytes.is_empty() {
            let mut bad = bytes.to_vec();
            bad[0] ^= 0xff;
            fs::write(&path, bad)?;
        } else {
            fs::write(&path, bytes)?;
        }
        self.entry(du, rel)
    }

    fn get(&self, du: &ResourceId, rel: &str) -> Result<Blob> {
        let path = self.path(du, rel);
        fs::read(&path)
            .map(Blob::Bytes)
            .map_err(|_| Error::NotFound(format!("{du}/{rel}")))
    }

    fn entry(&self, du: &ResourceId, rel: &str) -> Result<FileEntry> {
        Ok(self.get(du, rel)?.entry())
    }

    fn remove_du(&self, du: &ResourceId) -> Result<()> {
        let dir = self.root.join(du.local_name());
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        Ok(())
    }

    fn path_of(&self, du: &ResourceId, rel: &str) -> Option<PathBuf> {
        Some(self.path(du, rel))
    }

    fn set_fault(&self, fault: Option<StorageFault>) {
        *self.fault.lock().unwrap() = fault;
    }
}

pub struct LocalSandbox {
    root: PathBuf,
}

impl LocalSandbox {
    pub fn cu_dir(&self, cu: &ResourceId) -> PathBuf {
        self.root.join(cu.local_name())
    }

    fn wait_interruptible(seconds: f64, ctl: &ExecControl) -> Option<Interrupt> {
        let end = Instant::now() + Duration::from_secs_f64(seconds);
        loop {
            if ctl.canceled() {
                return Some(Interrupt::Canceled);
            }
            if ctl.expired() {
                return Some(Interrupt::Walltime);
            }
            let now = Instant::now();
            if now >= end {
                return None;
            }
            std::thread::sleep(POLL.min(end - now));
        }
    }

    fn run_synthetic(
        &self,
        cu: &ResourceId,
        desc: &ComputeUnitDescription,
        seconds: f64,
        ctl: &ExecControl,
    ) -> Result<ExecOutcome> {
        let dir = self.cu_dir(cu);
        let outputs = synthetic_outputs(cu, &desc.arguments)?;
        let started = Instant::now();
        if let Some(why) = Self::wait_interruptible(seconds, ctl) {
            return Ok(interrupted(why, started));
        }
        for (name, size) in outputs {
            fs::write(dir.join(&name), synthetic_content(&name, size))?;
        }
        fs::write(dir.join(STDOUT_FILE), b"")?;
        fs::write(dir.join(STDERR_FILE), b"")?;
        Ok(ExecOutcome {
            success: true,
            seconds,
            diagnostics: None,
            interrupted: None,
        })
    }

    fn run_process(
        &self,
        cu: &ResourceId,
        desc: &ComputeUnitDescription,
        ctl: &ExecControl,
    ) -> Result<ExecOutcome> {
        let dir = self.cu_dir(cu);
        let stdout = fs::File::create(dir.join(STDOUT_FILE))?;
        let stderr = fs::File::create(dir.join(STDERR_FILE))?;
        let started = Instant::now();
        let spawned = Command::new(&desc.executable)
            .args(&desc.arguments)
            .current_dir(&dir)
            .env("PS_CU_ID", cu.as_str())
            .env("PS_PILOT_DIR", self.root.join(PILOT_SHARED_DIR))
            .stdin(Stdio::null())
            .stdout(stdout)
            .stderr(stderr)
            .spawn();
        let mut child = match spawned {
            Ok(c) => c,
            Err(e) => {
                return Ok(ExecOutcome {
                    success: false,
                    seconds: 0.0,
                    diagnostics: Some(format!("cannot start {:?}: {e}", desc.executable)),
                    interrupted: None,
                })
            }
        };
        loop {
            if let Some(status) = child.try_wait()? {
                let seconds = started.elapsed().as_secs_f64();
                let diagnostics = (!status.success()).then(|| {
                    let err = fs::read_to_string(dir.join(STDERR_FILE)).unwrap_or_default();
                    let tail: String = err.chars().rev().take(4096).collect::<Vec<_>>().into_iter().rev().collect();
                    format!("{status}; stderr: {}", tail.trim_end())
                });
                return Ok(ExecOutcome {
                    success: status.success(),
                    seconds,
                    diagnostics,
                    interrupted: None,
                });
            }
            let why = if ctl.canceled() {
                Some(Interrupt::Canceled)
            } else if ctl.expired() {
                Some(Interrupt::Walltime)
            } else {
                None
            };
            if let Some(why) = why {
                let _ = child.kill();
                let _ = child.wait();
                return Ok(interrupted(why, started));
            }
            std::thread::sleep(POLL);
        }
    }
}

fn interrupted(why: Interrupt, started: Instant) -> ExecOutcome {
    ExecOutcome {
        success: false,
        seconds: started.elapsed().as_secs_f64(),
        diagnostics: Some(match why {
            Interrupt::Canceled => "canceled".to_owned(),
            Interrupt::Walltime => "WALLTIME".to_owned(),
        }),
        interrupted: Some(why),
    }
}

impl Sandbox for LocalSandbox {
    fn root(&self) -> &Path {
        &self.root
    }

    fn prepare(&self, cu: &ResourceId) -> Result<()> {
        fs::create_dir_all(self.cu_dir(cu))?;
        Ok(())
    }

    fn link_input(
        &self,
        cu: &ResourceId,
        rel: &str,
        storage: &dyn StorageBackend,
        du: &ResourceId,
    ) -> Result<()> {
        check_rel(rel)?;
        let dest = self.cu_dir(cu).join(rel);
        match storage.path_of(du, rel) {
            Some(src) if src.exists() => {
                if dest.symlink_metadata().is_ok() {
                    fs::remove_file(&dest)?;
                }
                if let Some(parent) = dest.parent() {
                    fs::create_dir_all(parent)?;
                }
                std::os::unix::fs::symlink(&src, &dest)?;
                Ok(())
            }
            _ => self.copy_input(cu, rel, &storage.get(du, rel)?),
        }
    }

    fn copy_input(&self, cu: &ResourceId, rel: &str, blob: &Blob) -> Result<()> {
        check_rel(rel)?;
        let bytes = blob.bytes().ok_or_else(|| {
            Error::Staging(format!("{rel:?}: synthetic content in a local sandbox"))
        })?;
        let dest = self.cu_dir(cu).join(rel);
        if dest.symlink_metadata().is_ok() {
            fs::remove_file(&dest)?;
        }
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(dest, bytes)?;
        Ok(())
    }

    fn file_entry(&self, cu: &ResourceId, rel: &str) -> Result<FileEntry> {
        Ok(self.read_file(cu, rel)?.entry())
    }

    fn execute(
        &self,
        cu: &ResourceId,
        desc: &ComputeUnitDescription,
        ctl: &ExecControl,
    ) -> Result<ExecOutcome> {
        self.prepare(cu)?;
        match synthetic_seconds(&desc.executable) {
            Some(Some(secs)) => self.run_synthetic(cu, desc, secs, ctl),
            Some(None) => Err(Error::validation(format!(
                "bad synthetic tag {:?}",
                desc.executable
            ))),
            None => self.run_process(cu, desc, ctl),
        }
    }

    fn collect_outputs(
        &self,
        cu: &ResourceId,
        pattern: &glob::Pattern,
        exclude: &BTreeSet<String>,
    ) -> Result<Vec<(String, Blob)>> {
        let dir = self.cu_dir(cu);
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir)? {
            let entry = entry?;
            let ft = entry.file_type()?;
            if !ft.is_file() {
                continue;
            }
            let name = entry.file_name().to_string_lossy().into_owned();
            if name == STDOUT_FILE || name == STDERR_FILE || exclude.contains(&name) {
                continue;
            }
            if pattern.matches(&name) {
                out.push((name, Blob::Bytes(fs::read(entry.path())?)));
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(out)
    }

    fn read_file(&self, cu: &ResourceId, rel: &str) -> Result<Blob> {
        fs::read(self.cu_dir(cu).join(rel))
            .map(Blob::Bytes)
            .map_err(|_| Error::NotFound(format!("{cu}/{rel}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::AffinityLabel;
    use crate::units::{digest_bytes, Kind};

    fn target<'a>(url: &'a ServiceUrl, label: &'a AffinityLabel) -> PilotTarget<'a> {
        PilotTarget {
            url,
            local_name: "p",
            affinity: label,
        }
    }

    #[test]
    fn storage_roundtrip_and_faults() {
        let dir = tempfile::tempdir().unwrap();
        let url = ServiceUrl::parse(&format!("local://{}", dir.path().display())).unwrap();
        let label = AffinityLabel::parse("x").unwrap();
        let st = LocalAdaptor.open_storage(&target(&url, &label)).unwrap();
        let du = ResourceId::new("t", Kind::Du, 1);
        let e = st.put(&du, "a.txt", &Blob::Bytes(b"hello".to_vec())).unwrap();
        assert_eq!(e.digest, digest_bytes(b"hello"));
        assert_eq!(st.get(&du, "a.txt").unwrap(), Blob::Bytes(b"hello".to_vec()));

        st.set_fault(Some(StorageFault::CorruptWrites));
        let bad = st.put(&du, "b.txt", &Blob::Bytes(b"hello".to_vec())).unwrap();
        assert_ne!(bad.digest, e.digest);
        st.set_fault(Some(StorageFault::RejectWrites));
        assert!(st.put(&du, "c.txt", &Blob::Bytes(vec![1])).is_err());
        st.set_fault(None);
        assert!(st.put(&du, "../escape", &Blob::Bytes(vec![1])).is_err());
        st.remove_du(&du).unwrap();
        assert!(st.get(&du, "a.txt").is_err());
    }

    #[test]
    fn relative_url_rejected() {
        let url = ServiceUrl::parse("local://relative/dir").unwrap();
        let label = AffinityLabel::parse("x").unwrap();
        assert!(LocalAdaptor.open_storage(&target(&url, &label)).is_err());
    }

    #[test]
    fn process_failure_captures_stderr() {
        let dir = tempfile::tempdir().unwrap();
        let url = ServiceUrl::parse(&format!("local://{}", dir.path().display())).unwrap();
        let label = AffinityLabel::parse("x").unwrap();
        let sb = LocalAdaptor.open_sandbox(&target(&url, &label)).unwrap();
        let cu = ResourceId::new("t", Kind::Cu, 1);
        sb.prepare(&cu).unwrap();
        let mut d = ComputeUnitDescription::new("/bin/sh");
        d.arguments = vec!["-c".into(), "echo boom >&2; exit 3".into()];
        let out = sb.execute(&cu, &d, &ExecControl::default()).unwrap();
        assert!(!out.success);
        assert!(out.diagnostics.unwrap().contains("boom"));
        let err = fs::read_to_string(dir.path().join("cu-1").join(STDERR_FILE)).unwrap();
        assert_eq!(err.trim(), "boom");
    }

    #[test]
    fn synthetic_outputs_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let url = ServiceUrl::parse(&format!("local://{}", dir.path().display())).unwrap();
        let label = AffinityLabel::parse("x").unwrap();
        let sb = LocalAdaptor.open_sandbox(&target(&url, &label)).unwrap();
        let cu = ResourceId::new("t", Kind::Cu, 4);
        let mut d = ComputeUnitDescription::synthetic(0.0);
        d.arguments = vec!["out-{cu}.dat=10".into()];
        assert!(sb.execute(&cu, &d, &ExecControl::default()).unwrap().success);
        let outs = sb
            .collect_outputs(&cu, &glob::Pattern::new("*").unwrap(), &BTreeSet::new())
            .unwrap();
        assert_eq!(outs.len(), 1);
        assert_eq!(outs[0].0, "out-cu-4.dat");
        assert_eq!(outs[0].1.size(), 10);
    }
}
