//! Pilot-Computes and Pilot-Data: factory operations, Data-Unit placement,
//! replication and retrieval.

pub mod adaptor;
pub mod local;
pub mod sim;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::agent::StagingMode;
use crate::error::{Error, Result};
use crate::service::{ComputeDataService, DataEntry, PilotEntry, Registry, TimerKind};
use crate::topology::AffinityLabel;
use crate::units::{
    manifest_bytes, DataUnit, DataUnitDescription, DuState, FileEntry, FileRef, Kind, Manifest,
    ResourceId,
};

pub use adaptor::{
    Adaptor, AdaptorRegistry, Blob, ExecControl, ExecOutcome, Sandbox, ServiceUrl,
    StorageBackend, StorageFault,
};
pub use sim::{BandwidthConfig, BandwidthMatrix, QueueModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotComputeDescription {
    pub service_url: String,
    pub process_count: u32,
    /// Required for `local://`; implied by the URL for `sim://`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affinity: Option<AffinityLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub walltime: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue_model: Option<QueueModel>,
    #[serde(default)]
    pub staging_mode: StagingMode,
}

impl PilotComputeDescription {
    pub fn new(service_url: impl Into<String>, process_count: u32) -> Self {
        PilotComputeDescription {
            service_url: service_url.into(),
            process_count,
            affinity: None,
            walltime: None,
            queue_model: None,
            staging_mode: StagingMode::Pull,
        }
    }

    pub fn with_affinity(mut self, label: AffinityLabel) -> Self {
        self.affinity = Some(label);
        self
    }

    pub fn with_queue_model(mut self, q: QueueModel) -> Self {
        self.queue_model = Some(q);
        self
    }

    pub fn with_staging_mode(mut self, m: StagingMode) -> Self {
        self.staging_mode = m;
        self
    }

    pub fn with_walltime(mut self, seconds: f64) -> Self {
        self.walltime = Some(seconds);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PilotState {
    New,
    QueuedAtResource,
    Active,
    Done,
    Failed,
    Canceled,
}

impl PilotState {
    pub fn is_terminal(self) -> bool {
        matches!(self, PilotState::Done | PilotState::Failed | PilotState::Canceled)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotCompute {
    pub id: ResourceId,
    pub description: PilotComputeDescription,
    pub state: PilotState,
    pub affinity: AffinityLabel,
    pub free_slots: u32,
    pub sandbox_root: PathBuf,
    pub submitted_at: f64,
    /// Absolute time the pilot became (or will become) ACTIVE.
    pub activation_time: Option<f64>,
    /// Time spent in the resource's queue (T_Q of the pilot).
    pub queue_seconds: f64,
}

impl PilotCompute {
    pub fn process_count(&self) -> u32 {
        self.description.process_count
    }

    pub fn busy_slots(&self) -> u32 {
        self.process_count() - self.free_slots
    }

    /// Absolute end of the pilot's walltime, if it has one and is active.
    pub fn walltime_end(&self) -> Option<f64> {
        Some(self.activation_time? + self.description.walltime?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotDataDescription {
    pub service_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affinity: Option<AffinityLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<u64>,
}

impl PilotDataDescription {
    pub fn new(service_url: impl Into<String>) -> Self {
        PilotDataDescription {
            service_url: service_url.into(),
            affinity: None,
            capacity: None,
        }
    }

    pub fn with_affinity(mut self, label: AffinityLabel) -> Self {
        self.affinity = Some(label);
        self
    }

    pub fn with_capacity(mut self, bytes: u64) -> Self {
        self.capacity = Some(bytes);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PilotDataState {
    New,
    Active,
    Deleted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotData {
    pub id: ResourceId,
    pub description: PilotDataDescription,
    pub state: PilotDataState,
    pub affinity: AffinityLabel,
    pub held_dus: BTreeSet<ResourceId>,
    pub bytes_used: u64,
}

impl PilotData {
    pub fn available_bytes(&self) -> Option<u64> {
        self.description
            .capacity
            .map(|c| c.saturating_sub(self.bytes_used))
    }
}

/// Timing of one put: T_S = T_X + T_register.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagingReport {
    pub du: ResourceId,
    pub pilot_data: ResourceId,
    pub files: usize,
    pub bytes: u64,
    pub t_x: f64,
    pub t_register: f64,
    pub t_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplicationMode {
    /// One replica after the other.
    Sequential,
    /// All replicas concurrently.
    Group,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub target: ResourceId,
    pub source: Option<ResourceId>,
    /// Topology distance between source and target.
    pub distance: f64,
    pub seconds: f64,
    pub ok: bool,
    /// Target already held the unit.
    pub skipped: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub du: ResourceId,
    pub mode: ReplicationMode,
    pub transfers: Vec<TransferRecord>,
    pub total_seconds: f64,
}

impl ReplicationReport {
    pub fn succeeded(&self) -> usize {
        self.transfers.iter().filter(|t| t.ok && !t.skipped).count()
    }
}

/// Replica of `du` closest to `to`; ties by pilot-data id.
pub(crate) fn nearest_replica(
    svc: &ComputeDataService,
    reg: &Registry,
    replicas: impl IntoIterator<Item = ResourceId>,
    to: &AffinityLabel,
) -> Result<Option<(ResourceId, f64)>> {
    let mut best: Option<(f64, ResourceId)> = None;
    for pd in replicas {
        let Some(entry) = reg.datas.get(&pd) else {
            continue;
        };
        if entry.info.state != PilotDataState::Active {
            continue;
        }
        let d = svc.topology().distance(&entry.info.affinity, to)?;
        let better = match &best {
            None => true,
            Some((bd, bid)) => d < *bd || (d == *bd && pd < *bid),
        };
        if better {
            best = Some((d, pd));
        }
    }
    Ok(best.map(|(d, id)| (id, d)))
}

fn load_sources(refs: &[FileRef]) -> Result<Vec<(String, Blob)>> {
    refs.iter()
        .map(|r| {
            let name = r.basename().expect("validated");
            let blob = match r {
                FileRef::Path(p) => Blob::Bytes(std::fs::read(p).map_err(|e| {
                    Error::Staging(format!("cannot read {}: {e}", p.display()))
                })?),
                FileRef::Synthetic { name, size } => Blob::Synthetic {
                    size: *size,
                    digest: crate::units::synthetic_digest(name, *size),
                },
            };
            Ok((name, blob))
        })
        .collect()
}

impl ComputeDataService {
    fn resolve_affinity(
        &self,
        url: &ServiceUrl,
        adaptor: &Arc<dyn Adaptor>,
        given: Option<&AffinityLabel>,
    ) -> Result<AffinityLabel> {
        let implied = adaptor.implied_affinity(url)?;
        let label = match (implied, given) {
            (Some(i), Some(g)) if i != *g => {
                return Err(Error::validation(format!(
                    "affinity {g} disagrees with service url label {i}"
                )))
            }
            (Some(i), _) => i,
            (None, Some(g)) => g.clone(),
            (None, None) => {
                return Err(Error::validation(format!(
                    "{}:// pilots need an affinity label",
                    url.scheme
                )))
            }
        };
        if !self.topology().contains(&label) {
            return Err(Error::lookup("affinity label", &label));
        }
        Ok(label)
    }

    /// Pilot-Compute factory. Simulated pilots become ACTIVE after their queue
    /// delay; local pilots activate at once and start their agent.
    pub fn create_pilot_compute(&self, desc: PilotComputeDescription) -> Result<PilotCompute> {
        let url = ServiceUrl::parse(&desc.service_url)?;
        let adaptor = self.adaptors().get(&url.scheme)?.clone();
        if desc.process_count < 1 {
            return Err(Error::validation("process_count must be >= 1"));
        }
        if let Some(w) = desc.walltime {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::validation("walltime must be > 0"));
            }
        }
        if let Some(q) = &desc.queue_model {
            q.validate()?;
        }
        if adaptor.simulated() != self.is_simulated() {
            return Err(Error::Adaptor(format!(
                "{} (adaptor clock does not match this service)",
                url.scheme
            )));
        }
        let affinity = self.resolve_affinity(&url, &adaptor, desc.affinity.as_ref())?;
        let id = self.new_id(Kind::Pilot)?;
        let local_name = id.local_name();
        let sandbox = adaptor.open_sandbox(&adaptor::PilotTarget {
            url: &url,
            local_name: &local_name,
            affinity: &affinity,
        })?;
        self.store().create_queue(id.as_str())?;

        let mut reg = self.lock();
        let now = self.now_locked(&reg);
        let delay = if self.is_simulated() {
            desc.queue_model
                .as_ref()
                .map_or(0.0, |q| q.sample(&mut reg.rng))
        } else {
            0.0
        };
        let pilot = PilotCompute {
            id: id.clone(),
            free_slots: desc.process_count,
            state: PilotState::QueuedAtResource,
            affinity,
            sandbox_root: sandbox.root().to_path_buf(),
            submitted_at: now,
            activation_time: Some(now + delay),
            queue_seconds: delay,
            description: desc,
        };
        reg.pilots.insert(
            id.clone(),
            PilotEntry {
                info: pilot,
                sandbox,
            },
        );
        self.log_event(&mut reg, &id, "pilot_submitted", format!("queue {delay}"));
        if delay == 0.0 {
            self.activate_pilot_locked(&mut reg, &id)?;
        } else {
            self.persist_pilot(&reg, &id)?;
            self.schedule(&mut reg, now + delay, TimerKind::ActivatePilot(id.clone()));
        }
        let info = reg.pilots[&id].info.clone();
        drop(reg);
        if !self.is_simulated() {
            self.spawn_agents(&id);
        }
        Ok(info)
    }

    pub(crate) fn activate_pilot_locked(&self, reg: &mut Registry, id: &ResourceId) -> Result<()> {
        let now = self.now_locked(reg);
        let entry = reg
            .pilots
            .get_mut(id)
            .ok_or_else(|| Error::lookup("pilot", id))?;
        if entry.info.state != PilotState::QueuedAtResource {
            return Ok(());
        }
        entry.info.state = PilotState::Active;
        entry.info.activation_time = Some(now);
        entry.info.queue_seconds = now - entry.info.submitted_at;
        let walltime = entry.info.description.walltime;
        self.log_event(reg, id, "pilot_active", String::new());
        self.persist_pilot(reg, id)?;
        if let Some(w) = walltime {
            self.schedule(reg, now + w, TimerKind::PilotWalltime(id.clone()));
        }
        self.slot_freed_locked(reg, id)
    }

    /// Pilot-Data factory.
    pub fn create_pilot_data(&self, desc: PilotDataDescription) -> Result<PilotData> {
        let url = ServiceUrl::parse(&desc.service_url)?;
        let adaptor = self.adaptors().get(&url.scheme)?.clone();
        if adaptor.simulated() != self.is_simulated() {
            return Err(Error::Adaptor(format!(
                "{} (adaptor clock does not match this service)",
                url.scheme
            )));
        }
        let affinity = self.resolve_affinity(&url, &adaptor, desc.affinity.as_ref())?;
        let id = self.new_id(Kind::Pd)?;
        let local_name = id.local_name();
        let storage = adaptor.open_storage(&adaptor::PilotTarget {
            url: &url,
            local_name: &local_name,
            affinity: &affinity,
        })?;
        let pd = PilotData {
            id: id.clone(),
            description: desc,
            state: PilotDataState::Active,
            affinity,
            held_dus: BTreeSet::new(),
            bytes_used: 0,
        };
        let mut reg = self.lock();
        reg.datas.insert(
            id.clone(),
            DataEntry {
                info: pd.clone(),
                storage,
            },
        );
        self.log_event(&mut reg, &id, "pilot_data_active", String::new());
        self.persist_pd(&reg, &id)?;
        Ok(pd)
    }

    /// Test hook: make a storage pool misbehave.
    pub fn inject_storage_fault(&self, pd: &ResourceId, fault: Option<StorageFault>) -> Result<()> {
        let reg = self.lock();
        reg.datas
            .get(pd)
            .ok_or_else(|| Error::lookup("pilot data", pd))?
            .storage
            .set_fault(fault);
        Ok(())
    }

    /// Transfers the described files into `pd`. A non-empty unit is sealed
    /// AVAILABLE with `pd` as first replica; an empty one stays PENDING as an
    /// output container homed on `pd`.
    pub fn put_du(
        &self,
        pd: &ResourceId,
        desc: &DataUnitDescription,
    ) -> Result<(DataUnit, StagingReport)> {
        let violations = desc.validate();
        if !violations.is_empty() {
            return Err(Error::Validation(violations));
        }
        let refs = desc.parsed_refs()?;
        let (storage, pd_label, available) = {
            let reg = self.lock();
            let e = reg
                .datas
                .get(pd)
                .ok_or_else(|| Error::lookup("pilot data", pd))?;
            if e.info.state != PilotDataState::Active {
                return Err(Error::Storage(format!("{pd} is not ACTIVE")));
            }
            (e.storage.clone(), e.info.affinity.clone(), e.info.available_bytes())
        };
        let started = Instant::now();
        let blobs = load_sources(&refs)?;
        let bytes: u64 = blobs.iter().map(|(_, b)| b.size()).sum();
        if let Some(avail) = available {
            if bytes > avail {
                return Err(Error::Capacity {
                    pilot: pd.to_string(),
                    needed: bytes,
                    available: avail,
                });
            }
        }
        let id = self.new_id(Kind::Du)?;
        let mut manifest = Manifest::new();
        for (name, blob) in &blobs {
            let stored = storage.put(&id, name, blob)?;
            if stored != blob.entry() {
                let _ = storage.remove_du(&id);
                return Err(Error::Staging(format!(
                    "{name}: digest mismatch after copy into {pd}"
                )));
            }
            manifest.insert(name.clone(), stored);
        }
        let copied = started.elapsed().as_secs_f64();

        let mut reg = self.lock();
        let reg_started = Instant::now();
        let mut du = DataUnit::new(id.clone(), desc);
        du.mark_pending()?;
        reg.du_home.insert(id.clone(), pd.clone());
        if !blobs.is_empty() {
            for (rel, e) in &manifest {
                du.stage_file(rel, e.clone())?;
            }
            du.seal(manifest.clone(), |rel, e| {
                storage.entry(&id, rel).map(|s| s == *e).unwrap_or(false)
            })?;
            du.replicas.insert(pd.clone());
            let pde = reg.datas.get_mut(pd).expect("checked");
            pde.info.held_dus.insert(id.clone());
            pde.info.bytes_used += bytes;
        }
        reg.dus.insert(id.clone(), du.clone());
        let (t_x, t_register) = if self.is_simulated() {
            let from = self.config().client_label.clone().unwrap_or_else(|| pd_label.clone());
            let t_x = if self.config().client_label.is_some() {
                self.bandwidth().transfer_seconds(&from, &pd_label, bytes)?
            } else {
                match self.bandwidth().default_rate() {
                    Some(r) => bytes as f64 / r,
                    None if bytes == 0 => 0.0,
                    None => {
                        return Err(Error::Model(
                            "no client label and no default bandwidth".into(),
                        ))
                    }
                }
            };
            (t_x, self.config().register_seconds * blobs.len() as f64)
        } else {
            (copied, reg_started.elapsed().as_secs_f64())
        };
        let report = StagingReport {
            du: id.clone(),
            pilot_data: pd.clone(),
            files: blobs.len(),
            bytes,
            t_x,
            t_register,
            t_s: t_x + t_register,
        };
        self.log_event(
            &mut reg,
            &id,
            "du_put",
            format!("{pd} {bytes} bytes t_s={}", report.t_s),
        );
        self.persist_du(&reg, &id)?;
        self.persist_pd(&reg, pd)?;
        Ok((du, report))
    }

    /// Copies `du` to every target. Each transfer reads from the replica
    /// nearest its target; sequential transfers may read from replicas made
    /// earlier in the same call.
    pub fn replicate(
        &self,
        du_id: &ResourceId,
        targets: &[ResourceId],
        mode: ReplicationMode,
    ) -> Result<ReplicationReport> {
        let (manifest, initial) = {
            let reg = self.lock();
            let du = reg.dus.get(du_id).ok_or_else(|| Error::lookup("data unit", du_id))?;
            if du.state != DuState::Available {
                return Err(Error::StateMachine {
                    from: du.state.to_string(),
                    to: "replicate".into(),
                });
            }
            for t in targets {
                let e = reg.datas.get(t).ok_or_else(|| Error::lookup("pilot data", t))?;
                if e.info.state != PilotDataState::Active {
                    return Err(Error::Storage(format!("{t} is not ACTIVE")));
                }
            }
            (du.manifest.clone(), du.replicas.clone())
        };
        let started = Instant::now();
        let transfers = match mode {
            ReplicationMode::Sequential => {
                let mut out = Vec::new();
                for t in targets {
                    let rec = self.replicate_one(du_id, &manifest, t, None)?;
                    out.push(rec);
                }
                out
            }
            ReplicationMode::Group => self.replicate_group(du_id, &manifest, targets, &initial)?,
        };
        let total_seconds = if self.is_simulated() {
            let times = transfers.iter().map(|t| t.seconds);
            match mode {
                ReplicationMode::Sequential => times.sum(),
                ReplicationMode::Group => times.fold(0.0, f64::max),
            }
        } else {
            started.elapsed().as_secs_f64()
        };
        let mut reg = self.lock();
        self.log_event(
            &mut reg,
            du_id,
            "replicated",
            format!("{mode:?} {} targets t_r={total_seconds}", targets.len()),
        );
        Ok(ReplicationReport {
            du: du_id.clone(),
            mode,
            transfers,
            total_seconds,
        })
    }

    fn replicate_group(
        &self,
        du: &ResourceId,
        manifest: &Manifest,
        targets: &[ResourceId],
        initial: &BTreeSet<ResourceId>,
    ) -> Result<Vec<TransferRecord>> {
        if self.is_simulated() {
            return targets
                .iter()
                .map(|t| self.replicate_one(du, manifest, t, Some(initial)))
                .collect();
        }
        let workers = self.config().group_workers.max(1);
        let mut out: Vec<Option<Result<TransferRecord>>> = (0..targets.len()).map(|_| None).collect();
        for (chunk_idx, chunk) in targets.chunks(workers).enumerate() {
            let results: Vec<Result<TransferRecord>> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|t| s.spawn(move || self.replicate_one(du, manifest, t, Some(initial))))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("replication worker")).collect()
            });
            for (i, r) in results.into_iter().enumerate() {
                out[chunk_idx * workers + i] = Some(r);
            }
        }
        out.into_iter().map(|r| r.expect("filled")).collect()
    }

    /// One target. `sources` restricts the candidate replicas (group mode).
    fn replicate_one(
        &self,
        du_id: &ResourceId,
        manifest: &Manifest,
        target: &ResourceId,
        sources: Option<&BTreeSet<ResourceId>>,
    ) -> Result<TransferRecord> {
        let (src, distance, src_storage, dst_storage, cost, avail) = {
            let reg = self.lock();
            let du = &reg.dus[du_id];
            let tgt = &reg.datas[target];
            if du.replicas.contains(target) {
                return Ok(TransferRecord {
                    target: target.clone(),
                    source: None,
                    distance: 0.0,
                    seconds: 0.0,
                    ok: true,
                    skipped: true,
                    error: None,
                });
            }
            let candidates: Vec<ResourceId> = match sources {
                Some(s) => s.iter().cloned().collect(),
                None => du.replicas.iter().cloned().collect(),
            };
            let (src, distance) = nearest_replica(self, &reg, candidates, &tgt.info.affinity)?
                .ok_or_else(|| Error::Staging(format!("{du_id} has no reachable replica")))?;
            let src_label = &reg.datas[&src].info.affinity;
            let cost = self.bandwidth().transfer_seconds(
                src_label,
                &tgt.info.affinity,
                manifest_bytes(manifest),
            );
            (
                src.clone(),
                distance,
                reg.datas[&src].storage.clone(),
                tgt.storage.clone(),
                cost,
                tgt.info.available_bytes(),
            )
        };
        let started = Instant::now();
        let bytes = manifest_bytes(manifest);
        let attempt = (|| -> Result<()> {
            if let Some(a) = avail {
                if bytes > a {
                    return Err(Error::Capacity {
                        pilot: target.to_string(),
                        needed: bytes,
                        available: a,
                    });
                }
            }
            for (rel, entry) in manifest {
                let blob = src_storage.get(du_id, rel)?;
                let stored = dst_storage.put(du_id, rel, &blob)?;
                if stored != *entry {
                    return Err(Error::Integrity(format!("{rel}: digest mismatch at {target}")));
                }
            }
            Ok(())
        })();
        let seconds = if self.is_simulated() {
            match &cost {
                Ok(c) => *c,
                Err(_) => 0.0,
            }
        } else {
            started.elapsed().as_secs_f64()
        };
        let attempt = attempt.and_then(|_| cost.map(|_| ()));
        let mut reg = self.lock();
        match attempt {
            Ok(()) => {
                reg.dus.get_mut(du_id).expect("exists").replicas.insert(target.clone());
                let e = reg.datas.get_mut(target).expect("exists");
                e.info.held_dus.insert(du_id.clone());
                e.info.bytes_used += bytes;
                self.persist_du(&reg, du_id)?;
                self.persist_pd(&reg, target)?;
                Ok(TransferRecord {
                    target: target.clone(),
                    source: Some(src),
                    distance,
                    seconds,
                    ok: true,
                    skipped: false,
                    error: None,
                })
            }
            Err(e) => {
                let _ = dst_storage.remove_du(du_id);
                self.log_event(&mut reg, du_id, "replica_failed", format!("{target}: {e}"));
                Ok(TransferRecord {
                    target: target.clone(),
                    source: Some(src),
                    distance,
                    seconds,
                    ok: false,
                    skipped: false,
                    error: Some(e.to_string()),
                })
            }
        }
    }

    /// Drops the replica of `du` on `pd`. The last replica of an AVAILABLE
    /// unit cannot be removed.
    pub fn remove_replica(&self, du_id: &ResourceId, pd: &ResourceId) -> Result<()> {
        let mut reg = self.lock();
        let du = reg.dus.get(du_id).ok_or_else(|| Error::lookup("data unit", du_id))?;
        if !du.replicas.contains(pd) {
            return Err(Error::NotFound(format!("{du_id} has no replica on {pd}")));
        }
        if du.state == DuState::Available && du.replicas.len() == 1 {
            return Err(Error::Conflict(format!(
                "{pd} holds the last replica of {du_id}"
            )));
        }
        let bytes = du.bytes();
        reg.datas[pd].storage.remove_du(du_id)?;
        reg.dus.get_mut(du_id).expect("exists").replicas.remove(pd);
        let e = reg.datas.get_mut(pd).expect("exists");
        e.info.held_dus.remove(du_id);
        e.info.bytes_used = e.info.bytes_used.saturating_sub(bytes);
        self.persist_du(&reg, du_id)?;
        self.persist_pd(&reg, pd)
    }

    fn replica_storage(
        &self,
        du_id: &ResourceId,
        from: Option<&ResourceId>,
    ) -> Result<(DataUnit, Arc<dyn StorageBackend>)> {
        let reg = self.lock();
        let du = reg
            .dus
            .get(du_id)
            .ok_or_else(|| Error::lookup("data unit", du_id))?;
        if du.state != DuState::Available {
            return Err(Error::StateMachine {
                from: du.state.to_string(),
                to: "read".into(),
            });
        }
        let pd = match from {
            Some(p) if du.replicas.contains(p) => p.clone(),
            Some(p) => return Err(Error::NotFound(format!("{du_id} has no replica on {p}"))),
            None => du
                .replicas
                .iter()
                .next()
                .cloned()
                .ok_or_else(|| Error::NotFound(format!("{du_id} has no replica")))?,
        };
        Ok((du.clone(), reg.datas[&pd].storage.clone()))
    }

    /// Reads one file of an AVAILABLE unit, optionally from a given replica.
    pub fn get_file(
        &self,
        du_id: &ResourceId,
        rel: &str,
        from: Option<&ResourceId>,
    ) -> Result<Blob> {
        let (du, storage) = self.replica_storage(du_id, from)?;
        let entry = du
            .manifest
            .get(rel)
            .ok_or_else(|| Error::NotFound(format!("{du_id}/{rel}")))?;
        let blob = storage.get(du_id, rel)?;
        if blob.entry() != *entry {
            return Err(Error::Integrity(format!("{du_id}/{rel}: digest mismatch")));
        }
        Ok(blob)
    }

    /// Writes all files of `du` under `dest`; returns the written paths.
    pub fn export_du(
        &self,
        du_id: &ResourceId,
        dest: &Path,
        from: Option<&ResourceId>,
    ) -> Result<Vec<PathBuf>> {
        let (du, _) = self.replica_storage(du_id, from)?;
        std::fs::create_dir_all(dest)?;
        let mut written = Vec::new();
        for rel in du.manifest.keys() {
            let blob = self.get_file(du_id, rel, from)?;
            let bytes = blob.bytes().ok_or_else(|| {
                Error::Staging(format!("{du_id}/{rel} is synthetic and cannot be exported"))
            })?;
            let path = dest.join(rel);
            if let Some(p) = path.parent() {
                std::fs::create_dir_all(p)?;
            }
            std::fs::write(&path, bytes)?;
            written.push(path);
        }
        Ok(written)
    }

    /// Recomputes every file digest on every replica and compares it to the
    /// manifest.
    pub fn verify_replicas(&self, du_id: &ResourceId) -> Result<()> {
        let reg = self.lock();
        let du = reg.dus.get(du_id).ok_or_else(|| Error::lookup("data unit", du_id))?;
        for pd in &du.replicas {
            let storage = &reg.datas[pd].storage;
            for (rel, want) in &du.manifest {
                let got: FileEntry = storage.entry(du_id, rel)?;
                if got != *want {
                    return Err(Error::Integrity(format!(
                        "{du_id}/{rel} differs on replica {pd}"
                    )));
                }
            }
        }
        Ok(())
    }
}
