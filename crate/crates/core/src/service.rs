//! The Compute-Data Service: owns pilots, units and the coordination store,
//! and runs either on the simulated clock or on the wall clock.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::atomic::AtomicBool;
use std::sync::{Arc, Mutex, MutexGuard, Weak};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::agent::Completion;
use crate::coordination::{CoordinationStore, MemoryStore, GLOBAL_QUEUE};
use crate::error::{Error, Result};
use crate::pilots::adaptor::{Adaptor, AdaptorRegistry, PilotTarget, Sandbox, ServiceUrl, StorageBackend};
use crate::pilots::local::LocalAdaptor;
use crate::pilots::sim::{BandwidthMatrix, SimAdaptor};
use crate::pilots::{PilotCompute, PilotData, PilotState};
use crate::scheduler::{PlacementDecision, SchedulerConfig};
use crate::topology::{AffinityLabel, TopologyTree};
use crate::units::{ComputeUnit, CuState, DataUnit, Kind, ResourceId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    /// Simulated registration cost per file (T_register).
    #[serde(default = "default_register")]
    pub register_seconds: f64,
    /// Where client uploads originate; `None` uses the default bandwidth.
    #[serde(default)]
    pub client_label: Option<AffinityLabel>,
    /// Simulated run time grows by this fraction per extra concurrent CU on
    /// the same pilot.
    #[serde(default)]
    pub slowdown_per_concurrent: f64,
    /// Glob selecting CU output files.
    #[serde(default = "default_output_pattern")]
    pub output_pattern: String,
    /// Concurrent transfers in local group replication.
    #[serde(default = "default_group_workers")]
    pub group_workers: usize,
    #[serde(default)]
    pub seed: u64,
    /// Start agent threads for local pilots.
    #[serde(default = "default_true")]
    pub spawn_local_agents: bool,
    /// Append placement decisions as JSON lines.
    #[serde(default)]
    pub audit_log: Option<PathBuf>,
    /// How long a local agent blocks on an empty queue before rechecking.
    #[serde(default = "default_poll_ms")]
    pub poll_ms: u64,
}

fn default_register() -> f64 {
    0.01
}
fn default_output_pattern() -> String {
    "*".into()
}
fn default_group_workers() -> usize {
    4
}
fn default_true() -> bool {
    true
}
fn default_poll_ms() -> u64 {
    20
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            scheduler: SchedulerConfig::default(),
            register_seconds: default_register(),
            client_label: None,
            slowdown_per_concurrent: 0.0,
            output_pattern: default_output_pattern(),
            group_workers: default_group_workers(),
            seed: 0,
            spawn_local_agents: true,
            audit_log: None,
            poll_ms: default_poll_ms(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub time: f64,
    pub subject: String,
    pub event: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum TimerKind {
    ActivatePilot(ResourceId),
    /// Delayed-scheduling recheck of a CU.
    Recheck(ResourceId),
    PilotWalltime(ResourceId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timer {
    pub at: f64,
    pub kind: TimerKind,
}

pub(crate) struct PilotEntry {
    pub info: PilotCompute,
    pub sandbox: Arc<dyn Sandbox>,
}

pub(crate) struct DataEntry {
    pub info: PilotData,
    pub storage: Arc<dyn StorageBackend>,
}

/// A CU parked by delayed scheduling.
#[derive(Debug, Clone)]
pub(crate) struct Deferred {
    pub pilot: ResourceId,
    pub reason: crate::scheduler::Reason,
    pub distance: f64,
}

/// PUSH-mode staging started at dispatch.
pub(crate) struct Pushed {
    pub pilot: ResourceId,
    pub ready_at: f64,
    pub handle: Option<JoinHandle<Result<f64>>>,
}

pub(crate) struct Registry {
    pub now: f64,
    pub pilots: BTreeMap<ResourceId, PilotEntry>,
    pub datas: BTreeMap<ResourceId, DataEntry>,
    pub dus: BTreeMap<ResourceId, DataUnit>,
    pub du_home: BTreeMap<ResourceId, ResourceId>,
    /// Output DU -> CUs that still have to finish before it is sealed.
    pub producers: BTreeMap<ResourceId, BTreeSet<ResourceId>>,
    pub cus: BTreeMap<ResourceId, ComputeUnit>,
    /// CUs in NEW waiting for input DUs.
    pub waiting: BTreeSet<ResourceId>,
    pub deferred: BTreeMap<ResourceId, Deferred>,
    /// QUEUED CUs whose affinity no live pilot satisfies yet.
    pub parked: BTreeSet<ResourceId>,
    pub pushed: BTreeMap<ResourceId, Pushed>,
    pub cancel_flags: BTreeMap<ResourceId, Arc<AtomicBool>>,
    /// Why a running local CU is being interrupted.
    pub kill: BTreeMap<ResourceId, Completion>,
    pub timers: Vec<Timer>,
    pub decisions: Vec<PlacementDecision>,
    pub events: Vec<EventRecord>,
    pub rng: ChaCha8Rng,
    pub policy_rng: ChaCha8Rng,
    pub rr_cursor: usize,
    audit: Option<BufWriter<File>>,
}

enum Clock {
    Simulated,
    Wall(Instant),
}

pub struct ServiceBuilder {
    topology: TopologyTree,
    store: Option<Arc<dyn CoordinationStore>>,
    adaptors: AdaptorRegistry,
    bandwidth: BandwidthMatrix,
    config: ServiceConfig,
    simulated: bool,
}

impl ServiceBuilder {
    pub fn store(mut self, store: Arc<dyn CoordinationStore>) -> Self {
        self.store = Some(store);
        self
    }

    pub fn bandwidth(mut self, bw: BandwidthMatrix) -> Self {
        self.bandwidth = bw;
        self
    }

    pub fn config(mut self, cfg: ServiceConfig) -> Self {
        self.config = cfg;
        self
    }

    /// Registers an extra adaptor under `scheme`.
    pub fn adaptor(mut self, scheme: &str, a: Arc<dyn Adaptor>) -> Self {
        self.adaptors.register(scheme, a);
        self
    }

    /// Runs on the simulated clock with the `sim://` adaptor.
    pub fn simulated(mut self) -> Self {
        self.simulated = true;
        self
    }

    pub fn build(self) -> Result<Arc<ComputeDataService>> {
        let mut adaptors = self.adaptors;
        if self.simulated {
            adaptors.register("sim", Arc::new(SimAdaptor));
        } else {
            adaptors.register("local", Arc::new(LocalAdaptor));
        }
        self.config.scheduler.validate()?;
        let store = match self.store {
            Some(s) => s,
            None => MemoryStore::new("local").into_shared(),
        };
        store.create_queue(GLOBAL_QUEUE)?;
        let audit = match &self.config.audit_log {
            Some(p) => Some(BufWriter::new(
                std::fs::OpenOptions::new().create(true).append(true).open(p)?,
            )),
            None => None,
        };
        let seed = self.config.seed;
        let policy_seed = self.config.scheduler.policy.seed().unwrap_or(seed);
        let clock = if self.simulated {
            Clock::Simulated
        } else {
            Clock::Wall(Instant::now())
        };
        Ok(Arc::new_cyclic(|me| ComputeDataService {
            me: me.clone(),
            topology: self.topology,
            store,
            adaptors,
            bandwidth: self.bandwidth,
            config: self.config,
            clock,
            reg: Mutex::new(Registry {
                now: 0.0,
                pilots: BTreeMap::new(),
                datas: BTreeMap::new(),
                dus: BTreeMap::new(),
                du_home: BTreeMap::new(),
                producers: BTreeMap::new(),
                cus: BTreeMap::new(),
                waiting: BTreeSet::new(),
                deferred: BTreeMap::new(),
                parked: BTreeSet::new(),
                pushed: BTreeMap::new(),
                cancel_flags: BTreeMap::new(),
                kill: BTreeMap::new(),
                timers: Vec::new(),
                decisions: Vec::new(),
                events: Vec::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
                policy_rng: ChaCha8Rng::seed_from_u64(policy_seed),
                rr_cursor: 0,
                audit,
            }),
            workers: Mutex::new(Vec::new()),
        }))
    }
}

pub struct ComputeDataService {
    me: Weak<ComputeDataService>,
    topology: TopologyTree,
    store: Arc<dyn CoordinationStore>,
    adaptors: AdaptorRegistry,
    bandwidth: BandwidthMatrix,
    config: ServiceConfig,
    clock: Clock,
    reg: Mutex<Registry>,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

#[derive(Serialize, Deserialize)]
struct DuRecord {
    #[serde(flatten)]
    du: DataUnit,
    home: Option<ResourceId>,
    #[serde(default)]
    producers: BTreeSet<ResourceId>,
}

impl ComputeDataService {
    pub fn builder(topology: TopologyTree) -> ServiceBuilder {
        ServiceBuilder {
            topology,
            store: None,
            adaptors: AdaptorRegistry::new(),
            bandwidth: BandwidthMatrix::new(),
            config: ServiceConfig::default(),
            simulated: false,
        }
    }

    pub fn topology(&self) -> &TopologyTree {
        &self.topology
    }

    pub fn store(&self) -> &Arc<dyn CoordinationStore> {
        &self.store
    }

    pub fn adaptors(&self) -> &AdaptorRegistry {
        &self.adaptors
    }

    pub fn bandwidth(&self) -> &BandwidthMatrix {
        &self.bandwidth
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn is_simulated(&self) -> bool {
        matches!(self.clock, Clock::Simulated)
    }

    pub(crate) fn arc(&self) -> Arc<ComputeDataService> {
        self.me.upgrade().expect("service is alive")
    }

    pub(crate) fn lock(&self) -> MutexGuard<'_, Registry> {
        self.reg.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub(crate) fn now_locked(&self, reg: &Registry) -> f64 {
        match self.clock {
            Clock::Simulated => reg.now,
            Clock::Wall(epoch) => epoch.elapsed().as_secs_f64(),
        }
    }

    /// Simulated time, or wall seconds since the service started.
    pub fn now(&self) -> f64 {
        let reg = self.lock();
        self.now_locked(&reg)
    }

    pub(crate) fn set_sim_time(&self, reg: &mut Registry, t: f64) {
        debug_assert!(self.is_simulated());
        if t > reg.now {
            reg.now = t;
        }
    }

    pub(crate) fn new_id(&self, kind: Kind) -> Result<ResourceId> {
        let n = self.store.next_seq(kind.as_str())?;
        Ok(ResourceId::new(self.store.name(), kind, n))
    }

    pub(crate) fn log_event(
        &self,
        reg: &mut Registry,
        subject: &ResourceId,
        event: &str,
        detail: String,
    ) {
        let time = self.now_locked(reg);
        log::debug!("{time:.3} {subject} {event} {detail}");
        reg.events.push(EventRecord {
            time,
            subject: subject.to_string(),
            event: event.to_owned(),
            detail,
        });
    }

    pub(crate) fn record_decision(&self, reg: &mut Registry, d: PlacementDecision) {
        log::info!(
            "placed {} on {} ({})",
            d.cu,
            d.pilot.as_ref().map_or(GLOBAL_QUEUE, |p| p.as_str()),
            d.reason.as_str()
        );
        if let Some(w) = reg.audit.as_mut() {
            if let Ok(line) = serde_json::to_string(&d) {
                let _ = writeln!(w, "{line}");
                let _ = w.flush();
            }
        }
        reg.decisions.push(d);
    }

    /// Arms a timer: queued for the simulator, or a sleeping thread on the
    /// wall clock.
    pub(crate) fn schedule(&self, reg: &mut Registry, at: f64, kind: TimerKind) {
        if self.is_simulated() {
            reg.timers.push(Timer { at, kind });
            return;
        }
        let delay = (at - self.now_locked(reg)).max(0.0);
        let me = self.me.clone();
        std::thread::spawn(move || {
            std::thread::sleep(Duration::from_secs_f64(delay));
            if let Some(svc) = me.upgrade() {
                if let Err(e) = svc.fire_timer(&kind) {
                    log::warn!("timer {kind:?} failed: {e}");
                }
            }
        });
    }

    pub(crate) fn take_timers(&self) -> Vec<Timer> {
        std::mem::take(&mut self.lock().timers)
    }

    pub(crate) fn fire_timer(&self, kind: &TimerKind) -> Result<()> {
        let mut reg = self.lock();
        match kind {
            TimerKind::ActivatePilot(p) => self.activate_pilot_locked(&mut reg, p),
            TimerKind::Recheck(cu) => self.recheck_locked(&mut reg, cu),
            TimerKind::PilotWalltime(p) => self.walltime_locked(&mut reg, p),
        }
    }

    pub(crate) fn persist_cu(&self, reg: &Registry, id: &ResourceId) -> Result<()> {
        let cu = reg.cus.get(id).ok_or_else(|| Error::lookup("compute unit", id))?;
        self.store.put_state(&id.record_key(), serde_json::to_value(cu)?)?;
        Ok(())
    }

    pub(crate) fn persist_du(&self, reg: &Registry, id: &ResourceId) -> Result<()> {
        let du = reg.dus.get(id).ok_or_else(|| Error::lookup("data unit", id))?;
        let rec = DuRecord {
            du: du.clone(),
            home: reg.du_home.get(id).cloned(),
            producers: reg.producers.get(id).cloned().unwrap_or_default(),
        };
        self.store.put_state(&id.record_key(), serde_json::to_value(rec)?)?;
        Ok(())
    }

    pub(crate) fn persist_pilot(&self, reg: &Registry, id: &ResourceId) -> Result<()> {
        let p = &reg.pilots.get(id).ok_or_else(|| Error::lookup("pilot", id))?.info;
        self.store.put_state(&id.record_key(), serde_json::to_value(p)?)?;
        Ok(())
    }

    pub(crate) fn persist_pd(&self, reg: &Registry, id: &ResourceId) -> Result<()> {
        let p = &reg.datas.get(id).ok_or_else(|| Error::lookup("pilot data", id))?.info;
        self.store.put_state(&id.record_key(), serde_json::to_value(p)?)?;
        Ok(())
    }

    pub fn cu(&self, id: &ResourceId) -> Result<ComputeUnit> {
        self.lock()
            .cus
            .get(id)
            .cloned()
            .ok_or_else(|| Error::lookup("compute unit", id))
    }

    pub fn du(&self, id: &ResourceId) -> Result<DataUnit> {
        self.lock()
            .dus
            .get(id)
            .cloned()
            .ok_or_else(|| Error::lookup("data unit", id))
    }

    pub fn pilot(&self, id: &ResourceId) -> Result<PilotCompute> {
        self.lock()
            .pilots
            .get(id)
            .map(|e| e.info.clone())
            .ok_or_else(|| Error::lookup("pilot", id))
    }

    pub fn pilot_data(&self, id: &ResourceId) -> Result<PilotData> {
        self.lock()
            .datas
            .get(id)
            .map(|e| e.info.clone())
            .ok_or_else(|| Error::lookup("pilot data", id))
    }

    /// Home storage of a Data-Unit (where outputs are staged).
    pub fn du_home(&self, id: &ResourceId) -> Option<ResourceId> {
        self.lock().du_home.get(id).cloned()
    }

    pub fn cus(&self) -> Vec<ComputeUnit> {
        self.lock().cus.values().cloned().collect()
    }

    pub fn pilots(&self) -> Vec<PilotCompute> {
        self.lock().pilots.values().map(|e| e.info.clone()).collect()
    }

    pub fn pilot_datas(&self) -> Vec<PilotData> {
        self.lock().datas.values().map(|e| e.info.clone()).collect()
    }

    pub fn decisions(&self) -> Vec<PlacementDecision> {
        self.lock().decisions.clone()
    }

    pub fn events(&self) -> Vec<EventRecord> {
        self.lock().events.clone()
    }

    pub fn all_terminal(&self) -> bool {
        self.lock().cus.values().all(|c| c.state.is_terminal())
    }

    /// Checks that busy slots equal the CUs holding a slot, per pilot, and
    /// that no pilot exceeds its process count.
    pub fn check_slot_accounting(&self) -> Result<()> {
        let reg = self.lock();
        let mut holding: BTreeMap<&ResourceId, u32> = BTreeMap::new();
        for cu in reg.cus.values() {
            if cu.state.holds_slot() {
                let p = cu.assigned_pilot.as_ref().ok_or_else(|| {
                    Error::Integrity(format!("{} holds a slot without a pilot", cu.id))
                })?;
                *holding.entry(p).or_default() += 1;
            }
        }
        for (id, e) in &reg.pilots {
            let busy = e.info.busy_slots();
            let held = holding.get(id).copied().unwrap_or(0);
            if busy != held || e.info.free_slots > e.info.process_count() {
                return Err(Error::Integrity(format!(
                    "{id}: {busy} busy slots but {held} CUs hold one"
                )));
            }
        }
        Ok(())
    }

    /// Polls until every CU is terminal or `timeout` passes (wall clock).
    pub fn wait_all(&self, timeout: Duration) -> bool {
        let end = Instant::now() + timeout;
        loop {
            if self.all_terminal() {
                return true;
            }
            if Instant::now() >= end {
                return false;
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    /// Polls until the CU is terminal or `timeout` passes.
    pub fn wait_cu(&self, id: &ResourceId, timeout: Duration) -> Result<ComputeUnit> {
        let end = Instant::now() + timeout;
        loop {
            let cu = self.cu(id)?;
            if cu.state.is_terminal() || Instant::now() >= end {
                return Ok(cu);
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    pub(crate) fn add_worker(&self, h: JoinHandle<()>) {
        self.workers.lock().unwrap().push(h);
    }

    /// Stops all pilots and joins local agent threads. Threads are joined
    /// even when stopping a pilot fails; the first error is returned.
    pub fn shutdown(&self) -> Result<()> {
        let ids: Vec<ResourceId> = self.lock().pilots.keys().cloned().collect();
        let mut first = None;
        for id in ids {
            if let Err(e) = self.stop_pilot(&id, PilotState::Done) {
                first.get_or_insert(e);
            }
        }
        let handles = std::mem::take(&mut *self.workers.lock().unwrap());
        for h in handles {
            let _ = h.join();
        }
        first.map_or(Ok(()), Err)
    }

    /// Ends a pilot. CUs queued on it return to the global queue; CUs it is
    /// running are failed (simulated) or interrupted (local).
    pub fn stop_pilot(&self, id: &ResourceId, state: PilotState) -> Result<()> {
        let mut reg = self.lock();
        self.end_pilot_locked(&mut reg, id, state, "pilot terminated")
    }

    pub(crate) fn walltime_locked(&self, reg: &mut Registry, id: &ResourceId) -> Result<()> {
        self.end_pilot_locked(reg, id, PilotState::Done, "WALLTIME")
    }

    fn end_pilot_locked(
        &self,
        reg: &mut Registry,
        id: &ResourceId,
        state: PilotState,
        why: &str,
    ) -> Result<()> {
        let entry = reg.pilots.get_mut(id).ok_or_else(|| Error::lookup("pilot", id))?;
        if entry.info.state.is_terminal() {
            return Ok(());
        }
        entry.info.state = state;
        self.log_event(reg, id, "pilot_end", why.to_owned());
        self.persist_pilot(reg, id)?;
        for cu in self.store.drop_queue(id.as_str())? {
            self.store.enqueue(GLOBAL_QUEUE, &cu)?;
        }
        let running: Vec<ResourceId> = reg
            .cus
            .values()
            .filter(|c| c.state.holds_slot() && c.assigned_pilot.as_ref() == Some(id))
            .map(|c| c.id.clone())
            .collect();
        for cu in running {
            if self.is_simulated() {
                self.finish_locked(reg, &cu, Completion::Failed(why.to_owned()))?;
            } else if let Some(f) = reg.cancel_flags.get(&cu) {
                f.store(true, std::sync::atomic::Ordering::SeqCst);
                reg.kill.insert(cu, Completion::Failed(why.to_owned()));
            }
        }
        let deferred: Vec<ResourceId> = reg
            .deferred
            .iter()
            .filter(|(_, d)| &d.pilot == id)
            .map(|(c, _)| c.clone())
            .collect();
        for cu in deferred {
            self.recheck_locked(reg, &cu)?;
        }
        Ok(())
    }

    /// Rebuilds a service from the records in `store`, typically one restored
    /// from a snapshot. In-flight CUs return to their queues; a CU whose
    /// execution already started is not run again.
    pub fn recover(builder: ServiceBuilder) -> Result<Arc<ComputeDataService>> {
        let svc = builder.build()?;
        svc.reload()?;
        Ok(svc)
    }

    fn reload(&self) -> Result<()> {
        let store = self.store.clone();
        let requeued = store.requeue_in_flight()?;
        let mut reg = self.lock();
        for key in store.keys("pd/")? {
            let pd: PilotData = serde_json::from_value(store.get_state(&key)?.value)?;
            let (adaptor, url) = self.adaptor_for(&pd.description.service_url)?;
            let storage = adaptor.open_storage(&PilotTarget {
                url: &url,
                local_name: &pd.id.local_name(),
                affinity: &pd.affinity,
            })?;
            reg.datas.insert(pd.id.clone(), DataEntry { info: pd, storage });
        }
        for key in store.keys("pilot/")? {
            let mut p: PilotCompute = serde_json::from_value(store.get_state(&key)?.value)?;
            let (adaptor, url) = self.adaptor_for(&p.description.service_url)?;
            let sandbox = adaptor.open_sandbox(&PilotTarget {
                url: &url,
                local_name: &p.id.local_name(),
                affinity: &p.affinity,
            })?;
            p.free_slots = p.process_count();
            store.create_queue(p.id.as_str())?;
            reg.pilots.insert(p.id.clone(), PilotEntry { info: p, sandbox });
        }
        for key in store.keys("du/")? {
            let rec: DuRecord = serde_json::from_value(store.get_state(&key)?.value)?;
            let id = rec.du.id.clone();
            if let Some(h) = rec.home {
                reg.du_home.insert(id.clone(), h);
            }
            if !rec.producers.is_empty() {
                reg.producers.insert(id.clone(), rec.producers);
            }
            reg.dus.insert(id, rec.du);
        }
        for key in store.keys("cu/")? {
            let cu: ComputeUnit = serde_json::from_value(store.get_state(&key)?.value)?;
            reg.cus.insert(cu.id.clone(), cu);
        }
        if self.is_simulated() {
            let latest = reg
                .cus
                .values()
                .flat_map(|c| c.timestamps.values().copied())
                .fold(0.0, f64::max);
            reg.now = latest;
        }
        log::info!("recovered {} CUs, requeued {:?}", reg.cus.len(), requeued);

        let ids: Vec<ResourceId> = reg.cus.keys().cloned().collect();
        for id in ids {
            let cu = &reg.cus[&id];
            let state = cu.state;
            if state.is_terminal() {
                // The CU record is written before its outputs are settled.
                for d in cu.description.output_data.clone() {
                    if let Some(set) = reg.producers.get_mut(&d) {
                        if set.remove(&id) {
                            if state == CuState::Done {
                                self.settle_output_locked(&mut reg, &d)?;
                            } else {
                                self.fail_du_locked(&mut reg, &d)?;
                            }
                        }
                    }
                }
                continue;
            }
            let queued_at = store.locate(id.as_str())?;
            match state {
                CuState::New => {
                    reg.waiting.insert(id.clone());
                }
                CuState::Queued if queued_at.is_none() => {
                    self.place_locked(&mut reg, &id)?;
                }
                s if s.holds_slot() && queued_at.is_none() => {
                    let q = cu
                        .assigned_pilot
                        .as_ref()
                        .map_or(GLOBAL_QUEUE.to_owned(), |p| p.to_string());
                    store.enqueue(&q, id.as_str())?;
                }
                _ => {}
            }
        }
        self.release_waiting_locked(&mut reg)?;
        let local_pilots: Vec<ResourceId> = reg
            .pilots
            .values()
            .filter(|p| p.info.state == PilotState::Active)
            .map(|p| p.info.id.clone())
            .collect();
        drop(reg);
        if !self.is_simulated() {
            for p in local_pilots {
                self.spawn_agents(&p);
            }
        }
        Ok(())
    }

    fn adaptor_for(&self, url: &str) -> Result<(Arc<dyn Adaptor>, ServiceUrl)> {
        let url = ServiceUrl::parse(url)?;
        Ok((self.adaptors.get(&url.scheme)?.clone(), url))
    }

    /// Summary of the store's queues, for reporting.
    pub fn queue_snapshot(&self) -> Result<Value> {
        let reg = self.lock();
        let mut out = serde_json::Map::new();
        out.insert(
            GLOBAL_QUEUE.into(),
            json!(self.store.queue_items(GLOBAL_QUEUE)?),
        );
        for id in reg.pilots.keys() {
            if let Ok(items) = self.store.queue_items(id.as_str()) {
                out.insert(id.to_string(), json!(items));
            }
        }
        Ok(Value::Object(out))
    }
}

impl Drop for ComputeDataService {
    fn drop(&mut self) {
        if let Some(w) = self.reg.get_mut().ok().and_then(|r| r.audit.as_mut()) {
            let _ = w.flush();
        }
    }
}
