//! Affinity-aware placement of Compute-Units onto Pilot-Computes.
//!
//! Pilots that violate a CU's affinity are never considered. The rest are
//! ranked by data distance: the sum over input DUs of bytes times topology
//! distance to the nearest replica.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{Completion, StagingMode};
use crate::coordination::GLOBAL_QUEUE;
use crate::error::{Error, Result};
use crate::pilots::{nearest_replica, PilotDataState, PilotState};
use crate::service::{ComputeDataService, Deferred, Registry, TimerKind};
use crate::units::{
    ComputeUnit, ComputeUnitDescription, CuState, DataUnit, DataUnitDescription, DuState, Kind,
    ResourceId,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Reason {
    AffinityMatch,
    InputDataLocality,
    DelayedRetryExpired,
    NoMatch,
}

impl Reason {
    pub fn as_str(self) -> &'static str {
        match self {
            Reason::AffinityMatch => "AFFINITY_MATCH",
            Reason::InputDataLocality => "INPUT_DATA_LOCALITY",
            Reason::DelayedRetryExpired => "DELAYED_RETRY_EXPIRED",
            Reason::NoMatch => "NO_MATCH",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
#[derive(Default)]
pub enum Policy {
    #[default]
    AffinityAware,
    /// Ignores data location; cycles over pilots that satisfy affinity.
    AffinityBlindRoundrobin,
    /// Ignores data location; picks a pilot uniformly at random.
    Random { seed: u64 },
}


impl Policy {
    pub fn seed(&self) -> Option<u64> {
        match self {
            Policy::Random { seed } => Some(*seed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    #[serde(default)]
    pub policy: Policy,
    /// Wait for a slot on the best pilot (including pilots still queued at
    /// their resource) before falling back to the global queue.
    #[serde(default)]
    pub delayed_scheduling: bool,
    #[serde(default = "default_delay")]
    pub delay_seconds: f64,
}

fn default_delay() -> f64 {
    5.0
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            policy: Policy::AffinityAware,
            delayed_scheduling: false,
            delay_seconds: default_delay(),
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delay_seconds.is_finite() && self.delay_seconds >= 0.0) {
            return Err(Error::validation("delay_seconds must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub pilot: ResourceId,
    pub distance: f64,
    pub available_slots: i64,
}

/// One placement, as written to the audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementDecision {
    pub time: f64,
    pub cu: ResourceId,
    /// `None` when the CU went to the global queue or was parked.
    pub pilot: Option<ResourceId>,
    pub queue: String,
    pub reason: Reason,
    pub distance: Option<f64>,
    pub candidates: Vec<Candidate>,
}

pub const PARKED: &str = "parked";

/// What [`ComputeDataService::cancel`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CancelOutcome {
    /// The CU was already terminal; nothing changed.
    AlreadyTerminal(CuState),
    Canceled,
    /// A local process is being stopped; the CU turns CANCELED shortly.
    Requested,
}

/// Sorts candidates: distance, then free capacity (more first), then id.
pub fn rank(cands: &mut [Candidate]) {
    cands.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then(b.available_slots.cmp(&a.available_slots))
            .then(a.pilot.cmp(&b.pilot))
    });
}

enum Target {
    Pilot(ResourceId, Reason, f64),
    Global(Reason),
    Park(Reason),
    Defer(ResourceId, Reason, f64),
}

impl ComputeDataService {
    /// Registers a Data-Unit. With a Pilot-Data available (nearest to the
    /// unit's affinity, else the first by id) its files are transferred at
    /// once; without one the unit stays NEW.
    pub fn submit_du(&self, desc: &DataUnitDescription) -> Result<DataUnit> {
        let violations = desc.validate();
        if !violations.is_empty() {
            return Err(Error::Validation(violations));
        }
        if let Some(a) = &desc.affinity {
            if !self.topology().contains(a) {
                return Err(Error::lookup("affinity label", a));
            }
        }
        let pd = {
            let reg = self.lock();
            let active: Vec<_> = reg
                .datas
                .values()
                .filter(|d| d.info.state == PilotDataState::Active)
                .filter(|d| {
                    desc.affinity
                        .as_ref()
                        .is_none_or(|a| d.info.affinity.is_within(a))
                })
                .map(|d| (d.info.id.clone(), d.info.affinity.clone()))
                .collect();
            match (&desc.affinity, active.is_empty()) {
                (_, true) => None,
                (None, false) => Some(active[0].0.clone()),
                (Some(a), false) => {
                    let labels: Vec<_> = active.iter().map(|(_, l)| l.clone()).collect();
                    let best = self.topology().nearest(a, &labels)?.clone();
                    active.into_iter().find(|(_, l)| *l == best).map(|(id, _)| id)
                }
            }
        };
        match pd {
            Some(pd) => Ok(self.put_du(&pd, desc)?.0),
            None => {
                let id = self.new_id(Kind::Du)?;
                let du = DataUnit::new(id.clone(), desc);
                let mut reg = self.lock();
                reg.dus.insert(id.clone(), du.clone());
                self.log_event(&mut reg, &id, "du_new", "no pilot-data".into());
                self.persist_du(&reg, &id)?;
                Ok(du)
            }
        }
    }

    /// Empty output container homed on `pd`.
    pub fn create_output_du(&self, pd: &ResourceId, name: Option<&str>) -> Result<DataUnit> {
        let desc = DataUnitDescription {
            name: name.map(str::to_owned),
            ..Default::default()
        };
        Ok(self.put_du(pd, &desc)?.0)
    }

    /// Validates and registers a CU. It is placed as soon as all of its
    /// input DUs are AVAILABLE.
    pub fn submit(&self, desc: ComputeUnitDescription) -> Result<ComputeUnit> {
        let reg = self.lock();
        let violations = desc.validate(|id| reg.dus.contains_key(id));
        if !violations.is_empty() {
            return Err(Error::Validation(violations));
        }
        if let Some(a) = &desc.affinity {
            if !self.topology().contains(a) {
                return Err(Error::lookup("affinity label", a));
            }
        }
        for o in &desc.output_data {
            let st = reg.dus[o].state;
            if st == DuState::Available {
                return Err(Error::Immutable(format!("output {o} is already sealed")));
            }
            if st != DuState::New && st != DuState::Pending {
                return Err(Error::validation(format!("output {o} is {st}")));
            }
        }
        drop(reg);
        let id = self.new_id(Kind::Cu)?;
        let mut reg = self.lock();
        let now = self.now_locked(&reg);
        let cu = ComputeUnit::new(id.clone(), desc, now);
        for o in &cu.description.output_data {
            reg.producers.entry(o.clone()).or_default().insert(id.clone());
            let d = reg.dus.get_mut(o).expect("validated");
            d.mark_pending()?;
        }
        let outputs = cu.description.output_data.clone();
        reg.cus.insert(id.clone(), cu);
        reg.waiting.insert(id.clone());
        self.log_event(&mut reg, &id, "submitted", String::new());
        self.persist_cu(&reg, &id)?;
        for o in &outputs {
            self.persist_du(&reg, o)?;
        }
        self.release_waiting_locked(&mut reg)?;
        Ok(reg.cus[&id].clone())
    }

    /// Moves waiting CUs forward: placed once every input is AVAILABLE,
    /// failed as soon as one input FAILED.
    pub(crate) fn release_waiting_locked(&self, reg: &mut Registry) -> Result<()> {
        let ids: Vec<ResourceId> = reg.waiting.iter().cloned().collect();
        for id in ids {
            let inputs = &reg.cus[&id].description.input_data;
            let mut ready = true;
            let mut failed = None;
            for d in inputs {
                match reg.dus.get(d).map(|d| d.state) {
                    Some(DuState::Available) => {}
                    Some(DuState::Failed | DuState::Deleted) | None => {
                        failed = Some(d.clone());
                        break;
                    }
                    _ => ready = false,
                }
            }
            if let Some(d) = failed {
                reg.waiting.remove(&id);
                self.finish_locked(reg, &id, Completion::Failed(format!("input {d} failed")))?;
                continue;
            }
            if ready {
                reg.waiting.remove(&id);
                let now = self.now_locked(reg);
                reg.cus.get_mut(&id).expect("exists").transition(CuState::Queued, now)?;
                self.persist_cu(reg, &id)?;
                self.place_locked(reg, &id)?;
            }
        }
        Ok(())
    }

    /// Ranked pilots that may run `cu`.
    pub(crate) fn candidates(
        &self,
        reg: &Registry,
        cu: &ComputeUnit,
        include_queued: bool,
    ) -> Result<Vec<Candidate>> {
        let mut out = Vec::new();
        for e in reg.pilots.values() {
            let p = &e.info;
            let eligible = p.state == PilotState::Active
                || (include_queued && p.state == PilotState::QueuedAtResource);
            if !eligible {
                continue;
            }
            if let Some(a) = &cu.description.affinity {
                if !p.affinity.is_within(a) {
                    continue;
                }
            }
            let mut distance = 0.0;
            for d in &cu.description.input_data {
                let du = &reg.dus[d];
                let w = match du.bytes() {
                    0 => 1.0,
                    b => b as f64,
                };
                let hop = nearest_replica(self, reg, du.replicas.iter().cloned(), &p.affinity)?
                    .map_or(f64::INFINITY, |(_, dist)| dist);
                distance += w * hop;
            }
            let queued = self.store().queue_len(p.id.as_str())? as i64;
            out.push(Candidate {
                pilot: p.id.clone(),
                distance,
                available_slots: p.free_slots as i64 - queued,
            });
        }
        rank(&mut out);
        Ok(out)
    }

    fn any_pilot_could_run(&self, reg: &Registry, cu: &ComputeUnit) -> bool {
        reg.pilots.values().any(|e| {
            !e.info.state.is_terminal()
                && cu
                    .description
                    .affinity
                    .as_ref()
                    .is_none_or(|a| e.info.affinity.is_within(a))
        })
    }

    fn fallback(&self, reg: &Registry, cu: &ComputeUnit, reason: Reason) -> Target {
        if cu.description.affinity.is_some() {
            // The global queue is pulled by every pilot, so a constrained CU
            // waits outside it until a matching pilot has room.
            Target::Park(reason)
        } else {
            let _ = reg;
            Target::Global(reason)
        }
    }

    fn choose(&self, reg: &mut Registry, cu: &ComputeUnit) -> Result<(Target, Vec<Candidate>)> {
        let cfg = &self.config().scheduler;
        let unconstrained =
            cu.description.affinity.is_none() && cu.description.input_data.is_empty();
        match &cfg.policy {
            Policy::AffinityAware => {
                if unconstrained {
                    return Ok((Target::Global(Reason::NoMatch), Vec::new()));
                }
                let reason = if cu.description.input_data.is_empty() {
                    Reason::AffinityMatch
                } else {
                    Reason::InputDataLocality
                };
                let cands = self.candidates(reg, cu, cfg.delayed_scheduling)?;
                let target = match cands.first() {
                    Some(b) if b.available_slots > 0 && reg.pilots[&b.pilot].info.state == PilotState::Active => {
                        Target::Pilot(b.pilot.clone(), reason, b.distance)
                    }
                    Some(b) if cfg.delayed_scheduling => {
                        Target::Defer(b.pilot.clone(), reason, b.distance)
                    }
                    _ => self.fallback(reg, cu, Reason::NoMatch),
                };
                Ok((target, cands))
            }
            Policy::AffinityBlindRoundrobin | Policy::Random { .. } => {
                let cands: Vec<Candidate> = self.candidates(reg, cu, false)?;
                if cands.is_empty() {
                    return Ok((self.fallback(reg, cu, Reason::NoMatch), cands));
                }
                let mut ids: Vec<ResourceId> = cands.iter().map(|c| c.pilot.clone()).collect();
                ids.sort();
                let pick = if matches!(cfg.policy, Policy::Random { .. }) {
                    reg.policy_rng.gen_range(0..ids.len())
                } else {
                    let i = reg.rr_cursor % ids.len();
                    reg.rr_cursor += 1;
                    i
                };
                let p = ids[pick].clone();
                let d = cands.iter().find(|c| c.pilot == p).map_or(0.0, |c| c.distance);
                Ok((Target::Pilot(p, Reason::NoMatch, d), cands))
            }
        }
    }

    /// Places a QUEUED CU: a pilot queue, the global queue, a delayed
    /// recheck, or the parked set.
    pub(crate) fn place_locked(&self, reg: &mut Registry, id: &ResourceId) -> Result<()> {
        let cu = reg.cus[id].clone();
        if cu.state != CuState::Queued {
            return Ok(());
        }
        let (target, cands) = self.choose(reg, &cu)?;
        self.apply_target(reg, &cu, target, cands)
    }

    fn apply_target(
        &self,
        reg: &mut Registry,
        cu: &ComputeUnit,
        target: Target,
        candidates: Vec<Candidate>,
    ) -> Result<()> {
        let id = &cu.id;
        let now = self.now_locked(reg);
        let (pilot, queue, reason, distance) = match target {
            Target::Pilot(p, reason, d) => {
                self.store().enqueue(p.as_str(), id.as_str())?;
                if reg.pilots[&p].info.description.staging_mode == StagingMode::Push {
                    if let Err(e) = self.push_inputs_locked(reg, id, &p) {
                        log::warn!("push staging for {id} failed to start: {e}");
                    }
                }
                (Some(p.clone()), p.to_string(), reason, Some(d))
            }
            Target::Global(reason) => {
                self.store().enqueue(GLOBAL_QUEUE, id.as_str())?;
                (None, GLOBAL_QUEUE.to_owned(), reason, None)
            }
            Target::Park(reason) => {
                reg.parked.insert(id.clone());
                (None, PARKED.to_owned(), reason, None)
            }
            Target::Defer(p, reason, d) => {
                reg.deferred.insert(
                    id.clone(),
                    Deferred {
                        pilot: p.clone(),
                        reason,
                        distance: d,
                    },
                );
                let at = now + self.config().scheduler.delay_seconds;
                self.schedule(reg, at, TimerKind::Recheck(id.clone()));
                self.log_event(reg, id, "deferred", format!("{p} until {at}"));
                return Ok(());
            }
        };
        self.log_event(reg, id, "queued", format!("{queue} {}", reason.as_str()));
        self.record_decision(
            reg,
            PlacementDecision {
                time: now,
                cu: id.clone(),
                pilot,
                queue,
                reason,
                distance,
                candidates,
            },
        );
        Ok(())
    }

    /// Delayed-scheduling deadline for a deferred CU.
    pub(crate) fn recheck_locked(&self, reg: &mut Registry, id: &ResourceId) -> Result<()> {
        let Some(def) = reg.deferred.remove(id) else {
            return Ok(());
        };
        let cu = reg.cus[id].clone();
        if cu.state != CuState::Queued {
            return Ok(());
        }
        let cands = self.candidates(reg, &cu, false)?;
        let target = match cands.first() {
            Some(b) if b.available_slots > 0 => Target::Pilot(b.pilot.clone(), def.reason, b.distance),
            _ => self.fallback(reg, &cu, Reason::DelayedRetryExpired),
        };
        self.apply_target(reg, &cu, target, cands)
    }

    /// A slot opened on `pilot` (or it became ACTIVE): hand it to a CU
    /// deferred for this pilot, then retry parked CUs.
    pub(crate) fn slot_freed_locked(&self, reg: &mut Registry, pilot: &ResourceId) -> Result<()> {
        let waiting_here: Vec<ResourceId> = reg
            .deferred
            .iter()
            .filter(|(_, d)| &d.pilot == pilot)
            .map(|(c, _)| c.clone())
            .collect();
        for cu in waiting_here {
            let p = &reg.pilots[pilot].info;
            if p.state != PilotState::Active {
                break;
            }
            let avail = p.free_slots as i64 - self.store().queue_len(pilot.as_str())? as i64;
            if avail <= 0 {
                break;
            }
            let def = reg.deferred.remove(&cu).expect("listed");
            let c = reg.cus[&cu].clone();
            let cands = self.candidates(reg, &c, false)?;
            self.apply_target(reg, &c, Target::Pilot(pilot.clone(), def.reason, def.distance), cands)?;
        }
        let parked: Vec<ResourceId> = reg.parked.iter().cloned().collect();
        for id in parked {
            let c = reg.cus[&id].clone();
            if c.state != CuState::Queued {
                reg.parked.remove(&id);
                continue;
            }
            let cands = self.candidates(reg, &c, false)?;
            if let Some(b) = cands.first().filter(|b| b.available_slots > 0) {
                reg.parked.remove(&id);
                let reason = if c.description.input_data.is_empty() {
                    Reason::AffinityMatch
                } else {
                    Reason::InputDataLocality
                };
                self.apply_target(reg, &c, Target::Pilot(b.pilot.clone(), reason, b.distance), cands)?;
            } else if !self.any_pilot_could_run(reg, &c) {
                log::debug!("{id} stays parked: no pilot satisfies its affinity");
            }
        }
        Ok(())
    }

    /// Cancels a CU. Terminal CUs are left alone with a warning.
    pub fn cancel(&self, id: &ResourceId) -> Result<CancelOutcome> {
        let mut reg = self.lock();
        let cu = reg.cus.get(id).ok_or_else(|| Error::lookup("compute unit", id))?;
        let state = cu.state;
        if state.is_terminal() {
            log::warn!("cancel of {id} ignored: already {state}");
            return Ok(CancelOutcome::AlreadyTerminal(state));
        }
        if state.holds_slot() && !self.is_simulated() {
            if let Some(f) = reg.cancel_flags.get(id) {
                f.store(true, std::sync::atomic::Ordering::SeqCst);
            }
            reg.kill.insert(id.clone(), Completion::Canceled);
            return Ok(CancelOutcome::Requested);
        }
        self.finish_locked(&mut reg, id, Completion::Canceled)?;
        Ok(CancelOutcome::Canceled)
    }
}
