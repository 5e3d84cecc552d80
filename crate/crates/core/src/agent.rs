//! Pilot-side execution: pull a CU, stage its inputs, run it, stage its
//! outputs, release the slot. The same steps drive local worker threads and
//! the discrete-event simulator.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::coordination::{Source, GLOBAL_QUEUE};
use crate::error::{Error, Result};
use crate::pilots::adaptor::{ExecControl, ExecOutcome, Interrupt, Sandbox, StorageBackend};
use crate::pilots::{nearest_replica, PilotState};
use crate::service::{ComputeDataService, Pushed, Registry};
use crate::units::{CuState, DuState, FileEntry, ResourceId};

/// Who moves input data to the pilot.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StagingMode {
    /// The agent fetches inputs after pulling the CU.
    #[default]
    Pull,
    /// The manager starts sending inputs when the CU is dispatched.
    Push,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Completion {
    Done,
    Failed(String),
    Canceled,
}

/// A CU an agent has taken from a queue and holds a slot for.
#[derive(Debug, Clone)]
pub struct Work {
    pub cu: ResourceId,
    pub pilot: ResourceId,
    /// State the CU was in when taken; later than STAGING_IN after recovery.
    pub resume: CuState,
}

pub enum Begin {
    Started(Work),
    /// Something was pulled but needs no work here.
    Skipped,
    Empty,
}

/// One input file and where it comes from.
pub(crate) struct InputStep {
    pub du: ResourceId,
    pub rel: String,
    pub entry: FileEntry,
    pub link: bool,
    pub storage: Arc<dyn StorageBackend>,
}

pub(crate) struct InputPlan {
    pub steps: Vec<InputStep>,
    /// Modelled transfer time (simulated clock).
    pub seconds: f64,
}

fn copy_inputs(sandbox: &dyn Sandbox, cu: &ResourceId, steps: &[InputStep]) -> Result<()> {
    sandbox.prepare(cu)?;
    for s in steps {
        let res = if s.link {
            sandbox.link_input(cu, &s.rel, s.storage.as_ref(), &s.du)
        } else {
            s.storage
                .get(&s.du, &s.rel)
                .and_then(|b| sandbox.copy_input(cu, &s.rel, &b))
        };
        res.map_err(|e| Error::Staging(format!("{}/{}: {e}", s.du, s.rel)))?;
        let got = sandbox
            .file_entry(cu, &s.rel)
            .map_err(|e| Error::Staging(format!("{}/{}: {e}", s.du, s.rel)))?;
        if got != s.entry {
            return Err(Error::Staging(format!(
                "{}/{}: digest mismatch after staging",
                s.du, s.rel
            )));
        }
    }
    Ok(())
}

impl ComputeDataService {
    /// Where each input file of `cu` is read from when it runs on `pilot`.
    pub(crate) fn input_plan(
        &self,
        reg: &Registry,
        cu: &ResourceId,
        pilot: &ResourceId,
    ) -> Result<InputPlan> {
        let c = &reg.cus[cu];
        let plabel = &reg.pilots[pilot].info.affinity;
        let mut steps = Vec::new();
        let mut names = BTreeSet::new();
        let mut seconds = 0.0;
        for du_id in &c.description.input_data {
            let du = reg.dus.get(du_id).ok_or_else(|| Error::lookup("data unit", du_id))?;
            if du.state != DuState::Available {
                return Err(Error::Staging(format!("{du_id} is {}", du.state)));
            }
            let (src, distance) = nearest_replica(self, reg, du.replicas.iter().cloned(), plabel)?
                .ok_or_else(|| Error::Staging(format!("{du_id} has no reachable replica")))?;
            let src_entry = &reg.datas[&src];
            let link = distance == 0.0;
            if self.is_simulated() && !link {
                seconds += self.bandwidth().transfer_seconds(
                    &src_entry.info.affinity,
                    plabel,
                    du.bytes(),
                )?;
            }
            for (rel, entry) in &du.manifest {
                if !names.insert(rel.clone()) {
                    return Err(Error::Staging(format!(
                        "input file name {rel:?} occurs in more than one data unit"
                    )));
                }
                steps.push(InputStep {
                    du: du_id.clone(),
                    rel: rel.clone(),
                    entry: entry.clone(),
                    link,
                    storage: src_entry.storage.clone(),
                });
            }
        }
        Ok(InputPlan { steps, seconds })
    }

    /// Starts PUSH staging for a CU just enqueued on `pilot`.
    pub(crate) fn push_inputs_locked(
        &self,
        reg: &mut Registry,
        cu: &ResourceId,
        pilot: &ResourceId,
    ) -> Result<()> {
        let plan = self.input_plan(reg, cu, pilot)?;
        let now = self.now_locked(reg);
        if self.is_simulated() {
            reg.pushed.insert(
                cu.clone(),
                Pushed {
                    pilot: pilot.clone(),
                    ready_at: now + plan.seconds,
                    handle: None,
                },
            );
            return Ok(());
        }
        let sandbox = reg.pilots[pilot].sandbox.clone();
        let id = cu.clone();
        let started = Instant::now();
        let handle = std::thread::spawn(move || {
            copy_inputs(sandbox.as_ref(), &id, &plan.steps)?;
            Ok(started.elapsed().as_secs_f64())
        });
        reg.pushed.insert(
            cu.clone(),
            Pushed {
                pilot: pilot.clone(),
                ready_at: now,
                handle: Some(handle),
            },
        );
        Ok(())
    }

    /// Takes the next CU for `pilot` (its own queue first, then global) and
    /// reserves a slot for it.
    pub fn begin_next(&self, pilot: &ResourceId, wait: Duration) -> Result<Begin> {
        {
            let reg = self.lock();
            let p = reg.pilots.get(pilot).ok_or_else(|| Error::lookup("pilot", pilot))?;
            if p.info.state != PilotState::Active || p.info.free_slots == 0 {
                return Ok(Begin::Empty);
            }
        }
        let pulled = if wait.is_zero() {
            self.store().pull(pilot.as_str())?
        } else {
            self.store().pull_timeout(pilot.as_str(), wait)?
        };
        let Some(pulled) = pulled else {
            return Ok(Begin::Empty);
        };
        let id = ResourceId::parse(&pulled.id)?;
        let mut reg = self.lock();
        let now = self.now_locked(&reg);
        let Some(cu) = reg.cus.get(&id) else {
            self.store().ack(&pulled.id)?;
            return Ok(Begin::Skipped);
        };
        let state = cu.state;
        if state.is_terminal() || state == CuState::New {
            self.store().ack(&pulled.id)?;
            return Ok(Begin::Skipped);
        }
        let pinfo = &reg.pilots[pilot].info;
        let active = pinfo.state == PilotState::Active;
        let fits = cu
            .description
            .affinity
            .as_ref()
            .is_none_or(|a| pinfo.affinity.is_within(a));
        let bound_elsewhere = state.holds_slot()
            && cu.assigned_pilot.as_ref().is_some_and(|p| p != pilot);
        if !active || pinfo.free_slots == 0 || !fits || bound_elsewhere {
            self.store().ack(&pulled.id)?;
            let back = match (&pulled.source, state.holds_slot()) {
                (_, true) => cu.assigned_pilot.as_ref().expect("bound").to_string(),
                (Source::Pilot, false) if active => pilot.to_string(),
                _ if !fits => {
                    reg.parked.insert(id.clone());
                    return Ok(Begin::Skipped);
                }
                _ => GLOBAL_QUEUE.to_owned(),
            };
            self.store().enqueue(&back, &pulled.id)?;
            return Ok(Begin::Skipped);
        }
        let c = reg.cus.get_mut(&id).expect("exists");
        if state == CuState::Queued {
            c.assign(pilot)?;
            c.transition(CuState::StagingIn, now)?;
        }
        reg.pilots.get_mut(pilot).expect("exists").info.free_slots -= 1;
        reg.cancel_flags
            .insert(id.clone(), Arc::new(AtomicBool::new(false)));
        self.log_event(&mut reg, &id, "staging_in", pilot.to_string());
        self.persist_cu(&reg, &id)?;
        self.persist_pilot(&reg, pilot)?;
        Ok(Begin::Started(Work {
            cu: id,
            pilot: pilot.clone(),
            resume: state,
        }))
    }

    /// Moves input files into the CU's sandbox. Returns the staging time:
    /// modelled on the simulated clock, measured otherwise.
    pub fn stage_in(&self, w: &Work) -> Result<f64> {
        let (plan, sandbox, pushed) = {
            let mut reg = self.lock();
            let pushed = match reg.pushed.remove(&w.cu) {
                Some(p) if p.pilot == w.pilot => Some(p),
                _ => None,
            };
            let plan = if pushed.is_none() {
                Some(self.input_plan(&reg, &w.cu, &w.pilot)?)
            } else {
                None
            };
            (plan, reg.pilots[&w.pilot].sandbox.clone(), pushed)
        };
        let started = Instant::now();
        let seconds = match (pushed, plan) {
            (Some(p), _) if self.is_simulated() => {
                let now = self.now();
                (p.ready_at - now).max(0.0)
            }
            (Some(mut p), _) => {
                let h = p.handle.take().expect("local push has a handle");
                h.join()
                    .map_err(|_| Error::Staging("push worker panicked".into()))??;
                started.elapsed().as_secs_f64()
            }
            (None, Some(plan)) => {
                copy_inputs(sandbox.as_ref(), &w.cu, &plan.steps)?;
                if self.is_simulated() {
                    plan.seconds
                } else {
                    started.elapsed().as_secs_f64()
                }
            }
            (None, None) => unreachable!(),
        };
        let mut reg = self.lock();
        if let Some(c) = reg.cus.get_mut(&w.cu) {
            c.staging_seconds += seconds;
        }
        Ok(seconds)
    }

    fn control_for(&self, reg: &Registry, w: &Work) -> ExecControl {
        let cancel = reg
            .cancel_flags
            .get(&w.cu)
            .cloned()
            .unwrap_or_else(|| Arc::new(AtomicBool::new(false)));
        let deadline = if self.is_simulated() {
            None
        } else {
            reg.pilots[&w.pilot].info.walltime_end().map(|end| {
                let left = (end - self.now_locked(reg)).max(0.0);
                Instant::now() + Duration::from_secs_f64(left)
            })
        };
        ExecControl { cancel, deadline }
    }

    /// Marks the CU RUNNING (persisting the execution marker) and executes
    /// it. A CU that was already RUNNING before a restart is not executed
    /// again.
    pub fn run(&self, w: &Work) -> Result<ExecOutcome> {
        let (sandbox, desc, ctl, slowdown) = {
            let mut reg = self.lock();
            let now = self.now_locked(&reg);
            let c = reg.cus.get_mut(&w.cu).ok_or_else(|| Error::lookup("compute unit", &w.cu))?;
            if c.state == CuState::Running && c.executions >= 1 {
                c.diagnostics = Some("execution not repeated after recovery".into());
                self.persist_cu(&reg, &w.cu)?;
                return Ok(ExecOutcome {
                    success: true,
                    seconds: 0.0,
                    diagnostics: None,
                    interrupted: None,
                });
            }
            c.transition(CuState::Running, now)?;
            c.executions += 1;
            let desc = c.description.clone();
            self.persist_cu(&reg, &w.cu)?;
            self.log_event(&mut reg, &w.cu, "running", w.pilot.to_string());
            let concurrent = reg
                .cus
                .values()
                .filter(|c| c.state == CuState::Running && c.assigned_pilot.as_ref() == Some(&w.pilot))
                .count();
            let slowdown =
                1.0 + self.config().slowdown_per_concurrent * (concurrent.max(1) - 1) as f64;
            let ctl = self.control_for(&reg, w);
            (reg.pilots[&w.pilot].sandbox.clone(), desc, ctl, slowdown)
        };
        let mut out = sandbox.execute(&w.cu, &desc, &ctl)?;
        if self.is_simulated() {
            out.seconds *= slowdown;
        }
        let mut reg = self.lock();
        if let Some(c) = reg.cus.get_mut(&w.cu) {
            c.run_seconds = out.seconds;
        }
        Ok(out)
    }

    /// Collects output files into the first output Data-Unit's home storage.
    pub fn stage_out(&self, w: &Work) -> Result<f64> {
        let (sandbox, target, exclude, plabel) = {
            let mut reg = self.lock();
            let now = self.now_locked(&reg);
            let c = reg.cus.get_mut(&w.cu).ok_or_else(|| Error::lookup("compute unit", &w.cu))?;
            if c.state == CuState::Running {
                c.transition(CuState::StagingOut, now)?;
            }
            let outs = c.description.output_data.clone();
            let inputs = c.description.input_data.clone();
            self.persist_cu(&reg, &w.cu)?;
            let target = match outs.first() {
                None => None,
                Some(du) => {
                    let home = reg.du_home.get(du).cloned().ok_or_else(|| {
                        Error::Staging(format!("output {du} has no pilot-data to live on"))
                    })?;
                    let st = reg.dus[du].state;
                    if st == DuState::Available {
                        return Err(Error::Immutable(format!("output {du} is already sealed")));
                    }
                    if st != DuState::Pending {
                        return Err(Error::Staging(format!("output {du} is {st}")));
                    }
                    let e = &reg.datas[&home];
                    Some((du.clone(), e.storage.clone(), e.info.affinity.clone()))
                }
            };
            let mut exclude = BTreeSet::new();
            for d in &inputs {
                if let Some(du) = reg.dus.get(d) {
                    exclude.extend(du.manifest.keys().cloned());
                }
            }
            exclude.insert(crate::pilots::local::STDOUT_FILE.to_owned());
            exclude.insert(crate::pilots::local::STDERR_FILE.to_owned());
            (
                reg.pilots[&w.pilot].sandbox.clone(),
                target,
                exclude,
                reg.pilots[&w.pilot].info.affinity.clone(),
            )
        };
        let Some((du, storage, home_label)) = target else {
            return Ok(0.0);
        };
        let started = Instant::now();
        let pattern = glob::Pattern::new(&self.config().output_pattern)
            .map_err(|e| Error::validation(format!("output pattern: {e}")))?;
        let files = sandbox.collect_outputs(&w.cu, &pattern, &exclude)?;
        if files.is_empty() {
            return Err(Error::Staging(format!(
                "{} produced no files for output {du}",
                w.cu
            )));
        }
        let mut staged = Vec::new();
        let mut bytes = 0;
        for (rel, blob) in files {
            let stored = storage.put(&du, &rel, &blob)?;
            if stored != blob.entry() {
                return Err(Error::Staging(format!("{du}/{rel}: digest mismatch after copy")));
            }
            bytes += stored.size;
            staged.push((rel, stored));
        }
        let seconds = if self.is_simulated() {
            self.bandwidth().transfer_seconds(&plabel, &home_label, bytes)?
        } else {
            started.elapsed().as_secs_f64()
        };
        let mut reg = self.lock();
        let d = reg.dus.get_mut(&du).expect("exists");
        for (rel, e) in staged {
            d.stage_file(&rel, e)?;
        }
        self.persist_du(&reg, &du)?;
        if let Some(c) = reg.cus.get_mut(&w.cu) {
            c.staging_seconds += seconds;
        }
        Ok(seconds)
    }

    /// Terminal bookkeeping for a CU: release its slot, ack it, settle its
    /// output Data-Units and wake whatever was waiting.
    pub fn finish(&self, cu: &ResourceId, how: Completion) -> Result<()> {
        let mut reg = self.lock();
        self.finish_locked(&mut reg, cu, how)
    }

    pub(crate) fn finish_locked(
        &self,
        reg: &mut Registry,
        id: &ResourceId,
        how: Completion,
    ) -> Result<()> {
        let now = self.now_locked(reg);
        let c = reg.cus.get_mut(id).ok_or_else(|| Error::lookup("compute unit", id))?;
        if c.state.is_terminal() {
            return Ok(());
        }
        let held = c.state.holds_slot();
        let pilot = c.assigned_pilot.clone();
        match &how {
            Completion::Done => c.transition(CuState::Done, now)?,
            Completion::Failed(why) => c.fail(why.clone(), now)?,
            Completion::Canceled => c.transition(CuState::Canceled, now)?,
        }
        let outputs = c.description.output_data.clone();
        reg.cancel_flags.remove(id);
        reg.kill.remove(id);
        reg.pushed.remove(id);
        reg.deferred.remove(id);
        reg.parked.remove(id);
        reg.waiting.remove(id);
        if held {
            if let Some(p) = &pilot {
                if let Some(e) = reg.pilots.get_mut(p) {
                    e.info.free_slots = (e.info.free_slots + 1).min(e.info.process_count());
                }
            }
            self.store().ack(id.as_str())?;
        } else {
            self.store().remove(id.as_str())?;
        }
        let label = match &how {
            Completion::Done => "done".to_owned(),
            Completion::Failed(w) => format!("failed: {w}"),
            Completion::Canceled => "canceled".to_owned(),
        };
        self.log_event(reg, id, "finished", label);
        self.persist_cu(reg, id)?;
        if let Some(p) = &pilot {
            if held {
                self.persist_pilot(reg, p)?;
            }
        }
        for du in outputs {
            if let Some(set) = reg.producers.get_mut(&du) {
                set.remove(id);
            }
            if how == Completion::Done {
                self.settle_output_locked(reg, &du)?;
            } else {
                self.fail_du_locked(reg, &du)?;
            }
        }
        self.release_waiting_locked(reg)?;
        if held {
            if let Some(p) = pilot {
                self.slot_freed_locked(reg, &p)?;
            }
        }
        Ok(())
    }

    /// Seals an output DU once none of its producers is outstanding.
    pub(crate) fn settle_output_locked(&self, reg: &mut Registry, du: &ResourceId) -> Result<()> {
        if reg.producers.get(du).is_some_and(|s| !s.is_empty()) {
            return Ok(());
        }
        reg.producers.remove(du);
        let Some(home) = reg.du_home.get(du).cloned() else {
            return Ok(());
        };
        let d = &reg.dus[du];
        if d.state != DuState::Pending {
            return Ok(());
        }
        let storage = reg.datas[&home].storage.clone();
        let manifest = d.staged.clone();
        let bytes = crate::units::manifest_bytes(&manifest);
        let d = reg.dus.get_mut(du).expect("exists");
        let sealed = d.seal(manifest, |rel, e| {
            storage.entry(du, rel).map(|s| s == *e).unwrap_or(false)
        });
        match sealed {
            Ok(()) => {
                d.replicas.insert(home.clone());
                let e = reg.datas.get_mut(&home).expect("exists");
                e.info.held_dus.insert(du.clone());
                e.info.bytes_used += bytes;
                self.log_event(reg, du, "du_available", home.to_string());
                self.persist_pd(reg, &home)?;
            }
            Err(err) => {
                log::warn!("sealing {du} failed: {err}");
                reg.dus.get_mut(du).expect("exists").fail();
                self.log_event(reg, du, "du_failed", err.to_string());
            }
        }
        self.persist_du(reg, du)
    }

    pub(crate) fn fail_du_locked(&self, reg: &mut Registry, du: &ResourceId) -> Result<()> {
        if let Some(d) = reg.dus.get_mut(du) {
            if matches!(d.state, DuState::New | DuState::Pending) {
                d.fail();
                self.log_event(reg, du, "du_failed", "producer did not complete".into());
                self.persist_du(reg, du)?;
            }
        }
        Ok(())
    }

    /// Runs one CU from the pilot's queues to a terminal state. Returns the
    /// CU handled, or `None` if nothing was available within `wait`.
    pub fn process_next(&self, pilot: &ResourceId, wait: Duration) -> Result<Option<ResourceId>> {
        let w = match self.begin_next(pilot, wait)? {
            Begin::Started(w) => w,
            Begin::Skipped => return Ok(None),
            Begin::Empty => return Ok(None),
        };
        let how = self.drive(&w)?;
        self.finish(&w.cu, how)?;
        Ok(Some(w.cu))
    }

    fn killed(&self, id: &ResourceId) -> Option<Completion> {
        let reg = self.lock();
        if let Some(k) = reg.kill.get(id) {
            return Some(k.clone());
        }
        reg.cancel_flags
            .get(id)
            .filter(|f| f.load(Ordering::SeqCst))
            .map(|_| Completion::Canceled)
    }

    /// Steps a started CU through staging, execution and stage-out. Errors
    /// from the coordination store propagate; anything else fails the CU.
    fn drive(&self, w: &Work) -> Result<Completion> {
        let step = |r: Result<()>| -> Result<Option<Completion>> {
            match r {
                Ok(()) => Ok(self.killed(&w.cu)),
                Err(Error::Crashed) => Err(Error::Crashed),
                Err(e) => Ok(Some(Completion::Failed(e.to_string()))),
            }
        };
        if let Some(k) = self.killed(&w.cu) {
            return Ok(k);
        }
        if w.resume <= CuState::StagingIn {
            if let Some(c) = step(self.stage_in(w).map(|_| ()))? {
                return Ok(c);
            }
        }
        if w.resume <= CuState::Running {
            let out = match self.run(w) {
                Ok(o) => o,
                Err(Error::Crashed) => return Err(Error::Crashed),
                Err(e) => return Ok(Completion::Failed(e.to_string())),
            };
            if let Some(why) = out.interrupted {
                return Ok(match why {
                    Interrupt::Walltime => Completion::Failed("WALLTIME".into()),
                    Interrupt::Canceled => {
                        self.killed(&w.cu).unwrap_or(Completion::Canceled)
                    }
                });
            }
            if !out.success {
                return Ok(Completion::Failed(
                    out.diagnostics.unwrap_or_else(|| "execution failed".into()),
                ));
            }
            if let Some(k) = self.killed(&w.cu) {
                return Ok(k);
            }
        }
        if let Some(c) = step(self.stage_out(w).map(|_| ()))? {
            return Ok(c);
        }
        Ok(Completion::Done)
    }

    /// Starts one worker thread per slot for a local pilot.
    pub(crate) fn spawn_agents(&self, pilot: &ResourceId) {
        if !self.config().spawn_local_agents {
            return;
        }
        let n = match self.pilot(pilot) {
            Ok(p) => p.process_count(),
            Err(_) => return,
        };
        let poll = Duration::from_millis(self.config().poll_ms.max(1));
        for i in 0..n {
            let svc = Arc::downgrade(&self.arc());
            let pilot = pilot.clone();
            let h: JoinHandle<()> = std::thread::Builder::new()
                .name(format!("{}-agent-{i}", pilot.local_name()))
                .spawn(move || loop {
                    let Some(svc) = svc.upgrade() else { break };
                    match svc.pilot(&pilot).map(|p| p.state) {
                        Ok(PilotState::Active) => {}
                        Ok(s) if s.is_terminal() => break,
                        Ok(_) => {
                            std::thread::sleep(poll);
                            continue;
                        }
                        Err(_) => break,
                    }
                    if let Err(e) = svc.process_next(&pilot, poll) {
                        log::error!("agent for {pilot} stopped: {e}");
                        break;
                    }
                })
                .expect("spawn agent thread");
            self.add_worker(h);
        }
    }
}
