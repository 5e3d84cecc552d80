//! Discrete-event driver for a simulated [`ComputeDataService`].

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;
use std::time::Duration;

use crate::agent::{Begin, Completion, Work};
use crate::error::{Error, Result};
use crate::pilots::adaptor::ExecOutcome;
use crate::pilots::PilotState;
use crate::service::{ComputeDataService, TimerKind};
use crate::units::{CuState, ResourceId};

#[derive(Debug, Clone)]
enum EventKind {
    Timer(TimerKind),
    StageInDone(Work),
    RunDone(Work, ExecOutcome),
    StageOutDone(Work),
    Cancel(ResourceId),
}

#[derive(Debug)]
struct Event {
    at: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Event {
    // min-heap on (time, insertion order)
    fn cmp(&self, o: &Self) -> Ordering {
        o.at.total_cmp(&self.at).then(o.seq.cmp(&self.seq))
    }
}

pub struct SimEngine {
    svc: Arc<ComputeDataService>,
    heap: BinaryHeap<Event>,
    seq: u64,
    check_invariants: bool,
    events_processed: u64,
}

impl SimEngine {
    pub fn new(svc: Arc<ComputeDataService>) -> Result<Self> {
        if !svc.is_simulated() {
            return Err(Error::Argument("the simulation engine needs a simulated service".into()));
        }
        Ok(SimEngine {
            svc,
            heap: BinaryHeap::new(),
            seq: 0,
            check_invariants: false,
            events_processed: 0,
        })
    }

    /// Verify slot accounting after every event.
    pub fn check_invariants(mut self, on: bool) -> Self {
        self.check_invariants = on;
        self
    }

    pub fn service(&self) -> &Arc<ComputeDataService> {
        &self.svc
    }

    pub fn events_processed(&self) -> u64 {
        self.events_processed
    }

    fn push(&mut self, at: f64, kind: EventKind) {
        self.seq += 1;
        self.heap.push(Event {
            at,
            seq: self.seq,
            kind,
        });
    }

    /// Cancels `cu` at simulated time `at`.
    pub fn cancel_at(&mut self, at: f64, cu: ResourceId) {
        self.push(at, EventKind::Cancel(cu));
    }

    fn drain_timers(&mut self) {
        for t in self.svc.take_timers() {
            self.push(t.at, EventKind::Timer(t.kind));
        }
    }

    fn now(&self) -> f64 {
        self.svc.now()
    }

    fn fail(&self, w: &Work, e: Error) -> Result<()> {
        if matches!(e, Error::Crashed) {
            return Err(e);
        }
        self.svc.finish(&w.cu, Completion::Failed(e.to_string()))
    }

    fn dispatch_idle(&mut self) -> Result<()> {
        let pilots: Vec<ResourceId> = self
            .svc
            .pilots()
            .into_iter()
            .filter(|p| p.state == PilotState::Active)
            .map(|p| p.id)
            .collect();
        for p in pilots {
            loop {
                match self.svc.begin_next(&p, Duration::ZERO)? {
                    Begin::Empty => break,
                    Begin::Skipped => continue,
                    Begin::Started(w) => match self.svc.stage_in(&w) {
                        Ok(secs) => {
                            let at = self.now() + secs;
                            self.push(at, EventKind::StageInDone(w));
                        }
                        Err(e) => self.fail(&w, e)?,
                    },
                }
            }
        }
        Ok(())
    }

    fn state_of(&self, cu: &ResourceId) -> Option<CuState> {
        self.svc.cu(cu).ok().map(|c| c.state)
    }

    fn handle(&mut self, kind: EventKind) -> Result<()> {
        match kind {
            EventKind::Timer(t) => self.svc.fire_timer(&t)?,
            EventKind::Cancel(cu) => {
                self.svc.cancel(&cu)?;
            }
            EventKind::StageInDone(w) => {
                if self.state_of(&w.cu) != Some(CuState::StagingIn) {
                    return Ok(());
                }
                match self.svc.run(&w) {
                    Ok(out) => {
                        let at = self.now() + out.seconds;
                        self.push(at, EventKind::RunDone(w, out));
                    }
                    Err(e) => self.fail(&w, e)?,
                }
            }
            EventKind::RunDone(w, out) => {
                if self.state_of(&w.cu) != Some(CuState::Running) {
                    return Ok(());
                }
                if !out.success {
                    let why = out.diagnostics.unwrap_or_else(|| "execution failed".into());
                    return self.svc.finish(&w.cu, Completion::Failed(why));
                }
                match self.svc.stage_out(&w) {
                    Ok(secs) => {
                        let at = self.now() + secs;
                        self.push(at, EventKind::StageOutDone(w));
                    }
                    Err(e) => self.fail(&w, e)?,
                }
            }
            EventKind::StageOutDone(w) => {
                if self.state_of(&w.cu) != Some(CuState::StagingOut) {
                    return Ok(());
                }
                self.svc.finish(&w.cu, Completion::Done)?;
            }
        }
        Ok(())
    }

    fn step_once(&mut self) -> Result<bool> {
        let Some(ev) = self.heap.pop() else {
            return Ok(false);
        };
        {
            let mut reg = self.svc.lock();
            self.svc.set_sim_time(&mut reg, ev.at);
        }
        self.handle(ev.kind)?;
        self.events_processed += 1;
        self.drain_timers();
        self.dispatch_idle()?;
        self.drain_timers();
        if self.check_invariants {
            self.svc.check_slot_accounting()?;
        }
        Ok(true)
    }

    /// Runs until no events remain; returns the final simulated time.
    pub fn run(&mut self) -> Result<f64> {
        self.drain_timers();
        self.dispatch_idle()?;
        self.drain_timers();
        while self.step_once()? {}
        Ok(self.now())
    }

    /// Runs every event scheduled at or before `t`, then advances the clock
    /// to `t`.
    pub fn run_until(&mut self, t: f64) -> Result<()> {
        self.drain_timers();
        self.dispatch_idle()?;
        self.drain_timers();
        while self.heap.peek().is_some_and(|e| e.at <= t) {
            self.step_once()?;
        }
        let mut reg = self.svc.lock();
        self.svc.set_sim_time(&mut reg, t);
        Ok(())
    }
}
