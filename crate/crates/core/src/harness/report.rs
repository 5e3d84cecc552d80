//! Run metrics and their CSV / JSON-lines forms.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pilots::{ReplicationReport, StagingReport};
use crate::scheduler::PlacementDecision;
use crate::service::EventRecord;
use crate::units::{ComputeUnit, CuState};

pub const CSV_HEADER: &str = "cu_id,pilot_id,t_submit,t_queue,staging_s,run_s,t_done";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuRow {
    pub cu_id: String,
    pub pilot_id: String,
    pub state: CuState,
    pub t_submit: f64,
    /// Time between QUEUED and STAGING_IN (pilot-internal queueing).
    pub t_queue: f64,
    pub staging_s: f64,
    pub run_s: f64,
    pub t_done: f64,
}

impl CuRow {
    pub fn from_cu(cu: &ComputeUnit) -> Self {
        let t_submit = cu.entered(CuState::New).unwrap_or(0.0);
        let t_queue = match (cu.entered(CuState::Queued), cu.entered(CuState::StagingIn)) {
            (Some(q), Some(s)) => s - q,
            _ => 0.0,
        };
        let t_done = [CuState::Done, CuState::Failed, CuState::Canceled]
            .iter()
            .find_map(|s| cu.entered(*s))
            .unwrap_or(f64::NAN);
        CuRow {
            cu_id: cu.id.to_string(),
            pilot_id: cu
                .assigned_pilot
                .as_ref()
                .map(|p| p.to_string())
                .unwrap_or_default(),
            state: cu.state,
            t_submit,
            t_queue,
            staging_s: cu.staging_seconds,
            run_s: cu.run_seconds,
            t_done,
        }
    }
}

/// Data-availability components of a run (T_S of the initial puts, T_R of
/// the replication directives, T_D = T_R + T_S).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DataTimes {
    pub t_s: f64,
    pub t_r: f64,
    pub t_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub scenario: String,
    pub seed: u64,
    pub makespan: f64,
    pub data: DataTimes,
    pub cus: Vec<CuRow>,
    /// Pilot name -> CUs it ran to DONE.
    pub per_pilot: BTreeMap<String, usize>,
    pub staging: Vec<StagingReport>,
    pub replications: Vec<ReplicationReport>,
    pub decisions: Vec<PlacementDecision>,
    pub events: Vec<EventRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Summary {
        scenario: String,
        seed: u64,
        makespan: f64,
        data: DataTimes,
        per_pilot: BTreeMap<String, usize>,
    },
    Cu(CuRow),
    Staging(StagingReport),
    Replication(ReplicationReport),
    Decision(PlacementDecision),
    Event(EventRecord),
}

impl RunMetrics {
    pub fn total_staging(&self) -> f64 {
        self.cus.iter().map(|c| c.staging_s).sum()
    }

    pub fn count(&self, state: CuState) -> usize {
        self.cus.iter().filter(|c| c.state == state).count()
    }

    /// One row per CU in id order, columns as in [`CSV_HEADER`].
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for c in &self.cus {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                c.cu_id, c.pilot_id, c.t_submit, c.t_queue, c.staging_s, c.run_s, c.t_done
            );
        }
        s
    }

    /// One row per placement decision with the cost components seen by
    /// that CU.
    pub fn decisions_csv(&self) -> String {
        let mut s = String::from("cu_id,queue,reason,distance,t_q_task,t_x,t_c\n");
        let rows: BTreeMap<&str, &CuRow> =
            self.cus.iter().map(|c| (c.cu_id.as_str(), c)).collect();
        for d in &self.decisions {
            let id = d.cu.to_string();
            let row = rows.get(id.as_str());
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                id,
                d.queue,
                d.reason.as_str(),
                d.distance.map(|x| x.to_string()).unwrap_or_default(),
                row.map_or(0.0, |r| r.t_queue),
                row.map_or(0.0, |r| r.staging_s),
                row.map_or(0.0, |r| r.run_s),
            );
        }
        s
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let mut push = |l: Line| -> Result<()> {
            out.push_str(&serde_json::to_string(&l)?);
            out.push('\n');
            Ok(())
        };
        push(Line::Summary {
            scenario: self.scenario.clone(),
            seed: self.seed,
            makespan: self.makespan,
            data: self.data.clone(),
            per_pilot: self.per_pilot.clone(),
        })?;
        for c in &self.cus {
            push(Line::Cu(c.clone()))?;
        }
        for s in &self.staging {
            push(Line::Staging(s.clone()))?;
        }
        for r in &self.replications {
            push(Line::Replication(r.clone()))?;
        }
        for d in &self.decisions {
            push(Line::Decision(d.clone()))?;
        }
        for e in &self.events {
            push(Line::Event(e.clone()))?;
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut m: Option<RunMetrics> = None;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parsed: Line = serde_json::from_str(line)
                .map_err(|e| Error::validation(format!("line {}: {e}", i + 1)))?;
            match (parsed, m.as_mut()) {
                (
                    Line::Summary {
                        scenario,
                        seed,
                        makespan,
                        data,
                        per_pilot,
                    },
                    None,
                ) => {
                    m = Some(RunMetrics {
                        scenario,
                        seed,
                        makespan,
                        data,
                        cus: Vec::new(),
                        per_pilot,
                        staging: Vec::new(),
                        replications: Vec::new(),
                        decisions: Vec::new(),
                        events: Vec::new(),
                    })
                }
                (Line::Summary { .. }, Some(_)) => {
                    return Err(Error::validation(format!("line {}: second summary", i + 1)))
                }
                (_, None) => {
                    return Err(Error::validation("metrics must start with a summary line"))
                }
                (Line::Cu(c), Some(m)) => m.cus.push(c),
                (Line::Staging(s), Some(m)) => m.staging.push(s),
                (Line::Replication(r), Some(m)) => m.replications.push(r),
                (Line::Decision(d), Some(m)) => m.decisions.push(d),
                (Line::Event(e), Some(m)) => m.events.push(e),
            }
        }
        m.ok_or_else(|| Error::validation("empty metrics file"))
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "scenario {} (seed {})\nmakespan {}\nT_S {}  T_R {}  T_D {}\nCUs: {} done, {} failed, {} canceled\n",
            self.scenario,
            self.seed,
            self.makespan,
            self.data.t_s,
            self.data.t_r,
            self.data.t_d,
            self.count(CuState::Done),
            self.count(CuState::Failed),
            self.count(CuState::Canceled),
        );
        for (p, n) in &self.per_pilot {
            let _ = writeln!(s, "  {p}: {n}");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub makespan_a: f64,
    pub makespan_b: f64,
    /// `b - a`
    pub delta_makespan: f64,
    pub staging_a: f64,
    pub staging_b: f64,
    pub delta_staging: f64,
    pub per_pilot_a: BTreeMap<String, usize>,
    pub per_pilot_b: BTreeMap<String, usize>,
}

pub fn compare(a: &RunMetrics, b: &RunMetrics) -> Comparison {
    Comparison {
        a: a.scenario.clone(),
        b: b.scenario.clone(),
        makespan_a: a.makespan,
        makespan_b: b.makespan,
        delta_makespan: b.makespan - a.makespan,
        staging_a: a.total_staging(),
        staging_b: b.total_staging(),
        delta_staging: b.total_staging() - a.total_staging(),
        per_pilot_a: a.per_pilot.clone(),
        per_pilot_b: b.per_pilot.clone(),
    }
}

impl Comparison {
    pub fn render(&self) -> String {
        format!(
            "metric,{},{},delta\nmakespan,{},{},{}\nstaging,{},{},{}\n",
            self.a,
            self.b,
            self.makespan_a,
            self.makespan_b,
            self.delta_makespan,
            self.staging_a,
            self.staging_b,
            self.delta_staging
        )
    }
}
