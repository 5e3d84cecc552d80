//! Cost model for data placement: staging, replication and queue times, and
//! the rule that picks between moving compute and moving data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pilots::sim::{BandwidthMatrix, QueueModel};
use crate::pilots::ReplicationMode;
use crate::topology::{AffinityLabel, TopologyTree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub t_q_pilot: f64,
    pub t_q_task: f64,
    pub t_c: f64,
    pub t_x: f64,
    pub t_register: f64,
    pub t_s: f64,
    pub t_r: f64,
    pub t_d: f64,
    /// Number of replicas created.
    pub replicas: usize,
}

impl CostEstimate {
    /// Derives T_S and T_D from their parts.
    pub fn compose(
        t_q_pilot: f64,
        t_q_task: f64,
        t_c: f64,
        t_x: f64,
        t_register: f64,
        t_r: f64,
        replicas: usize,
    ) -> Result<Self> {
        for (name, v) in [
            ("T_Q_pilot", t_q_pilot),
            ("T_Q_task", t_q_task),
            ("T_C", t_c),
            ("T_X", t_x),
            ("T_register", t_register),
            ("T_R", t_r),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Model(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        let t_s = t_x + t_register;
        let t_d = if replicas >= 1 { t_r + t_s } else { t_s };
        Ok(CostEstimate {
            t_q_pilot,
            t_q_task,
            t_c,
            t_x,
            t_register,
            t_s,
            t_r,
            t_d,
            replicas,
        })
    }

    pub fn decide(&self) -> PlacementMode {
        decide(self.t_q_pilot, self.t_x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PlacementMode {
    /// Bind compute where the data is and wait for it there.
    ComputeFirst,
    /// Move or replicate the data to where compute is available.
    DataFirst,
}

/// COMPUTE_FIRST when transfer costs strictly more than queueing, else
/// DATA_FIRST.
pub fn decide(t_q: f64, t_x: f64) -> PlacementMode {
    if t_x > t_q {
        PlacementMode::ComputeFirst
    } else {
        PlacementMode::DataFirst
    }
}

/// Bytes moved between two topology nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataMove {
    pub from: AffinityLabel,
    pub to: AffinityLabel,
    pub bytes: u64,
}

impl DataMove {
    pub fn new(from: AffinityLabel, to: AffinityLabel, bytes: u64) -> Self {
        DataMove { from, to, bytes }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    /// Transfers that stage the input (summed into T_X).
    pub staging: Vec<DataMove>,
    /// Files registered after staging.
    pub files: usize,
    pub register_seconds: f64,
    /// One entry per replica created.
    #[serde(default)]
    pub replicas: Vec<DataMove>,
    #[serde(default = "default_mode")]
    pub replication_mode: ReplicationMode,
    #[serde(default)]
    pub pilot_queue: Option<QueueModel>,
    #[serde(default)]
    pub t_q_task: f64,
    #[serde(default)]
    pub t_c: f64,
}

fn default_mode() -> ReplicationMode {
    ReplicationMode::Sequential
}

impl Workload {
    pub fn new() -> Self {
        Workload {
            staging: Vec::new(),
            files: 0,
            register_seconds: 0.0,
            replicas: Vec::new(),
            replication_mode: ReplicationMode::Sequential,
            pilot_queue: None,
            t_q_task: 0.0,
            t_c: 0.0,
        }
    }
}

impl Default for Workload {
    fn default() -> Self {
        Self::new()
    }
}

fn move_seconds(m: &DataMove, topology: &TopologyTree, bw: &BandwidthMatrix) -> Result<f64> {
    for l in [&m.from, &m.to] {
        if !topology.contains(l) {
            return Err(Error::lookup("affinity label", l));
        }
    }
    bw.transfer_seconds(&m.from, &m.to, m.bytes)
}

/// Expected costs of a workload. The queue time of a pilot is the mean of
/// its queue model.
pub fn estimate(w: &Workload, topology: &TopologyTree, bw: &BandwidthMatrix) -> Result<CostEstimate> {
    let mut t_x = 0.0;
    for m in &w.staging {
        t_x += move_seconds(m, topology, bw)?;
    }
    let mut per_replica = Vec::with_capacity(w.replicas.len());
    for m in &w.replicas {
        per_replica.push(move_seconds(m, topology, bw)?);
    }
    let t_r = match w.replication_mode {
        ReplicationMode::Sequential => per_replica.iter().sum(),
        ReplicationMode::Group => per_replica.iter().copied().fold(0.0, f64::max),
    };
    let t_q_pilot = match &w.pilot_queue {
        Some(q) => {
            q.validate()?;
            q.expected()
        }
        None => 0.0,
    };
    CostEstimate::compose(
        t_q_pilot,
        w.t_q_task,
        w.t_c,
        t_x,
        w.register_seconds * w.files as f64,
        t_r,
        w.replicas.len(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub label: AffinityLabel,
    pub slots: u32,
}

impl Site {
    pub fn new(label: AffinityLabel, slots: u32) -> Self {
        Site { label, slots }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub site: AffinityLabel,
    /// Existing replica the copy is made from.
    pub source: AffinityLabel,
    pub distance_from_seed: f64,
    pub cumulative_slots: u64,
    pub incremental_t_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationPlan {
    pub steps: Vec<PlanStep>,
    /// Capacity of all sites falls short of the demand.
    pub insufficient: bool,
}

impl ReplicationPlan {
    pub fn replicas(&self) -> usize {
        self.steps.len()
    }

    /// Replication time when the steps run one after another.
    pub fn sequential_t_r(&self) -> f64 {
        self.steps.iter().map(|s| s.incremental_t_r).sum()
    }
}

/// Grows a replica set outward from `seed` until the chosen sites offer at
/// least `demand` compute slots. Sites are taken in order of distance from
/// the seed (ties by label); each copy reads from the nearest replica that
/// already exists.
pub fn plan_replication(
    topology: &TopologyTree,
    seed: &AffinityLabel,
    sites: &[Site],
    demand: u64,
    du_bytes: u64,
    bw: &BandwidthMatrix,
) -> Result<ReplicationPlan> {
    if sites.is_empty() {
        return Err(Error::Argument("plan_replication needs at least one site".into()));
    }
    let mut order = Vec::with_capacity(sites.len());
    for s in sites {
        if order.iter().any(|(_, o): &(f64, &Site)| o.label == s.label) {
            return Err(Error::Argument(format!("site {} listed twice", s.label)));
        }
        order.push((topology.distance(seed, &s.label)?, s));
    }
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.label.cmp(&b.1.label)));

    let mut have = vec![seed.clone()];
    let mut steps = Vec::new();
    let mut cumulative = 0u64;
    for (dist, site) in order {
        if cumulative >= demand && !steps.is_empty() {
            break;
        }
        let source = topology.nearest(&site.label, &have)?.clone();
        let t = bw.transfer_seconds(&source, &site.label, du_bytes)?;
        cumulative += site.slots as u64;
        steps.push(PlanStep {
            site: site.label.clone(),
            source,
            distance_from_seed: dist,
            cumulative_slots: cumulative,
            incremental_t_r: t,
        });
        have.push(site.label.clone());
    }
    Ok(ReplicationPlan {
        insufficient: cumulative < demand,
        steps,
    })
}
