//! Declarative scenario files.

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::agent::StagingMode;
use crate::error::{Error, Result};
use crate::pilots::adaptor::ServiceUrl;
use crate::pilots::sim::{BandwidthConfig, QueueModel};
use crate::pilots::ReplicationMode;
use crate::scheduler::SchedulerConfig;
use crate::topology::{AffinityLabel, TopologyConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub topology: TopologyConfig,
    #[serde(default)]
    pub bandwidths: BandwidthConfig,
    #[serde(default)]
    pub register_seconds: f64,
    #[serde(default)]
    pub slowdown_per_concurrent: f64,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    pub pilot_computes: Vec<PilotSpec>,
    #[serde(default)]
    pub pilot_datas: Vec<PilotDataSpec>,
    #[serde(default)]
    pub data_units: Vec<DataUnitSpec>,
    #[serde(default)]
    pub replications: Vec<ReplicationSpec>,
    pub workload: Vec<WorkloadItem>,
    /// Scratch directory for generated input files (local runs only).
    #[serde(default)]
    pub work_dir: Option<PathBuf>,
    /// Wall-clock limit for local runs.
    #[serde(default = "default_timeout")]
    pub timeout_seconds: f64,
}

fn default_timeout() -> f64 {
    300.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotSpec {
    pub name: String,
    pub service_url: String,
    pub process_count: u32,
    #[serde(default)]
    pub affinity: Option<AffinityLabel>,
    #[serde(default)]
    pub queue_model: Option<QueueModel>,
    #[serde(default)]
    pub walltime: Option<f64>,
    #[serde(default)]
    pub staging_mode: StagingMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotDataSpec {
    pub name: String,
    pub service_url: String,
    #[serde(default)]
    pub affinity: Option<AffinityLabel>,
    #[serde(default)]
    pub capacity: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSpec {
    pub name: String,
    pub size: u64,
    /// Existing file to use instead of generated content (local runs).
    #[serde(default)]
    pub path: Option<PathBuf>,
}

/// A Data-Unit placed on `pilot_data` before the run. No files makes it an
/// output container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataUnitSpec {
    pub name: String,
    pub pilot_data: String,
    #[serde(default)]
    pub files: Vec<FileSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicationSpec {
    pub data_unit: String,
    pub targets: Vec<String>,
    #[serde(default = "default_replication_mode")]
    pub mode: ReplicationMode,
}

fn default_replication_mode() -> ReplicationMode {
    ReplicationMode::Sequential
}

/// CU template; data units are referenced by scenario name. `{i}` in
/// arguments expands to the instance index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CuTemplate {
    pub executable: String,
    #[serde(default)]
    pub arguments: Vec<String>,
    #[serde(default = "one")]
    pub cores: u32,
    #[serde(default)]
    pub input_data: Vec<String>,
    #[serde(default)]
    pub output_data: Vec<String>,
    #[serde(default)]
    pub affinity: Option<AffinityLabel>,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadItem {
    pub template: CuTemplate,
    #[serde(default = "one")]
    pub count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Simulated,
    Local,
}

impl Scenario {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::validation(format!("scenario does not parse: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Which clock the scenario runs on, from its service URLs.
    pub fn backend(&self) -> Result<Backend> {
        let mut schemes = BTreeSet::new();
        for url in self
            .pilot_computes
            .iter()
            .map(|p| &p.service_url)
            .chain(self.pilot_datas.iter().map(|p| &p.service_url))
        {
            schemes.insert(ServiceUrl::parse(url)?.scheme);
        }
        match schemes.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
            ["sim"] => Ok(Backend::Simulated),
            ["local"] => Ok(Backend::Local),
            [] => Err(Error::validation("scenario defines no pilots")),
            other => Err(Error::validation(format!(
                "scenario mixes or uses unsupported schemes: {other:?}"
            ))),
        }
    }

    /// Every problem found; empty means the scenario is runnable.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        let topo = match self.topology.build() {
            Ok(t) => Some(t),
            Err(e) => {
                out.push(format!("topology: {e}"));
                None
            }
        };
        if let Err(e) = self.backend() {
            out.push(e.to_string());
        }
        let check_label = |what: &str, l: &AffinityLabel, out: &mut Vec<String>| {
            if let Some(t) = &topo {
                if !t.contains(l) {
                    out.push(format!("{what}: label {l} is not in the topology"));
                }
            }
        };
        let mut pilots = BTreeSet::new();
        for p in &self.pilot_computes {
            if !pilots.insert(&p.name) {
                out.push(format!("pilot {:?} defined twice", p.name));
            }
            if p.process_count < 1 {
                out.push(format!("pilot {:?}: process_count must be >= 1", p.name));
            }
            if let Some(q) = &p.queue_model {
                if let Err(e) = q.validate() {
                    out.push(format!("pilot {:?}: {e}", p.name));
                }
            }
            if let Ok(u) = ServiceUrl::parse(&p.service_url) {
                if u.scheme == "sim" {
                    match AffinityLabel::parse(&u.address) {
                        Ok(l) => check_label(&format!("pilot {:?}", p.name), &l, &mut out),
                        Err(e) => out.push(format!("pilot {:?}: {e}", p.name)),
                    }
                }
            }
            if let Some(l) = &p.affinity {
                check_label(&format!("pilot {:?}", p.name), l, &mut out);
            }
        }
        let mut pds = BTreeSet::new();
        for p in &self.pilot_datas {
            if !pds.insert(&p.name) {
                out.push(format!("pilot-data {:?} defined twice", p.name));
            }
            if let Some(l) = &p.affinity {
                check_label(&format!("pilot-data {:?}", p.name), l, &mut out);
            }
        }
        let mut dus = BTreeSet::new();
        for d in &self.data_units {
            if !dus.insert(&d.name) {
                out.push(format!("data unit {:?} defined twice", d.name));
            }
            if !pds.contains(&d.pilot_data) {
                out.push(format!("data unit {:?}: unknown pilot-data {:?}", d.name, d.pilot_data));
            }
            let mut names = BTreeSet::new();
            for f in &d.files {
                if !names.insert(&f.name) {
                    out.push(format!("data unit {:?}: duplicate file {:?}", d.name, f.name));
                }
            }
        }
        for r in &self.replications {
            if !dus.contains(&r.data_unit) {
                out.push(format!("replication: unknown data unit {:?}", r.data_unit));
            }
            for t in &r.targets {
                if !pds.contains(t) {
                    out.push(format!("replication: unknown pilot-data {t:?}"));
                }
            }
        }
        for (i, w) in self.workload.iter().enumerate() {
            for d in w.template.input_data.iter().chain(&w.template.output_data) {
                if !dus.contains(d) {
                    out.push(format!("workload[{i}]: unknown data unit {d:?}"));
                }
            }
            if let Some(l) = &w.template.affinity {
                check_label(&format!("workload[{i}]"), l, &mut out);
            }
            if w.template.cores < 1 {
                out.push(format!("workload[{i}]: cores must be >= 1"));
            }
        }
        if !(self.slowdown_per_concurrent.is_finite() && self.slowdown_per_concurrent >= 0.0) {
            out.push("slowdown_per_concurrent must be >= 0".into());
        }
        if !(self.register_seconds.is_finite() && self.register_seconds >= 0.0) {
            out.push("register_seconds must be >= 0".into());
        }
        if let Err(e) = self.scheduler.validate() {
            out.push(e.to_string());
        }
        out
    }
}
