//! Scenario runner: builds a service from a [`Scenario`], drives it on the
//! simulated or the wall clock, and collects [`RunMetrics`].

pub mod report;
pub mod scenario;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coordination::MemoryStore;
use crate::error::{Error, Result};
use crate::pilots::{BandwidthMatrix, PilotComputeDescription, PilotDataDescription, QueueModel};
use crate::scheduler::{Policy, SchedulerConfig};
use crate::service::{ComputeDataService, ServiceConfig};
use crate::sim::SimEngine;
use crate::units::{ComputeUnitDescription, CuState, DataUnitDescription, FileRef, ResourceId};

pub use report::{compare, Comparison, CuRow, DataTimes, RunMetrics, CSV_HEADER};
pub use scenario::{
    Backend, CuTemplate, DataUnitSpec, FileSpec, PilotDataSpec, PilotSpec, ReplicationSpec,
    Scenario, WorkloadItem,
};

const WORK_DIR_TOKEN: &str = "{work_dir}";

/// Runs `s` to completion. Validation problems are reported before anything
/// starts; CU failures are recorded in the metrics.
pub fn run_scenario(s: &Scenario) -> Result<RunMetrics> {
    let problems = s.validate();
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    match s.backend()? {
        Backend::Simulated => run_simulated(s),
        Backend::Local => run_local(s),
    }
}

/// Runs the same scenario under two scheduler configurations and reports
/// `b - a`.
pub fn compare_policies(
    s: &Scenario,
    a: &SchedulerConfig,
    b: &SchedulerConfig,
) -> Result<(RunMetrics, RunMetrics, Comparison)> {
    let mut sa = s.clone();
    sa.scheduler = a.clone();
    sa.name = format!("{}[{}]", s.name, policy_name(&a.policy));
    let mut sb = s.clone();
    sb.scheduler = b.clone();
    sb.name = format!("{}[{}]", s.name, policy_name(&b.policy));
    let ma = run_scenario(&sa)?;
    let mb = run_scenario(&sb)?;
    let c = compare(&ma, &mb);
    Ok((ma, mb, c))
}

fn policy_name(p: &Policy) -> String {
    match p {
        Policy::AffinityAware => "AFFINITY_AWARE".into(),
        Policy::AffinityBlindRoundrobin => "AFFINITY_BLIND_ROUNDROBIN".into(),
        Policy::Random { seed } => format!("RANDOM:{seed}"),
    }
}

struct Built {
    svc: Arc<ComputeDataService>,
    dus: BTreeMap<String, ResourceId>,
    data: DataTimes,
    staging: Vec<crate::pilots::StagingReport>,
    replications: Vec<crate::pilots::ReplicationReport>,
}

fn service_config(s: &Scenario, local: bool) -> ServiceConfig {
    ServiceConfig {
        scheduler: s.scheduler.clone(),
        register_seconds: s.register_seconds,
        slowdown_per_concurrent: s.slowdown_per_concurrent,
        seed: s.seed,
        spawn_local_agents: local,
        ..ServiceConfig::default()
    }
}

fn expand_url(url: &str, work: Option<&Path>) -> String {
    match work {
        Some(w) => url.replace(WORK_DIR_TOKEN, &w.to_string_lossy()),
        None => url.to_owned(),
    }
}

/// Creates pilot-data, puts the initial data units and runs replication
/// directives. Replication happens before any pilot exists, so the clock
/// starts the workload at T_R.
fn build(
    s: &Scenario,
    svc: Arc<ComputeDataService>,
    file_ref: &mut dyn FnMut(&DataUnitSpec, &FileSpec) -> Result<String>,
    work: Option<&Path>,
) -> Result<Built> {
    let mut pds = BTreeMap::new();
    for p in &s.pilot_datas {
        let mut d = PilotDataDescription::new(expand_url(&p.service_url, work));
        d.affinity = p.affinity.clone();
        d.capacity = p.capacity;
        pds.insert(p.name.clone(), svc.create_pilot_data(d)?.id);
    }
    let mut dus = BTreeMap::new();
    let mut staging = Vec::new();
    let mut data = DataTimes::default();
    for d in &s.data_units {
        let mut refs = Vec::with_capacity(d.files.len());
        for f in &d.files {
            refs.push(file_ref(d, f)?);
        }
        let desc = DataUnitDescription {
            file_refs: refs,
            affinity: None,
            name: Some(d.name.clone()),
        };
        let (du, rep) = svc.put_du(&pds[&d.pilot_data], &desc)?;
        data.t_s += rep.t_s;
        staging.push(rep);
        dus.insert(d.name.clone(), du.id);
    }
    let mut replications = Vec::new();
    for r in &s.replications {
        let targets: Vec<ResourceId> = r.targets.iter().map(|t| pds[t].clone()).collect();
        let rep = svc.replicate(&dus[&r.data_unit], &targets, r.mode)?;
        data.t_r += rep.total_seconds;
        replications.push(rep);
    }
    data.t_d = if replications.is_empty() {
        data.t_s
    } else {
        data.t_r + data.t_s
    };
    if svc.is_simulated() {
        let mut reg = svc.lock();
        svc.set_sim_time(&mut reg, data.t_r);
    }
    Ok(Built {
        svc,
        dus,
        data,
        staging,
        replications,
    })
}

fn create_pilots(b: &Built, s: &Scenario, work: Option<&Path>) -> Result<BTreeMap<ResourceId, String>> {
    let mut names = BTreeMap::new();
    for p in &s.pilot_computes {
        let mut d = PilotComputeDescription::new(expand_url(&p.service_url, work), p.process_count)
            .with_staging_mode(p.staging_mode);
        d.affinity = p.affinity.clone();
        d.queue_model = p.queue_model.clone();
        d.walltime = p.walltime;
        let pc = b.svc.create_pilot_compute(d)?;
        names.insert(pc.id, p.name.clone());
    }
    Ok(names)
}

fn submit_workload(b: &Built, s: &Scenario) -> Result<()> {
    let mut i = 0u64;
    for item in &s.workload {
        for _ in 0..item.count {
            let t = &item.template;
            let mut d = ComputeUnitDescription::new(t.executable.replace("{i}", &i.to_string()));
            d.arguments = t
                .arguments
                .iter()
                .map(|a| a.replace("{i}", &i.to_string()))
                .collect();
            d.cores = t.cores;
            d.input_data = t.input_data.iter().map(|n| b.dus[n].clone()).collect();
            d.output_data = t.output_data.iter().map(|n| b.dus[n].clone()).collect();
            d.affinity = t.affinity.clone();
            b.svc.submit(d)?;
            i += 1;
        }
    }
    Ok(())
}

fn collect(s: &Scenario, b: Built, pilot_names: &BTreeMap<ResourceId, String>) -> RunMetrics {
    let cus = b.svc.cus();
    let mut per_pilot: BTreeMap<String, usize> =
        pilot_names.values().map(|n| (n.clone(), 0)).collect();
    for cu in &cus {
        if cu.state == CuState::Done {
            if let Some(name) = cu.assigned_pilot.as_ref().and_then(|p| pilot_names.get(p)) {
                *per_pilot.entry(name.clone()).or_default() += 1;
            }
        }
    }
    let rows: Vec<CuRow> = cus.iter().map(CuRow::from_cu).collect();
    let makespan = rows
        .iter()
        .map(|r| r.t_done)
        .filter(|t| t.is_finite())
        .fold(0.0, f64::max);
    RunMetrics {
        scenario: s.name.clone(),
        seed: s.seed,
        makespan,
        data: b.data,
        cus: rows,
        per_pilot,
        staging: b.staging,
        replications: b.replications,
        decisions: b.svc.decisions(),
        events: b.svc.events(),
    }
}

fn run_simulated(s: &Scenario) -> Result<RunMetrics> {
    let topo = s.topology.build()?;
    let svc = ComputeDataService::builder(topo)
        .store(MemoryStore::new("sim").into_shared())
        .bandwidth(BandwidthMatrix::from_config(&s.bandwidths)?)
        .config(service_config(s, false))
        .simulated()
        .build()?;
    let mut synth = |_: &DataUnitSpec, f: &FileSpec| -> Result<String> {
        if f.path.is_some() {
            return Err(Error::validation(format!(
                "file {:?}: simulated scenarios cannot read real files",
                f.name
            )));
        }
        Ok(FileRef::synthetic(&f.name, f.size))
    };
    let b = build(s, svc, &mut synth, None)?;
    let names = create_pilots(&b, s, None)?;
    submit_workload(&b, s)?;
    SimEngine::new(b.svc.clone())?.run()?;
    Ok(collect(s, b, &names))
}

/// Deterministic content for a generated input file.
fn generated_bytes(seed: u64, du: &str, file: &str, size: u64) -> Vec<u8> {
    let mut h = seed;
    for b in du.bytes().chain([0u8]).chain(file.bytes()) {
        h = h.wrapping_mul(0x100_0000_01b3).wrapping_add(b as u64);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    let mut buf = vec![0u8; size as usize];
    rng.fill_bytes(&mut buf);
    buf
}

fn run_local(s: &Scenario) -> Result<RunMetrics> {
    let work: PathBuf = match &s.work_dir {
        Some(w) => w.clone(),
        None => std::env::temp_dir().join(format!("pilotdata-{}-{}", s.name, std::process::id())),
    };
    let inputs = work.join("inputs");
    std::fs::create_dir_all(&inputs)?;
    let topo = s.topology.build()?;
    let svc = ComputeDataService::builder(topo)
        .bandwidth(BandwidthMatrix::from_config(&s.bandwidths)?)
        .config(service_config(s, true))
        .build()?;
    let seed = s.seed;
    let mut gen = |d: &DataUnitSpec, f: &FileSpec| -> Result<String> {
        if let Some(p) = &f.path {
            return Ok(p.to_string_lossy().into_owned());
        }
        let dir = inputs.join(&d.name);
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(&f.name);
        std::fs::write(&path, generated_bytes(seed, &d.name, &f.name, f.size))?;
        Ok(path.to_string_lossy().into_owned())
    };
    let b = build(s, svc, &mut gen, Some(&work))?;
    let names = create_pilots(&b, s, Some(&work))?;
    let result = submit_workload(&b, s).and_then(|_| {
        if b.svc.wait_all(Duration::from_secs_f64(s.timeout_seconds)) {
            Ok(())
        } else {
            Err(Error::Timeout(format!(
                "scenario {} did not finish within {} s",
                s.name, s.timeout_seconds
            )))
        }
    });
    let shut = b.svc.shutdown();
    result?;
    shut?;
    Ok(collect(s, b, &names))
}

/// End-to-end makespans of the two placement modes for one task whose input
/// sits on a site where a pilot waits `t_q` in the batch queue, with a second
/// site `t_x` away that has an idle pilot. Both modes run on the simulator;
/// returns `(compute_first, data_first)`.
pub fn mode_makespans(t_q: f64, t_x: f64, t_c: f64) -> Result<(f64, f64)> {
    const BYTES: u64 = 1_000_000;
    let data_site = "dci/data";
    let compute_site = "dci/compute";
    let run = |data_first: bool| -> Result<f64> {
        let mut s = Scenario::from_json(&format!(
            r#"{{"name":"{}","topology":{{"labels":["{data_site}","{compute_site}"]}},
                "pilot_computes":[],"workload":[]}}"#,
            if data_first { "data-first" } else { "compute-first" }
        ))?;
        let size = if t_x > 0.0 {
            s.bandwidths.default = Some(BYTES as f64 / t_x);
            BYTES
        } else {
            s.bandwidths.default = Some(1.0);
            0
        };
        s.pilot_datas.push(PilotDataSpec {
            name: "store".into(),
            service_url: format!("sim://{data_site}"),
            affinity: None,
            capacity: None,
        });
        s.data_units.push(DataUnitSpec {
            name: "input".into(),
            pilot_data: "store".into(),
            files: vec![FileSpec {
                name: "input.dat".into(),
                size,
                path: None,
            }],
        });
        let (site, queue) = if data_first {
            (compute_site, 0.0)
        } else {
            (data_site, t_q)
        };
        s.pilot_computes.push(PilotSpec {
            name: "pilot".into(),
            service_url: format!("sim://{site}"),
            process_count: 1,
            affinity: None,
            queue_model: Some(QueueModel::Fixed(queue)),
            walltime: None,
            staging_mode: Default::default(),
        });
        s.workload.push(WorkloadItem {
            template: CuTemplate {
                executable: format!("synthetic:{t_c}"),
                arguments: Vec::new(),
                cores: 1,
                input_data: vec!["input".into()],
                output_data: Vec::new(),
                affinity: None,
            },
            count: 1,
        });
        Ok(run_scenario(&s)?.makespan)
    };
    Ok((run(false)?, run(true)?))
}
