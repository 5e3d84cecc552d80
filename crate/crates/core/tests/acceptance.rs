//! Acceptance gate. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line each; exits non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::io::Write;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pilot_data::coordination::Source;
use pilot_data::harness::{self, RunMetrics, Scenario};
use pilot_data::pilots::{PilotComputeDescription, PilotDataDescription};
use pilot_data::units::FileRef;
use pilot_data::*;

type Outcome = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("1 affinity metric suite", ac1_affinity_metric),
        ("2 queue protocol", ac2_queue_protocol),
        ("3 crash recovery", ac3_crash_recovery),
        ("4 replication laws", ac4_replication_laws),
        ("5 co-located vs naive pull", ac5_colocation),
        ("6 decision rule", ac6_decision_rule),
        ("7 distribution with replication", ac7_distribution),
        ("8 push/pull equivalence", ac8_push_pull),
        ("9 determinism", ac9_determinism),
        ("10 decide() oracle equivalence", ac10_decide_oracle),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, f) in criteria {
        let label = format!("AC{name}");
        if !filter.is_empty() && !filter.iter().any(|p| label.contains(p.as_str())) {
            continue;
        }
        let started = Instant::now();
        let r = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        let mut out = std::io::stdout().lock();
        match r {
            Ok(detail) => {
                let _ = writeln!(out, "PASS  AC{name} ({secs:.2}s): {detail}");
            }
            Err(why) => {
                failed += 1;
                let _ = writeln!(out, "FAIL  AC{name} ({secs:.2}s): {why}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn l(s: &str) -> AffinityLabel {
    AffinityLabel::parse(s).unwrap()
}

// ---------------------------------------------------------------- 1

struct RandomTree {
    labels: Vec<AffinityLabel>,
    /// `None` is the synthetic root.
    parent: Vec<Option<usize>>,
    weight: Vec<f64>,
}

fn random_tree(rng: &mut ChaCha8Rng, n: usize) -> RandomTree {
    let mut labels = Vec::with_capacity(n);
    let mut parent = Vec::with_capacity(n);
    let mut weight = Vec::with_capacity(n);
    for i in 0..n {
        let p = if i == 0 || rng.gen_bool(0.15) {
            None
        } else {
            Some(rng.gen_range(0..i))
        };
        let label = match p {
            None => format!("n{i}"),
            Some(p) => format!("{}/n{i}", labels[p]),
        };
        labels.push(AffinityLabel::parse(&label).unwrap());
        parent.push(p);
        weight.push(rng.gen_range(1..=9) as f64);
    }
    RandomTree {
        labels,
        parent,
        weight,
    }
}

/// Distances from `src` to every node by breadth-first search over the
/// undirected tree; index `n` is the root.
fn bfs(t: &RandomTree, src: usize) -> Vec<f64> {
    let n = t.labels.len();
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n + 1];
    for i in 0..n {
        let p = t.parent[i].unwrap_or(n);
        adj[i].push((p, t.weight[i]));
        adj[p].push((i, t.weight[i]));
    }
    let mut dist = vec![f64::NAN; n + 1];
    dist[src] = 0.0;
    let mut q = VecDeque::from([src]);
    while let Some(u) = q.pop_front() {
        for &(v, w) in &adj[u] {
            if dist[v].is_nan() {
                dist[v] = dist[u] + w;
                q.push_back(v);
            }
        }
    }
    dist
}

fn oracle_lca(t: &RandomTree, a: usize, b: usize) -> Option<usize> {
    let mut seen = HashSet::new();
    let mut cur = Some(a);
    while let Some(x) = cur {
        seen.insert(x);
        cur = t.parent[x];
    }
    let mut cur = Some(b);
    while let Some(x) = cur {
        if seen.contains(&x) {
            return Some(x);
        }
        cur = t.parent[x];
    }
    None
}

fn ac1_affinity_metric() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checks = 0u64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=199);
        let t = random_tree(&mut rng, n);
        let mut tree = TopologyTree::new();
        for (i, label) in t.labels.iter().enumerate() {
            tree.insert_label(label);
            tree.set_weight(label, t.weight[i]).unwrap();
        }
        ensure!(tree.node_count() == n + 1, "node count {} != {}", tree.node_count(), n + 1);
        let from_root = bfs(&t, n);
        for _ in 0..3 {
            let a = rng.gen_range(0..n);
            let da = bfs(&t, a);
            for b in 0..n {
                let d = tree.distance(&t.labels[a], &t.labels[b]).unwrap();
                ensure!(d == da[b], "distance {} {} = {d}, oracle {}", t.labels[a], t.labels[b], da[b]);
                ensure!(
                    d == tree.distance(&t.labels[b], &t.labels[a]).unwrap(),
                    "asymmetric"
                );
                let lca = oracle_lca(&t, a, b);
                let got = tree.lca(&t.labels[a], &t.labels[b]).unwrap();
                ensure!(got == lca.map(|i| t.labels[i].clone()), "lca mismatch");
                let dl = lca.map_or(0.0, |i| from_root[i]);
                ensure!(d == from_root[a] + from_root[b] - 2.0 * dl, "LCA closed form");
                let c = rng.gen_range(0..n);
                let ac = tree.distance(&t.labels[a], &t.labels[c]).unwrap();
                let cb = tree.distance(&t.labels[c], &t.labels[b]).unwrap();
                ensure!(d <= ac + cb, "triangle inequality");
                checks += 4;
            }
            ensure!(tree.distance(&t.labels[a], &t.labels[a]).unwrap() == 0.0, "identity");
            ensure!(
                (0..n).filter(|&b| b != a).all(|b| da[b] > 0.0),
                "distinct nodes at distance 0"
            );
            let cands: Vec<AffinityLabel> =
                (0..5).map(|_| t.labels[rng.gen_range(0..n)].clone()).collect();
            let best = cands
                .iter()
                .min_by(|x, y| {
                    let dx = da[t.labels.iter().position(|l| l == *x).unwrap()];
                    let dy = da[t.labels.iter().position(|l| l == *y).unwrap()];
                    dx.total_cmp(&dy).then_with(|| x.cmp(y))
                })
                .unwrap();
            ensure!(tree.nearest(&t.labels[a], &cands).unwrap() == best, "nearest");
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 5.0, "took {secs:.2}s, limit 5s");
    Ok(format!("1000 trees, {checks} checks against BFS oracle in {secs:.2}s"))
}

// ---------------------------------------------------------------- 2

fn ac2_queue_protocol() -> Outcome {
    let started = Instant::now();
    const N: usize = 10_000;
    const AGENTS: usize = 8;
    let store = MemoryStore::new("q").into_shared();
    let pilots: Vec<String> = (0..AGENTS).map(|i| format!("pilot-{i}")).collect();
    for p in &pilots {
        store.create_queue(p).unwrap();
    }
    // a third of the work is pinned to pilot queues before the agents start;
    // the rest arrives on the global queue while they run
    let mut pinned = BTreeMap::new();
    for i in 0..N / 3 {
        let p = &pilots[i % AGENTS];
        let id = format!("cu-{i}");
        store.enqueue(p, &id).unwrap();
        pinned.insert(id, p.clone());
    }
    let log: Arc<Mutex<Vec<(usize, String, Source)>>> = Arc::default();
    std::thread::scope(|s| {
        let st = store.clone();
        s.spawn(move || {
            for i in N / 3..N {
                st.enqueue(GLOBAL_QUEUE, &format!("cu-{i}")).unwrap();
            }
        });
        for (a, p) in pilots.iter().enumerate() {
            let st = store.clone();
            let log = log.clone();
            s.spawn(move || {
                let mut idle = 0;
                let mut mine = Vec::new();
                while idle < 20 {
                    match st.pull_timeout(p, Duration::from_millis(5)).unwrap() {
                        Some(pulled) => {
                            idle = 0;
                            st.ack(&pulled.id).unwrap();
                            mine.push((a, pulled.id, pulled.source));
                        }
                        None => idle += 1,
                    }
                }
                log.lock().unwrap().extend(mine);
            });
        }
    });
    let log = log.lock().unwrap();
    let mut seen = HashSet::new();
    for (_, id, _) in log.iter() {
        ensure!(seen.insert(id.clone()), "{id} delivered twice");
    }
    ensure!(seen.len() == N, "{} of {N} delivered", seen.len());
    let mut per_agent: Vec<Vec<&(usize, String, Source)>> = vec![Vec::new(); AGENTS];
    for e in log.iter() {
        per_agent[e.0].push(e);
    }
    for (a, pulls) in per_agent.iter().enumerate() {
        let first_global = pulls.iter().position(|e| e.2 == Source::Global);
        if let Some(g) = first_global {
            ensure!(
                pulls[g..].iter().all(|e| e.2 == Source::Global),
                "agent {a} took from global while its own queue held work"
            );
        }
        for e in pulls.iter().filter(|e| e.2 == Source::Pilot) {
            ensure!(pinned.get(&e.1) == Some(&pilots[a]), "{} pulled by wrong pilot", e.1);
        }
    }
    ensure!(store.requeue_in_flight().unwrap().is_empty(), "unacked leases");
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "took {secs:.2}s, limit 30s");
    Ok(format!("{N} ids, {AGENTS} agents, exactly-once and priority held in {secs:.2}s"))
}

// ---------------------------------------------------------------- 3

fn ac3_crash_recovery() -> Outcome {
    const CUS: usize = 200;
    const CRASHES: usize = 20;
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let logs = root.join("log");
    std::fs::create_dir_all(&logs).unwrap();
    let snap = root.join("store.snap");
    let topo = || TopologyTree::from_labels(["lab/node"]).unwrap();
    let cfg = ServiceConfig {
        poll_ms: 2,
        ..ServiceConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    let store = Arc::new(MemoryStore::persistent("crash", &snap, SnapshotPolicy::WriteThrough));
    let svc = ComputeDataService::builder(topo())
        .store(store.clone())
        .config(ServiceConfig {
            spawn_local_agents: false,
            ..cfg.clone()
        })
        .build()
        .unwrap();
    for i in 0..CUS {
        let mut d = ComputeUnitDescription::new("/bin/sh");
        d.arguments = vec!["-c".into(), format!("echo run >> {}/{i}", logs.display())];
        svc.submit(d).unwrap();
    }
    svc.create_pilot_data(
        PilotDataDescription::new(format!("local://{}/store", root.display()))
            .with_affinity(l("lab/node")),
    )
    .unwrap();
    svc.create_pilot_compute(
        PilotComputeDescription::new(format!("local://{}/pilot", root.display()), 6)
            .with_affinity(l("lab/node")),
    )
    .unwrap();
    drop(svc);

    let mut crashes = 0;
    let mut points = Vec::new();
    let svc = loop {
        let store = Arc::new(MemoryStore::restore(&snap, SnapshotPolicy::WriteThrough).unwrap());
        let crash = crashes < CRASHES;
        if crash {
            let at = rng.gen_range(1..=120);
            points.push(at);
            store.crash_after(at);
        }
        let svc = match ComputeDataService::recover(
            ComputeDataService::builder(topo()).store(store.clone()).config(cfg.clone()),
        ) {
            Ok(s) => s,
            Err(Error::Crashed) => {
                crashes += 1;
                continue;
            }
            Err(e) => return Err(format!("recover: {e}")),
        };
        if !crash {
            break svc;
        }
        let deadline = Instant::now() + Duration::from_secs(60);
        while !store.is_crashed() && !svc.all_terminal() && Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(1));
        }
        let _ = svc.shutdown();
        if store.is_crashed() {
            crashes += 1;
        } else {
            // the run finished before this crash point; nothing left to kill
            break svc;
        }
    };
    ensure!(svc.wait_all(Duration::from_secs(120)), "run did not finish");
    svc.shutdown().map_err(|e| e.to_string())?;
    let cus = svc.cus();
    ensure!(cus.len() == CUS, "{} CUs after recovery", cus.len());
    let mut dup = 0;
    for (i, cu) in cus.iter().enumerate() {
        ensure!(cu.state == CuState::Done, "{} ended {} ({:?})", cu.id, cu.state, cu.diagnostics);
        ensure!(cu.executions <= 1, "{} executed {} times", cu.id, cu.executions);
        let runs = std::fs::read_to_string(logs.join(i.to_string()))
            .map(|s| s.lines().count())
            .unwrap_or(0);
        if runs > 1 {
            dup += 1;
        }
        ensure!(runs == 1, "{} ran {runs} times", cu.id);
    }
    ensure!(crashes == CRASHES, "only {crashes} crashes injected");
    Ok(format!(
        "{CUS} CUs, {crashes} crashes at op offsets {points:?}; all DONE, {dup} duplicate executions"
    ))
}

// ---------------------------------------------------------------- 4

fn ac4_replication_laws() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sites = [
        "na/east/a", "na/east/b", "na/west/c", "eu/north/d", "eu/north/e", "eu/south/f", "as/g",
        "as/h",
    ];
    let mut checked = 0;
    for round in 0..10 {
        let topo = TopologyTree::from_labels(sites).unwrap();
        let mut bw = BandwidthMatrix::with_default(1e6).unwrap();
        let mut rate = BTreeMap::new();
        for (i, a) in sites.iter().enumerate() {
            for b in &sites[i + 1..] {
                let r = rng.gen_range(1..=50) as f64 * 1000.0;
                bw.set(l(a), l(b), r).unwrap();
                rate.insert((a.to_string(), b.to_string()), r);
                rate.insert((b.to_string(), a.to_string()), r);
            }
        }
        let bytes: u64 = rng.gen_range(1..=100) * 10_000;
        for mode in [ReplicationMode::Sequential, ReplicationMode::Group] {
            let svc = ComputeDataService::builder(topo.clone())
                .bandwidth(bw.clone())
                .simulated()
                .build()
                .unwrap();
            let pds: Vec<ResourceId> = sites
                .iter()
                .map(|s| svc.create_pilot_data(PilotDataDescription::new(format!("sim://{s}"))).unwrap().id)
                .collect();
            let seed = rng.gen_range(0..sites.len());
            let desc = DataUnitDescription {
                file_refs: vec![FileRef::synthetic("part-0", bytes / 2), FileRef::synthetic("part-1", bytes - bytes / 2)],
                ..Default::default()
            };
            let (du, _) = svc.put_du(&pds[seed], &desc).unwrap();
            let mut order: Vec<usize> = (0..sites.len()).collect();
            order.shuffle(&mut rng);
            let k = rng.gen_range(1..=sites.len());
            let targets: Vec<usize> = order[..k].to_vec();
            let rep = svc
                .replicate(&du.id, &targets.iter().map(|&t| pds[t].clone()).collect::<Vec<_>>(), mode)
                .unwrap();

            // oracle: nearest existing replica by tree distance, ties by pilot-data id
            let dist = |a: usize, b: usize| topo.distance(&l(sites[a]), &l(sites[b])).unwrap();
            let mut have = vec![seed];
            let initial = have.clone();
            let mut expect = Vec::new();
            for &t in &targets {
                if have.contains(&t) {
                    expect.push(0.0);
                    continue;
                }
                let pool = if mode == ReplicationMode::Group { &initial } else { &have };
                let src = *pool
                    .iter()
                    .min_by(|&&x, &&y| dist(x, t).total_cmp(&dist(y, t)).then(pds[x].cmp(&pds[y])))
                    .unwrap();
                expect.push(bytes as f64 / rate[&(sites[src].to_string(), sites[t].to_string())]);
                have.push(t);
            }
            let got: Vec<f64> = rep.transfers.iter().map(|t| t.seconds).collect();
            ensure!(got == expect, "round {round} {mode:?}: per-target {got:?} != {expect:?}");
            let law = match mode {
                ReplicationMode::Sequential => expect.iter().sum::<f64>(),
                ReplicationMode::Group => expect.iter().copied().fold(0.0, f64::max),
            };
            ensure!(
                rep.total_seconds == law,
                "round {round} {mode:?}: total {} != {law}",
                rep.total_seconds
            );
            let fresh = expect.iter().filter(|&&x| x > 0.0).count();
            ensure!(
                rep.succeeded() == fresh && rep.transfers.iter().all(|t| t.ok),
                "failed transfers"
            );
            checked += 1;
        }
    }
    Ok(format!("{checked} replication runs match sum/max laws with tolerance 0"))
}

// ---------------------------------------------------------------- 5

fn scenario(text: &str) -> Scenario {
    Scenario::from_json(text).unwrap()
}

const NAIVE: &str = include_str!("../scenarios/naive_pull.json");
const COLOCATED: &str = include_str!("../scenarios/colocated.json");
const ONE_SITE: &str = include_str!("../scenarios/one_site_bottleneck.json");
const TWO_SITES: &str = include_str!("../scenarios/two_sites_remote.json");
const REPLICATED: &str = include_str!("../scenarios/two_sites_replicated.json");

fn ac5_colocation() -> Outcome {
    let naive_s = scenario(NAIVE);
    let co_s = scenario(COLOCATED);
    let naive = harness::run_scenario(&naive_s).map_err(|e| e.to_string())?;
    let co = harness::run_scenario(&co_s).map_err(|e| e.to_string())?;
    // serial closed form: one slot, every CU pays transfer then run
    let size = naive_s.data_units[0].files[0].size as f64;
    let rate = naive_s.bandwidths.default.unwrap();
    let run = 1.0;
    let n = naive_s.workload[0].count;
    let naive_expected: f64 = (0..n).map(|_| size / rate + run).sum();
    let co_expected: f64 = (0..n).map(|_| run).sum();
    ensure!(
        (naive.makespan - naive_expected).abs() <= 1e-9,
        "naive makespan {} != {naive_expected}",
        naive.makespan
    );
    ensure!(
        (co.makespan - co_expected).abs() <= 1e-9,
        "co-located makespan {} != {co_expected}",
        co.makespan
    );
    ensure!(co.cus.iter().all(|c| c.staging_s == 0.0), "co-located CU staged data");
    ensure!(co.makespan < naive.makespan, "co-location did not help");
    Ok(format!(
        "co-located {} < naive {} (closed forms {co_expected}, {naive_expected}); staging 0 when co-located",
        co.makespan, naive.makespan
    ))
}

// ---------------------------------------------------------------- 6

fn ac6_decision_rule() -> Outcome {
    ensure!(decide(8100.0, 450.0) == PlacementMode::DataFirst, "T_Q 8100 vs T_X 450");
    let est = CostEstimate::compose(8100.0, 0.0, 0.0, 450.0, 0.0, 0.0, 0).unwrap();
    ensure!(est.decide() == PlacementMode::DataFirst, "estimate decide");
    let t_x = 450.0;
    let mut switch = None;
    let mut prev = None;
    for i in 0..=20_000u32 {
        let t_q = i as f64 * 0.5;
        let m = decide(t_q, t_x);
        let expect = if t_q < t_x {
            PlacementMode::ComputeFirst
        } else {
            PlacementMode::DataFirst
        };
        ensure!(m == expect, "T_Q={t_q}: {m:?}");
        if prev == Some(PlacementMode::ComputeFirst) && m == PlacementMode::DataFirst {
            ensure!(switch.is_none(), "decision switched twice");
            switch = Some(t_q);
        }
        prev = Some(m);
    }
    ensure!(switch == Some(t_x), "switch at {switch:?}");
    ensure!(decide(t_x, t_x) == PlacementMode::DataFirst, "tie rule");
    Ok("T_X=450, T_Q=8100 -> DATA_FIRST; sweep 0..10000 switches at T_Q = T_X, tie -> DATA_FIRST".into())
}

// ---------------------------------------------------------------- 7

/// Identical tasks on pilots with fixed slots; each task stages for
/// `staging` seconds, then runs `run * (1 + f * (k - 1))` where `k` counts
/// the tasks running on that pilot including itself. Ties go to the pilot
/// listed first.
struct OraclePilot {
    slots: usize,
    active_at: f64,
    staging: f64,
}

fn oracle_makespan(pilots: &[OraclePilot], start: f64, tasks: usize, run: f64, f: f64) -> f64 {
    #[derive(Clone, Copy)]
    enum Phase {
        Staging(f64),
        Running(f64),
    }
    let mut slots: Vec<Vec<Option<Phase>>> = pilots.iter().map(|p| vec![None; p.slots]).collect();
    let mut remaining = tasks;
    let mut now = start;
    let mut makespan: f64 = 0.0;
    loop {
        // finish, then move staged tasks to running, then hand out work
        for ps in slots.iter_mut() {
            for s in ps.iter_mut() {
                if let Some(Phase::Running(end)) = *s {
                    if end <= now {
                        makespan = makespan.max(end);
                        *s = None;
                    }
                }
            }
        }
        for (pi, ps) in slots.iter_mut().enumerate() {
            for i in 0..ps.len() {
                if let Some(Phase::Staging(end)) = ps[i] {
                    if end <= now {
                        let k = ps.iter().filter(|x| matches!(x, Some(Phase::Running(_)))).count() + 1;
                        ps[i] = Some(Phase::Running(end + run * (1.0 + f * (k as f64 - 1.0))));
                    }
                }
            }
            let p = &pilots[pi];
            if p.active_at <= now {
                for i in 0..ps.len() {
                    if ps[i].is_none() && remaining > 0 {
                        remaining -= 1;
                        if p.staging > 0.0 {
                            ps[i] = Some(Phase::Staging(now + p.staging));
                        } else {
                            let k = ps.iter().filter(|x| matches!(x, Some(Phase::Running(_)))).count() + 1;
                            ps[i] = Some(Phase::Running(now + run * (1.0 + f * (k as f64 - 1.0))));
                        }
                    }
                }
            }
        }
        let next = slots
            .iter()
            .flatten()
            .filter_map(|s| match s {
                Some(Phase::Staging(t)) | Some(Phase::Running(t)) => Some(*t),
                None => None,
            })
            .chain(pilots.iter().map(|p| p.active_at).filter(|&t| t > now))
            .fold(f64::INFINITY, f64::min);
        if !next.is_finite() {
            return makespan;
        }
        now = next;
    }
}

/// Re-derives each CU's timeline from the event log and checks it against
/// the reported metrics.
fn check_event_log(m: &RunMetrics) -> std::result::Result<f64, String> {
    let mut staging_at = BTreeMap::new();
    let mut running_at = BTreeMap::new();
    let mut done_at = BTreeMap::new();
    for e in &m.events {
        match e.event.as_str() {
            "staging_in" => {
                staging_at.insert(e.subject.clone(), e.time);
            }
            "running" => {
                running_at.insert(e.subject.clone(), e.time);
            }
            "finished" => {
                done_at.insert(e.subject.clone(), e.time);
            }
            _ => {}
        }
    }
    let mut makespan: f64 = 0.0;
    for c in &m.cus {
        let s = staging_at[&c.cu_id];
        let r = running_at[&c.cu_id];
        let d = done_at[&c.cu_id];
        ensure!(r - s == c.staging_s || (r - s - c.staging_s).abs() < 1e-12, "{} staging", c.cu_id);
        ensure!(d == c.t_done, "{} completion {d} != {}", c.cu_id, c.t_done);
        ensure!(d == r + c.run_s, "{} run {} + {} != {d}", c.cu_id, r, c.run_s);
        makespan = makespan.max(d);
    }
    ensure!(makespan == m.makespan, "event-log makespan {makespan} != {}", m.makespan);
    let done: usize = m.per_pilot.values().sum();
    ensure!(done == m.cus.len(), "per-pilot counts {done} != {}", m.cus.len());
    Ok(makespan)
}

fn ac7_distribution() -> Outcome {
    let runs: Vec<(Scenario, RunMetrics)> = [ONE_SITE, TWO_SITES, REPLICATED]
        .iter()
        .map(|t| {
            let s = scenario(t);
            let m = harness::run_scenario(&s).unwrap();
            (s, m)
        })
        .collect();
    let mut spans = Vec::new();
    for (s, m) in &runs {
        check_event_log(m).map_err(|e| format!("{}: {e}", s.name))?;
        let bytes = s.data_units[0].files[0].size as f64;
        let rate = s.bandwidths.default.unwrap();
        let replicated_to_stampede = !s.replications.is_empty();
        let start = if replicated_to_stampede { bytes / rate } else { 0.0 };
        let run = 1.0;
        let pilots: Vec<OraclePilot> = s
            .pilot_computes
            .iter()
            .map(|p| OraclePilot {
                slots: p.process_count as usize,
                active_at: start
                    + match &p.queue_model {
                        Some(QueueModel::Fixed(q)) => *q,
                        _ => 0.0,
                    },
                staging: if p.name == "lonestar" || replicated_to_stampede {
                    0.0
                } else {
                    bytes / rate
                },
            })
            .collect();
        let n = s.workload[0].count as usize;
        let expect = oracle_makespan(&pilots, start, n, run, s.slowdown_per_concurrent);
        ensure!(
            (m.makespan - expect).abs() < 1e-9,
            "{}: makespan {} != oracle {expect}",
            s.name,
            m.makespan
        );
        spans.push(m.makespan);
    }
    ensure!(
        spans[2] < spans[1] && spans[1] < spans[0],
        "ordering violated: replicated {} / remote {} / one site {}",
        spans[2],
        spans[1],
        spans[0]
    );
    Ok(format!(
        "replicated {} < remote {} < one site {}; distributions {:?} / {:?}",
        spans[2], spans[1], spans[0], runs[2].1.per_pilot, runs[1].1.per_pilot
    ))
}

// ---------------------------------------------------------------- 8

struct PipelineResult {
    states: Vec<CuState>,
    manifests: Vec<(DuState, Vec<(String, String, u64)>)>,
}

fn run_pipeline(seed: u64, mode: StagingMode) -> PipelineResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sites = ["x/a", "x/b", "y/c"];
    let svc = ComputeDataService::builder(TopologyTree::from_labels(sites).unwrap())
        .bandwidth(BandwidthMatrix::with_default(rng.gen_range(1..=10) as f64 * 1000.0).unwrap())
        .config(ServiceConfig {
            seed,
            ..ServiceConfig::default()
        })
        .simulated()
        .build()
        .unwrap();
    let pds: Vec<ResourceId> = sites
        .iter()
        .map(|s| svc.create_pilot_data(PilotDataDescription::new(format!("sim://{s}"))).unwrap().id)
        .collect();
    for s in sites.iter().take(rng.gen_range(1..=3)) {
        svc.create_pilot_compute(
            PilotComputeDescription::new(format!("sim://{s}"), rng.gen_range(1..=3))
                .with_staging_mode(mode),
        )
        .unwrap();
    }
    let mut dus = Vec::new();
    for i in 0..rng.gen_range(1..=3) {
        let files: Vec<String> = (0..rng.gen_range(1..=3))
            .map(|j| FileRef::synthetic(&format!("in{i}-{j}.dat"), rng.gen_range(1..=5000)))
            .collect();
        let pd = pds.choose(&mut rng).unwrap();
        let (du, _) = svc
            .put_du(pd, &DataUnitDescription { file_refs: files, ..Default::default() })
            .unwrap();
        dus.push(du.id);
    }
    let mut cus = Vec::new();
    for stage in 0..rng.gen_range(1..=3) {
        let mut produced = Vec::new();
        for k in 0..rng.gen_range(1..=4) {
            let out = svc.create_output_du(pds.choose(&mut rng).unwrap(), None).unwrap();
            let fail = rng.gen_bool(0.1);
            let mut d = if fail {
                ComputeUnitDescription::new("/bin/false")
            } else {
                ComputeUnitDescription::synthetic(rng.gen_range(1..=4) as f64)
            };
            let take = rng.gen_range(1..=dus.len());
            d.input_data = dus.choose_multiple(&mut rng, take).cloned().collect();
            d.output_data = vec![out.id.clone()];
            d.arguments = vec![format!("s{stage}-{k}.out={}", rng.gen_range(1..=3000))];
            cus.push(svc.submit(d).unwrap().id);
            produced.push(out.id);
        }
        dus.extend(produced);
    }
    SimEngine::new(svc.clone()).unwrap().check_invariants(true).run().unwrap();
    PipelineResult {
        states: cus.iter().map(|c| svc.cu(c).unwrap().state).collect(),
        manifests: dus
            .iter()
            .map(|d| {
                let du = svc.du(d).unwrap();
                (
                    du.state,
                    du.manifest
                        .iter()
                        .map(|(n, e)| (n.clone(), e.digest.clone(), e.size))
                        .collect(),
                )
            })
            .collect(),
    }
}

fn ac8_push_pull() -> Outcome {
    let mut failed_cus = 0;
    let mut total = 0;
    for seed in 0..50 {
        let pull = run_pipeline(seed, StagingMode::Pull);
        let push = run_pipeline(seed, StagingMode::Push);
        ensure!(pull.states == push.states, "seed {seed}: CU states differ");
        ensure!(pull.manifests == push.manifests, "seed {seed}: DU manifests differ");
        ensure!(pull.states.iter().all(|s| s.is_terminal()), "seed {seed}: non-terminal CU");
        failed_cus += pull.states.iter().filter(|s| **s == CuState::Failed).count();
        total += pull.states.len();
    }
    Ok(format!("50 pipelines, {total} CUs ({failed_cus} failing) identical under PUSH and PULL"))
}

// ---------------------------------------------------------------- 9

fn randomized_scenario(seed: u64) -> Scenario {
    let mut s = scenario(TWO_SITES);
    s.name = format!("random-{seed}");
    s.seed = seed;
    s.scheduler.policy = Policy::Random { seed };
    s.pilot_computes[1].queue_model = Some(QueueModel::Exponential { mean: 3.0 });
    s.pilot_computes[0].queue_model = Some(QueueModel::Exponential { mean: 1.0 });
    s
}

fn ac9_determinism() -> Outcome {
    let mut scenarios: Vec<Scenario> = [NAIVE, COLOCATED, ONE_SITE, TWO_SITES, REPLICATED]
        .iter()
        .map(|t| scenario(t))
        .collect();
    scenarios.extend((0..5).map(randomized_scenario));
    let mut distinct = BTreeSet::new();
    for s in &scenarios {
        let a = harness::run_scenario(s).map_err(|e| e.to_string())?;
        let b = harness::run_scenario(s).map_err(|e| e.to_string())?;
        ensure!(a.to_csv() == b.to_csv(), "{}: CSV differs between runs", s.name);
        ensure!(a.to_jsonl().unwrap() == b.to_jsonl().unwrap(), "{}: event logs differ", s.name);
        distinct.insert(a.to_csv());
    }
    ensure!(distinct.len() == scenarios.len(), "seeds did not change the random runs");
    Ok(format!("{} scenarios byte-identical across repeated runs", scenarios.len()))
}

// ---------------------------------------------------------------- 10

fn ac10_decide_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut ties = 0;
    let mut counts = BTreeMap::new();
    for i in 0..200 {
        let t_x = rng.gen_range(0..=40) as f64 * 0.5;
        let t_q = if i % 10 == 0 {
            ties += 1;
            t_x
        } else {
            rng.gen_range(0..=40) as f64 * 0.5
        };
        let t_c = rng.gen_range(1..=20) as f64 * 0.25;
        let (cf, df) = harness::mode_makespans(t_q, t_x, t_c).map_err(|e| e.to_string())?;
        ensure!((cf - (t_q + t_c)).abs() < 1e-9, "compute-first makespan {cf}");
        ensure!((df - (t_x + t_c)).abs() < 1e-9, "data-first makespan {df}");
        let mode = decide(t_q, t_x);
        let (chosen, other) = match mode {
            PlacementMode::ComputeFirst => (cf, df),
            PlacementMode::DataFirst => (df, cf),
        };
        ensure!(
            chosen <= other,
            "T_Q={t_q} T_X={t_x} T_C={t_c}: {mode:?} gives {chosen} > {other}"
        );
        *counts.entry(format!("{mode:?}")).or_insert(0) += 1;
    }
    Ok(format!("200 instances ({ties} ties), chosen mode never slower: {counts:?}"))
}
