//! A persistent store survives a crash: the service is rebuilt from the
//! snapshot and resumes without running any CU twice.

use std::sync::Arc;
use std::time::Duration;

use pilot_data::*;

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join(format!("pilotdata-crash-{}", std::process::id()));
    std::fs::create_dir_all(dir.join("log"))?;
    let snap = dir.join("store.snap");
    let topo = || TopologyTree::from_labels(["lab/node"]);
    let l = AffinityLabel::parse("lab/node")?;

    let store = Arc::new(MemoryStore::persistent("demo", &snap, SnapshotPolicy::WriteThrough));
    let svc = ComputeDataService::builder(topo()?).store(store.clone()).build()?;
    for i in 0..20 {
        let mut d = ComputeUnitDescription::new("/bin/sh");
        d.arguments = vec!["-c".into(), format!("echo ran >> {}/log/{i}", dir.display())];
        svc.submit(d)?;
    }
    svc.create_pilot_data(PilotDataDescription::new(format!("local://{}/store", dir.display())).with_affinity(l.clone()))?;
    // die partway through the run
    store.crash_after(60);
    svc.create_pilot_compute(
        PilotComputeDescription::new(format!("local://{}/pilot", dir.display()), 4).with_affinity(l),
    )?;
    while !store.is_crashed() && !svc.all_terminal() {
        std::thread::sleep(Duration::from_millis(1));
    }
    let _ = svc.shutdown();
    let done = svc.cus().iter().filter(|c| c.state == CuState::Done).count();
    println!("crashed: {} after {} ops, {done} CUs done", store.is_crashed(), store.op_count());

    let store = Arc::new(MemoryStore::restore(&snap, SnapshotPolicy::WriteThrough)?);
    let svc = ComputeDataService::recover(ComputeDataService::builder(topo()?).store(store))?;
    svc.wait_all(Duration::from_secs(60));
    svc.shutdown()?;
    let mut runs = 0;
    for i in 0..20 {
        runs += std::fs::read_to_string(dir.join(format!("log/{i}")))?.lines().count();
    }
    let done = svc.cus().iter().filter(|c| c.state == CuState::Done).count();
    println!("after recovery: {done} CUs done, {runs} executions logged");
    let _ = std::fs::remove_dir_all(dir);
    Ok(())
}
