//! Compute-Units follow their input data: the scheduler binds each CU to the
//! pilot nearest its Data-Units and overflows to the global queue.

use pilot_data::units::FileRef;
use pilot_data::*;

fn main() -> Result<()> {
    let topo = TopologyTree::from_labels(["campus/a", "campus/b", "cloud/east"])?;
    let svc = ComputeDataService::builder(topo)
        .bandwidth(BandwidthMatrix::with_default(2e7)?)
        .simulated()
        .build()?;
    let pd_a = svc.create_pilot_data(PilotDataDescription::new("sim://campus/a"))?;
    let pd_c = svc.create_pilot_data(PilotDataDescription::new("sim://cloud/east"))?;
    for url in ["sim://campus/a", "sim://campus/b", "sim://cloud/east"] {
        svc.create_pilot_compute(PilotComputeDescription::new(url, 2))?;
    }
    let put = |pd: &ResourceId, name: &str| {
        let d = DataUnitDescription {
            file_refs: vec![FileRef::synthetic(name, 40_000_000)],
            ..Default::default()
        };
        svc.put_du(pd, &d).map(|(du, _)| du.id)
    };
    let near_a = put(&pd_a.id, "a.dat")?;
    let near_c = put(&pd_c.id, "c.dat")?;

    for i in 0..6 {
        let mut d = ComputeUnitDescription::synthetic(10.0);
        d.input_data = vec![if i % 2 == 0 { near_a.clone() } else { near_c.clone() }];
        svc.submit(d)?;
    }
    let end = SimEngine::new(svc.clone())?.run()?;

    for d in svc.decisions() {
        println!("{} -> {:<24} {:<20} distance {:?}", d.cu, d.queue, d.reason.as_str(), d.distance);
    }
    for cu in svc.cus() {
        let p = cu.assigned_pilot.map(|p| p.to_string()).unwrap_or_default();
        println!("{} ran on {p}, staged {:.1}s", cu.id, cu.staging_seconds);
    }
    println!("makespan {end}");
    Ok(())
}
