//! Putting a Data-Unit on a Pilot-Data and replicating it sequentially and
//! as a group on the simulated backend.

use pilot_data::units::FileRef;
use pilot_data::*;

fn main() -> Result<()> {
    let topo = TopologyTree::from_labels(["us/tx/lonestar", "us/tx/stampede", "us/il/kraken", "eu/de/juropa"])?;
    let mut bw = BandwidthMatrix::with_default(1e6)?;
    bw.set(AffinityLabel::parse("us/tx/lonestar")?, AffinityLabel::parse("us/tx/stampede")?, 1e8)?;
    let svc = ComputeDataService::builder(topo).bandwidth(bw).simulated().build()?;

    let pd = |url: &str| svc.create_pilot_data(PilotDataDescription::new(url));
    let home = pd("sim://us/tx/lonestar")?;
    let targets = [pd("sim://us/tx/stampede")?.id, pd("sim://us/il/kraken")?.id, pd("sim://eu/de/juropa")?.id];

    for mode in [ReplicationMode::Sequential, ReplicationMode::Group] {
        let desc = DataUnitDescription {
            file_refs: vec![FileRef::synthetic("reads.fq", 50_000_000), FileRef::synthetic("ref.fa", 10_000_000)],
            ..Default::default()
        };
        let (du, put) = svc.put_du(&home.id, &desc)?;
        println!("{} on {}: T_S {:.2}s", du.id, home.id, put.t_s);
        let rep = svc.replicate(&du.id, &targets, mode)?;
        for t in &rep.transfers {
            let src = t.source.as_ref().map_or("-".to_string(), |s| s.to_string());
            println!("  {mode:?} {src} -> {}  {:.2}s", t.target, t.seconds);
        }
        println!("  T_R {:.2}s", rep.total_seconds);
        svc.verify_replicas(&du.id)?;
    }
    Ok(())
}
