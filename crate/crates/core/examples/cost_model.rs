//! Estimating staging and replication costs, choosing between moving compute
//! and moving data, and planning a replica set for a slot demand.

use pilot_data::placement::{plan_replication, DataMove, Site, Workload};
use pilot_data::*;

fn main() -> Result<()> {
    let l = |s: &str| AffinityLabel::parse(s);
    let topo = TopologyTree::from_labels(["us/tx/lonestar", "us/tx/stampede", "us/il/kraken"])?;
    let bw = BandwidthMatrix::with_default(1e7)?;

    let mut w = Workload::new();
    w.staging.push(DataMove::new(l("us/il/kraken")?, l("us/tx/lonestar")?, 4_500_000_000));
    w.files = 2;
    w.register_seconds = 1.0;
    w.replicas.push(DataMove::new(l("us/tx/lonestar")?, l("us/tx/stampede")?, 4_500_000_000));
    w.pilot_queue = Some(QueueModel::Exponential { mean: 8100.0 });
    let e = estimate(&w, &topo, &bw)?;
    println!(
        "T_X {} T_S {} T_R {} T_D {} T_Q {} -> {:?}",
        e.t_x, e.t_s, e.t_r, e.t_d, e.t_q_pilot, e.decide()
    );

    for t_q in [100.0, 450.0, 1000.0] {
        println!("T_Q {t_q:>6} vs T_X 450 -> {:?}", decide(t_q, 450.0));
    }

    let sites = [Site::new(l("us/tx/stampede")?, 12), Site::new(l("us/il/kraken")?, 4)];
    for demand in [8, 14, 100] {
        let p = plan_replication(&topo, &l("us/tx/lonestar")?, &sites, demand, 1_000_000_000, &bw)?;
        let names: Vec<String> = p.steps.iter().map(|s| s.site.to_string()).collect();
        println!(
            "demand {demand:>3}: {names:?} T_R {} insufficient {}",
            p.sequential_t_r(),
            p.insufficient
        );
    }
    Ok(())
}
