//! Runs the bundled scenarios and compares scheduling policies on one of them.

use std::path::Path;

use pilot_data::harness::{compare_policies, run_scenario, Scenario};
use pilot_data::{Policy, Result, SchedulerConfig};

fn main() -> Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    for name in [
        "naive_pull",
        "colocated",
        "one_site_bottleneck",
        "two_sites_remote",
        "two_sites_replicated",
    ] {
        let m = run_scenario(&Scenario::load(&dir.join(format!("{name}.json")))?)?;
        println!(
            "{name:<22} makespan {:>8.3}  staging {:>7.2}  T_D {:.2}  {:?}",
            m.makespan,
            m.total_staging(),
            m.data.t_d,
            m.per_pilot
        );
    }

    let s = Scenario::load(&dir.join("two_sites_remote.json"))?;
    let blind = SchedulerConfig {
        policy: Policy::AffinityBlindRoundrobin,
        ..SchedulerConfig::default()
    };
    let (_, _, c) = compare_policies(&s, &SchedulerConfig::default(), &blind)?;
    print!("{}", c.render());
    Ok(())
}
