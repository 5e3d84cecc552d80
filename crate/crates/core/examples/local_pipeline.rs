//! Real processes on the local backend: inputs are staged into each CU's
//! sandbox and outputs land in an output Data-Unit.

use std::path::Path;

use pilot_data::harness::{run_scenario, Scenario};
use pilot_data::Result;

fn main() -> Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/local_pipeline.json");
    let mut s = Scenario::load(&path)?;
    let work = std::env::temp_dir().join(format!("pilotdata-example-{}", std::process::id()));
    s.work_dir = Some(work.clone());
    let m = run_scenario(&s)?;
    print!("{}", m.summary());
    for c in &m.cus {
        println!("{} {} staged {:.4}s ran {:.4}s", c.cu_id, c.state, c.staging_s, c.run_s);
    }
    for s in &m.staging {
        println!("put {} in {:.4}s", s.du, s.t_s);
    }
    let _ = std::fs::remove_dir_all(work);
    Ok(())
}
