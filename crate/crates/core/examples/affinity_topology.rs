//! Tree distances between affinity labels.

use pilot_data::{AffinityLabel, Result, TopologyTree};

fn main() -> Result<()> {
    let mut t = TopologyTree::from_labels([
        "xsede/tacc/lonestar",
        "xsede/tacc/stampede",
        "xsede/ncsa/bluewaters",
        "osg/purdue",
    ])?;
    // a slow uplink out of purdue
    t.set_weight(&AffinityLabel::parse("osg/purdue")?, 5.0)?;

    let labels: Vec<AffinityLabel> = t.labels().filter(|l| t.is_leaf(l)).cloned().collect();
    for a in &labels {
        for b in &labels {
            if a < b {
                let lca = t.lca(a, b)?.map_or("<root>".to_string(), |l| l.to_string());
                println!("{a:>24} {b:>24}  d={:<4} lca={lca}", t.distance(a, b)?);
            }
        }
    }
    let from = AffinityLabel::parse("xsede/tacc/stampede")?;
    let others: Vec<AffinityLabel> = labels.iter().filter(|l| **l != from).cloned().collect();
    println!("nearest to {from}: {}", t.nearest(&from, &others)?);
    Ok(())
}
