//! `sim://<affinity-label>` adaptor plus the network and queue-time models
//! used by the simulated clock.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::AffinityLabel;
use crate::units::{
    synthetic_digest, synthetic_seconds, ComputeUnitDescription, FileEntry, ResourceId,
};

use super::adaptor::{
    check_rel, synthetic_outputs, Adaptor, Blob, ExecControl, ExecOutcome, PilotTarget, Sandbox,
    ServiceUrl, StorageBackend, StorageFault,
};

#[derive(Debug, Default)]
pub struct SimAdaptor;

impl Adaptor for SimAdaptor {
    fn implied_affinity(&self, url: &ServiceUrl) -> Result<Option<AffinityLabel>> {
        AffinityLabel::parse(&url.address).map(Some)
    }

    fn open_storage(&self, _target: &PilotTarget<'_>) -> Result<Arc<dyn StorageBackend>> {
        Ok(Arc::new(SimStorage::default()))
    }

    fn open_sandbox(&self, target: &PilotTarget<'_>) -> Result<Arc<dyn Sandbox>> {
        Ok(Arc::new(SimSandbox {
            root: PathBuf::from(format!("/sim/{}", target.local_name)),
            files: Mutex::new(BTreeMap::new()),
        }))
    }

    fn simulated(&self) -> bool {
        true
    }
}

#[derive(Default)]
pub struct SimStorage {
    files: Mutex<BTreeMap<(ResourceId, String), Blob>>,
    fault: Mutex<Option<StorageFault>>,
}

impl StorageBackend for SimStorage {
    fn put(&self, du: &ResourceId, rel: &str, blob: &Blob) -> Result<FileEntry> {
        check_rel(rel)?;
        let stored = match *self.fault.lock().unwrap() {
            Some(StorageFault::RejectWrites) => {
                return Err(Error::Storage(format!("write of {rel:?} rejected")))
            }
            Some(StorageFault::CorruptWrites) => match blob {
                Blob::Bytes(b) if !b.is_empty() => {
                    let mut bad = b.clone();
                    bad[0] ^= 0xff;
                    Blob::Bytes(bad)
                }
                Blob::Bytes(b) => Blob::Bytes(b.clone()),
                Blob::Synthetic { size, .. } => Blob::Synthetic {
                    size: *size,
                    digest: synthetic_digest("corrupt", *size),
                },
            },
            None => blob.clone(),
        };
        let entry = stored.entry();
        self.files
            .lock()
            .unwrap()
            .insert((du.clone(), rel.to_owned()), stored);
        Ok(entry)
    }

    fn get(&self, du: &ResourceId, rel: &str) -> Result<Blob> {
        self.files
            .lock()
            .unwrap()
            .get(&(du.clone(), rel.to_owned()))
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("{du}/{rel}")))
    }

    fn entry(&self, du: &ResourceId, rel: &str) -> Result<FileEntry> {
        Ok(self.get(du, rel)?.entry())
    }

    fn remove_du(&self, du: &ResourceId) -> Result<()> {
        self.files.lock().unwrap().retain(|(d, _), _| d != du);
        Ok(())
    }

    fn path_of(&self, _du: &ResourceId, _rel: &str) -> Option<PathBuf> {
        None
    }

    fn set_fault(&self, fault: Option<StorageFault>) {
        *self.fault.lock().unwrap() = fault;
    }
}

/// In-memory sandbox; execution itself takes no wall time, the simulation
/// clock accounts for it.
pub struct SimSandbox {
    root: PathBuf,
    files: Mutex<BTreeMap<ResourceId, BTreeMap<String, Blob>>>,
}

impl Sandbox for SimSandbox {
    fn root(&self) -> &Path {
        &self.root
    }

    fn prepare(&self, cu: &ResourceId) -> Result<()> {
        self.files.lock().unwrap().entry(cu.clone()).or_default();
        Ok(())
    }

    fn link_input(
        &self,
        cu: &ResourceId,
        rel: &str,
        storage: &dyn StorageBackend,
        du: &ResourceId,
    ) -> Result<()> {
        let blob = storage.get(du, rel)?;
        self.copy_input(cu, rel, &blob)
    }

    fn copy_input(&self, cu: &ResourceId, rel: &str, blob: &Blob) -> Result<()> {
        check_rel(rel)?;
        self.files
            .lock()
            .unwrap()
            .entry(cu.clone())
            .or_default()
            .insert(rel.to_owned(), blob.clone());
        Ok(())
    }

    fn file_entry(&self, cu: &ResourceId, rel: &str) -> Result<FileEntry> {
        Ok(self.read_file(cu, rel)?.entry())
    }

    fn execute(
        &self,
        cu: &ResourceId,
        desc: &ComputeUnitDescription,
        _ctl: &ExecControl,
    ) -> Result<ExecOutcome> {
        let seconds = match synthetic_seconds(&desc.executable) {
            Some(Some(s)) => s,
            _ => {
                return Ok(ExecOutcome {
                    success: false,
                    seconds: 0.0,
                    diagnostics: Some(format!(
                        "simulated pilots only run synthetic:<seconds> tasks, got {:?}",
                        desc.executable
                    )),
                    interrupted: None,
                })
            }
        };
        let outputs = synthetic_outputs(cu, &desc.arguments)?;
        let mut files = self.files.lock().unwrap();
        let dir = files.entry(cu.clone()).or_default();
        for (name, size) in outputs {
            let digest = synthetic_digest(&format!("{cu}/{name}"), size);
            dir.insert(name, Blob::Synthetic { size, digest });
        }
        Ok(ExecOutcome {
            success: true,
            seconds,
            diagnostics: None,
            interrupted: None,
        })
    }

    fn collect_outputs(
        &self,
        cu: &ResourceId,
        pattern: &glob::Pattern,
        exclude: &BTreeSet<String>,
    ) -> Result<Vec<(String, Blob)>> {
        let files = self.files.lock().unwrap();
        Ok(files
            .get(cu)
            .map(|dir| {
                dir.iter()
                    .filter(|(n, _)| !exclude.contains(*n) && pattern.matches(n))
                    .map(|(n, b)| (n.clone(), b.clone()))
                    .collect()
            })
            .unwrap_or_default())
    }

    fn read_file(&self, cu: &ResourceId, rel: &str) -> Result<Blob> {
        self.files
            .lock()
            .unwrap()
            .get(cu)
            .and_then(|d| d.get(rel))
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("{cu}/{rel}")))
    }
}

/// Link rates in bytes per second between topology nodes.
///
/// A lookup between two labels uses the most specific configured pair of
/// ancestors, falling back to the default rate. Transfers within the same
/// node cost nothing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BandwidthMatrix {
    default: Option<f64>,
    links: BTreeMap<(AffinityLabel, AffinityLabel), f64>,
    explicit: BTreeSet<(AffinityLabel, AffinityLabel)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BandwidthConfig {
    #[serde(default)]
    pub default: Option<f64>,
    /// `[labelA, labelB, bytes_per_second]`
    #[serde(default)]
    pub links: Vec<(AffinityLabel, AffinityLabel, f64)>,
}

fn check_rate(rate: f64) -> Result<()> {
    if rate.is_finite() && rate > 0.0 {
        Ok(())
    } else {
        Err(Error::validation(format!("bandwidth must be > 0, got {rate}")))
    }
}

impl BandwidthMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_default(rate: f64) -> Result<Self> {
        check_rate(rate)?;
        Ok(BandwidthMatrix {
            default: Some(rate),
            ..Self::default()
        })
    }

    pub fn from_config(cfg: &BandwidthConfig) -> Result<Self> {
        let mut m = BandwidthMatrix::new();
        if let Some(d) = cfg.default {
            check_rate(d)?;
            m.default = Some(d);
        }
        for (a, b, r) in &cfg.links {
            m.set(a.clone(), b.clone(), *r)?;
        }
        Ok(m)
    }

    pub fn default_rate(&self) -> Option<f64> {
        self.default
    }

    /// Sets the a->b rate; b->a follows unless it was set explicitly.
    pub fn set(&mut self, a: AffinityLabel, b: AffinityLabel, rate: f64) -> Result<()> {
        check_rate(rate)?;
        if !self.explicit.contains(&(b.clone(), a.clone())) {
            self.links.insert((b.clone(), a.clone()), rate);
        }
        self.links.insert((a.clone(), b.clone()), rate);
        self.explicit.insert((a, b));
        Ok(())
    }

    /// `Ok(None)` means same node, i.e. no transfer needed.
    pub fn rate(&self, from: &AffinityLabel, to: &AffinityLabel) -> Result<Option<f64>> {
        if from == to {
            return Ok(None);
        }
        let mut best: Option<(usize, f64)> = None;
        for a in from.lineage() {
            for b in to.lineage() {
                if let Some(r) = self.links.get(&(a.clone(), b.clone())) {
                    let spec = a.depth() + b.depth();
                    if best.is_none_or(|(s, _)| spec > s) {
                        best = Some((spec, *r));
                    }
                }
            }
        }
        match (best, self.default) {
            (Some((_, r)), _) => Ok(Some(r)),
            (None, Some(d)) => Ok(Some(d)),
            (None, None) => Err(Error::Model(format!(
                "no bandwidth between {from} and {to} and no default rate"
            ))),
        }
    }

    pub fn transfer_seconds(
        &self,
        from: &AffinityLabel,
        to: &AffinityLabel,
        bytes: u64,
    ) -> Result<f64> {
        Ok(match self.rate(from, to)? {
            None => 0.0,
            Some(r) => bytes as f64 / r,
        })
    }
}

/// Time a simulated pilot waits in the resource's batch queue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueueModel {
    Fixed(f64),
    Exponential { mean: f64 },
}

impl Default for QueueModel {
    fn default() -> Self {
        QueueModel::Fixed(0.0)
    }
}

impl QueueModel {
    pub fn validate(&self) -> Result<()> {
        let v = match self {
            QueueModel::Fixed(d) => *d,
            QueueModel::Exponential { mean } => *mean,
        };
        if v.is_finite() && v >= 0.0 {
            Ok(())
        } else {
            Err(Error::validation(format!("queue model value {v} must be >= 0")))
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            QueueModel::Fixed(d) => *d,
            QueueModel::Exponential { mean } if *mean == 0.0 => 0.0,
            QueueModel::Exponential { mean } => {
                Exp::new(1.0 / mean).expect("positive rate").sample(rng)
            }
        }
    }

    /// Expected queue time: the delay itself, or the distribution mean.
    pub fn expected(&self) -> f64 {
        match self {
            QueueModel::Fixed(d) => *d,
            QueueModel::Exponential { mean } => *mean,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn l(s: &str) -> AffinityLabel {
        AffinityLabel::parse(s).unwrap()
    }

    #[test]
    fn bandwidth_lookup() {
        let mut m = BandwidthMatrix::new();
        m.set(l("us/tacc"), l("eu"), 10.0).unwrap();
        m.set(l("us/tacc/lonestar"), l("us/tacc/stampede"), 2e7).unwrap();
        assert_eq!(m.rate(&l("us/tacc/lonestar"), &l("us/tacc/lonestar")).unwrap(), None);
        assert_eq!(
            m.rate(&l("us/tacc/stampede"), &l("us/tacc/lonestar")).unwrap(),
            Some(2e7)
        );
        assert_eq!(m.rate(&l("eu/sara/grid"), &l("us/tacc/lonestar")).unwrap(), Some(10.0));
        assert!(matches!(
            m.rate(&l("asia"), &l("eu")),
            Err(Error::Model(_))
        ));
        assert_eq!(
            m.transfer_seconds(&l("us/tacc/lonestar"), &l("us/tacc/stampede"), 9_000_000_000)
                .unwrap(),
            450.0
        );
    }

    #[test]
    fn asymmetric_override() {
        let mut m = BandwidthMatrix::new();
        m.set(l("a"), l("b"), 10.0).unwrap();
        m.set(l("b"), l("a"), 5.0).unwrap();
        assert_eq!(m.rate(&l("a"), &l("b")).unwrap(), Some(10.0));
        assert_eq!(m.rate(&l("b"), &l("a")).unwrap(), Some(5.0));
        m.set(l("a"), l("b"), 20.0).unwrap();
        assert_eq!(m.rate(&l("b"), &l("a")).unwrap(), Some(5.0));
        assert!(m.set(l("a"), l("c"), 0.0).is_err());
    }

    #[test]
    fn queue_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(QueueModel::Fixed(8100.0).sample(&mut rng), 8100.0);
        let e = QueueModel::Exponential { mean: 100.0 };
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<f64> = (0..5).map(|_| e.sample(&mut a)).collect();
        let ys: Vec<f64> = (0..5).map(|_| e.sample(&mut b)).collect();
        assert_eq!(xs, ys);
        assert!(xs.iter().all(|x| *x >= 0.0));
        assert_eq!(e.expected(), 100.0);
        assert!(QueueModel::Fixed(-1.0).validate().is_err());
        let j: QueueModel = serde_json::from_str(r#"{"fixed": 8.1}"#).unwrap();
        assert_eq!(j, QueueModel::Fixed(8.1));
    }
}
