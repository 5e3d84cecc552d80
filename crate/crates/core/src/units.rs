//! Compute-Units, Data-Units, their JSON descriptions and state machines.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::topology::AffinityLabel;

pub const URL_SCHEME: &str = "ps://";

/// Kinds of globally addressable objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Cu,
    Du,
    Pilot,
    Pd,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Cu => "cu",
            Kind::Du => "du",
            Kind::Pilot => "pilot",
            Kind::Pd => "pd",
        }
    }
}

impl FromStr for Kind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "cu" => Kind::Cu,
            "du" => Kind::Du,
            "pilot" => Kind::Pilot,
            "pd" => Kind::Pd,
            other => return Err(Error::validation(format!("unknown resource kind {other:?}"))),
        })
    }
}

/// Global address of a unit or pilot: `ps://<store>/<kind>/<n>`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ResourceId(String);

impl ResourceId {
    pub fn new(store: &str, kind: Kind, seq: u64) -> Self {
        ResourceId(format!("{URL_SCHEME}{store}/{}/{seq}", kind.as_str()))
    }

    pub fn parse(s: &str) -> Result<Self> {
        let rest = s
            .strip_prefix(URL_SCHEME)
            .ok_or_else(|| Error::validation(format!("{s:?} is not a ps:// address")))?;
        let parts: Vec<&str> = rest.split('/').collect();
        match parts.as_slice() {
            [store, kind, seq] if !store.is_empty() => {
                Kind::from_str(kind)?;
                seq.parse::<u64>()
                    .map_err(|_| Error::validation(format!("bad sequence number in {s:?}")))?;
                Ok(ResourceId(s.to_owned()))
            }
            _ => Err(Error::validation(format!("malformed address {s:?}"))),
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    fn parts(&self) -> (&str, &str, &str) {
        let rest = &self.0[URL_SCHEME.len()..];
        let mut it = rest.split('/');
        let store = it.next().unwrap_or_default();
        let kind = it.next().unwrap_or_default();
        let seq = it.next().unwrap_or_default();
        (store, kind, seq)
    }

    pub fn store(&self) -> &str {
        self.parts().0
    }

    pub fn kind(&self) -> Kind {
        Kind::from_str(self.parts().1).expect("validated at construction")
    }

    pub fn seq(&self) -> u64 {
        self.parts().2.parse().expect("validated at construction")
    }

    /// Key of the record describing this object in the coordination store.
    pub fn record_key(&self) -> String {
        format!("{}/{}", self.parts().1, self.parts().2)
    }

    /// Filesystem-safe short name, e.g. `cu-7`.
    pub fn local_name(&self) -> String {
        format!("{}-{}", self.parts().1, self.parts().2)
    }
}

impl fmt::Display for ResourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for ResourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl TryFrom<String> for ResourceId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Self::parse(&s)
    }
}

impl From<ResourceId> for String {
    fn from(id: ResourceId) -> String {
        id.0
    }
}

impl FromStr for ResourceId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

/// Hex SHA-256, the content digest recorded in manifests.
pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest standing in for synthetic (size-only) content in the simulator.
pub fn synthetic_digest(name: &str, size: u64) -> String {
    digest_bytes(format!("synthetic:{name}:{size}").as_bytes())
}

/// Where a Data-Unit file comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FileRef {
    /// A local file, written as `file:///abs/path` or a bare path.
    Path(PathBuf),
    /// Size-only content for simulated runs: `synthetic://<name>?size=<bytes>`.
    Synthetic { name: String, size: u64 },
}

impl FileRef {
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("synthetic://") {
            let (name, query) = rest
                .split_once('?')
                .ok_or_else(|| Error::validation(format!("{s:?}: synthetic ref needs ?size=")))?;
            let size = query
                .strip_prefix("size=")
                .and_then(|v| v.parse::<u64>().ok())
                .ok_or_else(|| Error::validation(format!("{s:?}: bad size")))?;
            if name.is_empty() || name.contains('/') {
                return Err(Error::validation(format!("{s:?}: bad synthetic name")));
            }
            return Ok(FileRef::Synthetic {
                name: name.to_owned(),
                size,
            });
        }
        let path = s.strip_prefix("file://").unwrap_or(s);
        if path.is_empty() {
            return Err(Error::validation("empty file reference"));
        }
        if let Some((scheme, _)) = path.split_once("://") {
            return Err(Error::validation(format!(
                "unsupported file reference scheme {scheme:?}"
            )));
        }
        Ok(FileRef::Path(PathBuf::from(path)))
    }

    pub fn synthetic(name: &str, size: u64) -> String {
        format!("synthetic://{name}?size={size}")
    }

    /// Relative path of this file inside its Data-Unit.
    pub fn basename(&self) -> Option<String> {
        match self {
            FileRef::Path(p) => p.file_name().map(|n| n.to_string_lossy().into_owned()),
            FileRef::Synthetic { name, .. } => Some(name.clone()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DataUnitDescription {
    #[serde(default)]
    pub file_refs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affinity: Option<AffinityLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl DataUnitDescription {
    /// All invariant violations; empty means valid.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        for r in &self.file_refs {
            match FileRef::parse(r) {
                Err(e) => out.push(format!("file_ref {r:?}: {e}")),
                Ok(f) => match f.basename() {
                    None => out.push(format!("file_ref {r:?} has no basename")),
                    Some(b) => {
                        if !seen.insert(b.clone()) {
                            out.push(format!("duplicate basename {b:?}"));
                        }
                    }
                },
            }
        }
        out
    }

    pub fn parsed_refs(&self) -> Result<Vec<FileRef>> {
        self.file_refs.iter().map(|r| FileRef::parse(r)).collect()
    }
}

fn default_cores() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeUnitDescription {
    pub executable: String,
    #[serde(default)]
    pub arguments: Vec<String>,
    #[serde(default = "default_cores")]
    pub cores: u32,
    #[serde(default)]
    pub input_data: Vec<ResourceId>,
    #[serde(default)]
    pub output_data: Vec<ResourceId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affinity: Option<AffinityLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_estimate: Option<f64>,
}

impl ComputeUnitDescription {
    pub fn new(executable: impl Into<String>) -> Self {
        ComputeUnitDescription {
            executable: executable.into(),
            arguments: Vec::new(),
            cores: 1,
            input_data: Vec::new(),
            output_data: Vec::new(),
            affinity: None,
            wall_time_estimate: None,
        }
    }

    /// Synthetic task that occupies a slot for `seconds`.
    pub fn synthetic(seconds: f64) -> Self {
        Self::new(format!("{SYNTHETIC_PREFIX}{seconds}"))
    }

    /// All invariant violations; `du_exists` answers whether a referenced DU is known.
    pub fn validate(&self, du_exists: impl Fn(&ResourceId) -> bool) -> Vec<String> {
        let mut out = Vec::new();
        if self.executable.trim().is_empty() {
            out.push("executable must not be empty".to_owned());
        }
        if self.cores < 1 {
            out.push("cores must be >= 1".to_owned());
        }
        if let Some(secs) = synthetic_seconds(&self.executable) {
            if secs.is_none() {
                out.push(format!("bad synthetic task tag {:?}", self.executable));
            }
        }
        if let Some(w) = self.wall_time_estimate {
            if !(w.is_finite() && w >= 0.0) {
                out.push("wall_time_estimate must be a non-negative number".to_owned());
            }
        }
        for (field, ids) in [("input_data", &self.input_data), ("output_data", &self.output_data)]
        {
            let mut seen = HashSet::new();
            for id in ids {
                if id.kind() != Kind::Du {
                    out.push(format!("{field}: {id} is not a data unit address"));
                } else if !du_exists(id) {
                    out.push(format!("{field}: unknown data unit {id}"));
                }
                if !seen.insert(id) {
                    out.push(format!("{field}: {id} listed twice"));
                }
            }
        }
        if let Some(id) = self.input_data.iter().find(|i| self.output_data.contains(i)) {
            out.push(format!("{id} is both input and output"));
        }
        out
    }
}

pub const SYNTHETIC_PREFIX: &str = "synthetic:";

/// `None` if `exe` is not a synthetic tag, `Some(None)` if it is but malformed.
pub fn synthetic_seconds(exe: &str) -> Option<Option<f64>> {
    exe.strip_prefix(SYNTHETIC_PREFIX).map(|s| {
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite() && *v >= 0.0)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CuState {
    New,
    Queued,
    StagingIn,
    Running,
    StagingOut,
    Done,
    Failed,
    Canceled,
}

impl CuState {
    pub const ALL: [CuState; 8] = [
        CuState::New,
        CuState::Queued,
        CuState::StagingIn,
        CuState::Running,
        CuState::StagingOut,
        CuState::Done,
        CuState::Failed,
        CuState::Canceled,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, CuState::Done | CuState::Failed | CuState::Canceled)
    }

    /// States in which the CU holds a pilot slot.
    pub fn holds_slot(self) -> bool {
        matches!(
            self,
            CuState::StagingIn | CuState::Running | CuState::StagingOut
        )
    }

    pub fn can_transition(self, to: CuState) -> bool {
        use CuState::*;
        if self.is_terminal() {
            return false;
        }
        matches!(
            (self, to),
            (New, Queued)
                | (Queued, StagingIn)
                | (StagingIn, Running)
                | (Running, StagingOut)
                | (StagingOut, Done)
                | (_, Failed)
                | (_, Canceled)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CuState::New => "NEW",
            CuState::Queued => "QUEUED",
            CuState::StagingIn => "STAGING_IN",
            CuState::Running => "RUNNING",
            CuState::StagingOut => "STAGING_OUT",
            CuState::Done => "DONE",
            CuState::Failed => "FAILED",
            CuState::Canceled => "CANCELED",
        }
    }
}

impl fmt::Display for CuState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeUnit {
    pub id: ResourceId,
    pub description: ComputeUnitDescription,
    pub state: CuState,
    pub assigned_pilot: Option<ResourceId>,
    pub timestamps: BTreeMap<CuState, f64>,
    pub staging_seconds: f64,
    pub run_seconds: f64,
    /// Times the executable was started; the exactly-once marker.
    pub executions: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<String>,
}

impl ComputeUnit {
    pub fn new(id: ResourceId, description: ComputeUnitDescription, now: f64) -> Self {
        ComputeUnit {
            id,
            description,
            state: CuState::New,
            assigned_pilot: None,
            timestamps: BTreeMap::from([(CuState::New, now)]),
            staging_seconds: 0.0,
            run_seconds: 0.0,
            executions: 0,
            diagnostics: None,
        }
    }

    pub fn transition(&mut self, to: CuState, now: f64) -> Result<()> {
        if !self.state.can_transition(to) {
            return Err(Error::StateMachine {
                from: self.state.to_string(),
                to: to.to_string(),
            });
        }
        if to == CuState::StagingIn && self.assigned_pilot.is_none() {
            return Err(Error::Integrity(format!(
                "{} entering STAGING_IN without an assigned pilot",
                self.id
            )));
        }
        self.state = to;
        self.timestamps.insert(to, now);
        Ok(())
    }

    /// Binds the CU to a pilot. Rebinding to a different pilot once staging
    /// has started is refused.
    pub fn assign(&mut self, pilot: &ResourceId) -> Result<()> {
        match &self.assigned_pilot {
            Some(p) if p != pilot && self.state != CuState::Queued => Err(Error::Conflict(
                format!("{} is already bound to {p}", self.id),
            )),
            _ => {
                self.assigned_pilot = Some(pilot.clone());
                Ok(())
            }
        }
    }

    pub fn fail(&mut self, reason: impl Into<String>, now: f64) -> Result<()> {
        self.transition(CuState::Failed, now)?;
        self.diagnostics = Some(reason.into());
        Ok(())
    }

    pub fn entered(&self, s: CuState) -> Option<f64> {
        self.timestamps.get(&s).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DuState {
    New,
    Pending,
    Available,
    Failed,
    Deleted,
}

impl fmt::Display for DuState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DuState::New => "NEW",
            DuState::Pending => "PENDING",
            DuState::Available => "AVAILABLE",
            DuState::Failed => "FAILED",
            DuState::Deleted => "DELETED",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub size: u64,
    pub digest: String,
}

/// Relative path -> (size, digest). Keys are unique by construction.
pub type Manifest = BTreeMap<String, FileEntry>;

pub fn manifest_bytes(m: &Manifest) -> u64 {
    m.values().map(|e| e.size).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataUnit {
    pub id: ResourceId,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub affinity: Option<AffinityLabel>,
    pub state: DuState,
    /// Frozen once the unit is AVAILABLE.
    pub manifest: Manifest,
    /// Files staged so far while PENDING.
    #[serde(default)]
    pub staged: Manifest,
    pub replicas: BTreeSet<ResourceId>,
}

impl DataUnit {
    pub fn new(id: ResourceId, desc: &DataUnitDescription) -> Self {
        DataUnit {
            id,
            name: desc.name.clone(),
            affinity: desc.affinity.clone(),
            state: DuState::New,
            manifest: Manifest::new(),
            staged: Manifest::new(),
            replicas: BTreeSet::new(),
        }
    }

    pub fn bytes(&self) -> u64 {
        if self.state == DuState::Available {
            manifest_bytes(&self.manifest)
        } else {
            manifest_bytes(&self.staged)
        }
    }

    pub fn mark_pending(&mut self) -> Result<()> {
        match self.state {
            DuState::New | DuState::Pending => {
                self.state = DuState::Pending;
                Ok(())
            }
            s => Err(Error::StateMachine {
                from: s.to_string(),
                to: DuState::Pending.to_string(),
            }),
        }
    }

    /// Adds one file to a PENDING unit's staging area.
    pub fn stage_file(&mut self, rel: &str, entry: FileEntry) -> Result<()> {
        if self.state == DuState::Available {
            return Err(Error::Immutable(format!("{} is sealed", self.id)));
        }
        if self.state != DuState::Pending {
            return Err(Error::StateMachine {
                from: self.state.to_string(),
                to: "staging".into(),
            });
        }
        match self.staged.get(rel) {
            Some(e) if *e == entry => Ok(()),
            Some(_) => Err(Error::Conflict(format!(
                "{} already holds a different {rel:?}",
                self.id
            ))),
            None => {
                self.staged.insert(rel.to_owned(), entry);
                Ok(())
            }
        }
    }

    /// Freezes `manifest`. `replica_has` must confirm each file is present in
    /// at least one replica.
    pub fn seal(
        &mut self,
        manifest: Manifest,
        replica_has: impl Fn(&str, &FileEntry) -> bool,
    ) -> Result<()> {
        match self.state {
            DuState::Available => {
                return Err(Error::Immutable(format!("{} is already sealed", self.id)))
            }
            DuState::Pending => {}
            s => {
                return Err(Error::StateMachine {
                    from: s.to_string(),
                    to: DuState::Available.to_string(),
                })
            }
        }
        if let Some((rel, _)) = manifest.iter().find(|(rel, e)| !replica_has(rel, e)) {
            return Err(Error::Integrity(format!(
                "{}: {rel:?} is not present in any replica",
                self.id
            )));
        }
        self.manifest = manifest;
        self.staged.clear();
        self.state = DuState::Available;
        Ok(())
    }

    pub fn fail(&mut self) {
        if !matches!(self.state, DuState::Available | DuState::Deleted) {
            self.state = DuState::Failed;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn du_id(n: u64) -> ResourceId {
        ResourceId::new("local", Kind::Du, n)
    }

    #[test]
    fn resource_ids() {
        let id = ResourceId::new("s1", Kind::Cu, 7);
        assert_eq!(id.as_str(), "ps://s1/cu/7");
        assert_eq!(id.store(), "s1");
        assert_eq!(id.kind(), Kind::Cu);
        assert_eq!(id.seq(), 7);
        assert_eq!(id.local_name(), "cu-7");
        assert_eq!(id.record_key(), "cu/7");
        assert_eq!(ResourceId::parse("ps://s1/cu/7").unwrap(), id);
        for bad in ["cu/7", "ps://s1/xx/7", "ps://s1/cu/x", "ps:///cu/1", "ps://a/cu/1/2"] {
            assert!(ResourceId::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn cud_validation() {
        let mut d = ComputeUnitDescription::new("/bin/true");
        d.cores = 0;
        let v = d.validate(|_| true);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("cores"));

        let mut ok = ComputeUnitDescription::new("/bin/true");
        ok.input_data = vec![du_id(1)];
        assert!(ok.validate(|id| *id == du_id(1)).is_empty());
        assert!(!ok.validate(|_| false).is_empty());

        let mut dup = ok.clone();
        dup.output_data = vec![du_id(1)];
        assert!(!dup.validate(|_| true).is_empty());

        assert!(!ComputeUnitDescription::new("synthetic:abc")
            .validate(|_| true)
            .is_empty());
        assert!(ComputeUnitDescription::synthetic(2.5)
            .validate(|_| true)
            .is_empty());
    }

    #[test]
    fn dud_validation() {
        let d = DataUnitDescription {
            file_refs: vec!["/tmp/x/a.txt".into(), "file:///tmp/y/a.txt".into()],
            ..Default::default()
        };
        let v = d.validate();
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("duplicate basename"));
        assert!(DataUnitDescription::default().validate().is_empty());
        let s = DataUnitDescription {
            file_refs: vec![FileRef::synthetic("r.fq", 10), "synthetic://x".into()],
            ..Default::default()
        };
        assert_eq!(s.validate().len(), 1);
    }

    #[test]
    fn json_field_names() {
        let j = r#"{"executable":"/bin/echo","arguments":["hi"],"cores":2,
                    "input_data":["ps://local/du/1"],"output_data":[],"affinity":"us/tacc"}"#;
        let d: ComputeUnitDescription = serde_json::from_str(j).unwrap();
        assert_eq!(d.cores, 2);
        assert_eq!(d.affinity.unwrap().as_str(), "us/tacc");
        let du: DataUnitDescription =
            serde_json::from_str(r#"{"file_refs":["a"],"affinity":"x/y"}"#).unwrap();
        assert_eq!(du.file_refs, vec!["a"]);
    }

    #[test]
    fn transitions() {
        let mut cu = ComputeUnit::new(
            ResourceId::new("l", Kind::Cu, 1),
            ComputeUnitDescription::synthetic(1.0),
            0.0,
        );
        cu.transition(CuState::Queued, 0.0).unwrap();
        assert!(cu.transition(CuState::StagingIn, 1.0).is_err(), "no pilot yet");
        cu.assign(&ResourceId::new("l", Kind::Pilot, 1)).unwrap();
        cu.transition(CuState::StagingIn, 1.0).unwrap();
        assert!(cu.assign(&ResourceId::new("l", Kind::Pilot, 2)).is_err());
        cu.transition(CuState::Running, 2.0).unwrap();
        cu.transition(CuState::Failed, 3.0).unwrap();
        let err = cu.transition(CuState::Running, 4.0).unwrap_err();
        assert!(matches!(err, Error::StateMachine { ref from, ref to } if from == "FAILED" && to == "RUNNING"));
        assert_eq!(cu.entered(CuState::Running), Some(2.0));
    }

    #[test]
    fn done_is_absorbing() {
        for to in CuState::ALL {
            assert!(!CuState::Done.can_transition(to));
        }
        assert!(CuState::Running.can_transition(CuState::Failed));
        assert!(CuState::New.can_transition(CuState::Canceled));
        assert!(!CuState::Queued.can_transition(CuState::Running));
    }

    fn entry(n: u8) -> FileEntry {
        FileEntry {
            size: n as u64,
            digest: digest_bytes(&[n]),
        }
    }

    #[test]
    fn seal_rules() {
        let mut du = DataUnit::new(du_id(1), &DataUnitDescription::default());
        du.mark_pending().unwrap();
        for (i, name) in ["a", "b", "c"].iter().enumerate() {
            du.stage_file(name, entry(i as u8)).unwrap();
        }
        let m = du.staged.clone();
        du.seal(m.clone(), |_, _| true).unwrap();
        assert_eq!(du.state, DuState::Available);
        assert_eq!(du.manifest.len(), 3);
        assert!(matches!(du.seal(m, |_, _| true), Err(Error::Immutable(_))));
        assert!(matches!(du.stage_file("d", entry(9)), Err(Error::Immutable(_))));

        let mut du2 = DataUnit::new(du_id(2), &DataUnitDescription::default());
        du2.mark_pending().unwrap();
        let mut m2 = Manifest::new();
        m2.insert("ghost".into(), entry(1));
        assert!(matches!(du2.seal(m2, |_, _| false), Err(Error::Integrity(_))));
    }

    #[test]
    fn staging_conflicts() {
        let mut du = DataUnit::new(du_id(1), &DataUnitDescription::default());
        du.mark_pending().unwrap();
        du.stage_file("a", entry(1)).unwrap();
        du.stage_file("a", entry(1)).unwrap();
        assert!(matches!(du.stage_file("a", entry(2)), Err(Error::Conflict(_))));
        assert_eq!(du.staged.len(), 1);
    }
}
