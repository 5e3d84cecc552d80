//! Logical resource topology and affinity distances.
//!
//! Every pilot is bound to a node of a tree such as `datacenter/site/machine`.
//! Affinity between two resources is the inverse of their tree distance: the
//! sum of edge weights along the unique path that connects them.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SEPARATOR: char = '/';

/// Hierarchical location such as `us/tacc/lonestar`. Case-sensitive.
///
/// Ordering is the lexicographic order of the canonical text form, which is
/// what tie-breaking in [`TopologyTree::nearest`] relies on.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AffinityLabel(String);

impl AffinityLabel {
    pub fn parse(text: &str) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::validation("affinity label is empty"));
        }
        if text.split(SEPARATOR).any(str::is_empty) {
            return Err(Error::validation(format!(
                "affinity label {text:?} has an empty segment"
            )));
        }
        Ok(AffinityLabel(text.to_owned()))
    }

    pub fn from_segments<S: AsRef<str>>(segments: &[S]) -> Result<Self> {
        for s in segments {
            if s.as_ref().contains(SEPARATOR) {
                return Err(Error::validation(format!(
                    "segment {:?} contains the separator",
                    s.as_ref()
                )));
            }
        }
        let joined = segments
            .iter()
            .map(AsRef::as_ref)
            .collect::<Vec<_>>()
            .join("/");
        Self::parse(&joined)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn segments(&self) -> impl Iterator<Item = &str> {
        self.0.split(SEPARATOR)
    }

    pub fn depth(&self) -> usize {
        self.segments().count()
    }

    /// Label minus its last segment; `None` for top-level labels.
    pub fn parent(&self) -> Option<AffinityLabel> {
        self.0
            .rfind(SEPARATOR)
            .map(|i| AffinityLabel(self.0[..i].to_owned()))
    }

    /// All ancestors from the top level down to and including `self`.
    pub fn lineage(&self) -> Vec<AffinityLabel> {
        let mut out: Vec<_> = std::iter::successors(Some(self.clone()), |l| l.parent()).collect();
        out.reverse();
        out
    }

    /// True when `self` equals `ancestor` or lies in its subtree.
    pub fn is_within(&self, ancestor: &AffinityLabel) -> bool {
        self.0 == ancestor.0
            || (self.0.starts_with(&ancestor.0)
                && self.0.as_bytes().get(ancestor.0.len()) == Some(&(SEPARATOR as u8)))
    }
}

impl fmt::Display for AffinityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for AffinityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl FromStr for AffinityLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

impl TryFrom<String> for AffinityLabel {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Self::parse(&s)
    }
}

impl From<AffinityLabel> for String {
    fn from(l: AffinityLabel) -> String {
        l.0
    }
}

impl PartialOrd for AffinityLabel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for AffinityLabel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.cmp(&other.0)
    }
}

/// Text length of the deepest common ancestor of two labels; 0 is the root.
fn common_ancestor_len(a: &str, b: &str) -> usize {
    let (a, b) = (a.as_bytes(), b.as_bytes());
    let mut last = 0;
    let mut i = 0;
    while i < a.len() && i < b.len() && a[i] == b[i] {
        if a[i] == SEPARATOR as u8 {
            last = i;
        }
        i += 1;
    }
    let boundary = |s: &[u8]| s.len() == i || s[i] == SEPARATOR as u8;
    if boundary(a) && boundary(b) {
        i
    } else {
        last
    }
}

impl std::borrow::Borrow<str> for AffinityLabel {
    fn borrow(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Node {
    /// Weight of the edge to the parent (or to the synthetic root).
    weight: f64,
}

/// Tree of affinity labels under a synthetic root. Inserting a label inserts
/// all of its ancestors, so the tree is connected and acyclic by construction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TopologyTree {
    nodes: BTreeMap<AffinityLabel, Node>,
}

impl TopologyTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_labels<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tree = Self::new();
        for l in labels {
            tree.insert_label(&AffinityLabel::parse(l.as_ref())?);
        }
        Ok(tree)
    }

    /// Idempotent.
    pub fn insert_label(&mut self, label: &AffinityLabel) {
        for l in label.lineage() {
            self.nodes.entry(l).or_insert(Node { weight: 1.0 });
        }
    }

    /// Sets the weight of the edge between `label` and its parent.
    pub fn set_weight(&mut self, label: &AffinityLabel, weight: f64) -> Result<()> {
        if !(weight.is_finite() && weight > 0.0) {
            return Err(Error::validation(format!(
                "edge weight for {label} must be positive, got {weight}"
            )));
        }
        let node = self
            .nodes
            .get_mut(label)
            .ok_or_else(|| Error::lookup("affinity label", label))?;
        node.weight = weight;
        Ok(())
    }

    /// Number of nodes including the synthetic root.
    pub fn node_count(&self) -> usize {
        self.nodes.len() + 1
    }

    pub fn contains(&self, label: &AffinityLabel) -> bool {
        self.nodes.contains_key(label)
    }

    pub fn labels(&self) -> impl Iterator<Item = &AffinityLabel> {
        self.nodes.keys()
    }

    pub fn children<'a>(
        &'a self,
        parent: Option<&'a AffinityLabel>,
    ) -> impl Iterator<Item = &'a AffinityLabel> + 'a {
        self.nodes
            .keys()
            .filter(move |l| l.parent().as_ref() == parent)
    }

    pub fn is_leaf(&self, label: &AffinityLabel) -> bool {
        self.contains(label) && self.children(Some(label)).next().is_none()
    }

    fn require(&self, label: &AffinityLabel) -> Result<&Node> {
        self.nodes
            .get(label)
            .ok_or_else(|| Error::lookup("affinity label", label))
    }

    /// Deepest common ancestor; `None` means the synthetic root.
    pub fn lca(&self, a: &AffinityLabel, b: &AffinityLabel) -> Result<Option<AffinityLabel>> {
        self.require(a)?;
        self.require(b)?;
        let n = common_ancestor_len(a.as_str(), b.as_str());
        Ok((n > 0).then(|| AffinityLabel(a.as_str()[..n].to_owned())))
    }

    /// Sum of edge weights on the path between `a` and `b`.
    pub fn distance(&self, a: &AffinityLabel, b: &AffinityLabel) -> Result<f64> {
        self.require(a)?;
        self.require(b)?;
        let n = common_ancestor_len(a.as_str(), b.as_str());
        Ok(self.climb(a.as_str(), n) + self.climb(b.as_str(), n))
    }

    /// Weight of the path from `label` up to its ancestor of text length `stop`.
    fn climb(&self, label: &str, stop: usize) -> f64 {
        let mut total = 0.0;
        let mut end = label.len();
        while end > stop {
            total += self.nodes.get(&label[..end]).map_or(0.0, |n| n.weight);
            end = label[..end].rfind(SEPARATOR).unwrap_or(0);
        }
        total
    }

    /// Candidate closest to `from`; ties go to the lexicographically smallest label.
    pub fn nearest<'a>(
        &self,
        from: &AffinityLabel,
        candidates: &'a [AffinityLabel],
    ) -> Result<&'a AffinityLabel> {
        if candidates.is_empty() {
            return Err(Error::Argument("nearest: empty candidate list".into()));
        }
        let mut best: Option<(f64, &AffinityLabel)> = None;
        for c in candidates {
            let d = self.distance(from, c)?;
            let better = match best {
                None => true,
                Some((bd, bl)) => d < bd || (d == bd && c < bl),
            };
            if better {
                best = Some((d, c));
            }
        }
        Ok(best.expect("non-empty").1)
    }
}

/// Declarative form used in scenario files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TopologyConfig {
    pub labels: Vec<AffinityLabel>,
    #[serde(default)]
    pub weights: Vec<EdgeWeight>,
}

/// Weight of the edge from `label` up to its parent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeWeight {
    pub label: AffinityLabel,
    pub weight: f64,
}

impl TopologyConfig {
    pub fn build(&self) -> Result<TopologyTree> {
        let mut tree = TopologyTree::new();
        for l in &self.labels {
            tree.insert_label(l);
        }
        for w in &self.weights {
            tree.set_weight(&w.label, w.weight)?;
        }
        Ok(tree)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l(s: &str) -> AffinityLabel {
        AffinityLabel::parse(s).unwrap()
    }

    #[test]
    fn insert_creates_ancestors() {
        let mut t = TopologyTree::new();
        t.insert_label(&l("us/tacc/lonestar"));
        assert_eq!(t.node_count(), 4);
        for s in ["us", "us/tacc", "us/tacc/lonestar"] {
            assert!(t.contains(&l(s)));
        }
        let before = t.clone();
        t.insert_label(&l("us/tacc/lonestar"));
        assert_eq!(t, before);

        t.insert_label(&l("us/tacc/stampede"));
        assert_eq!(t.node_count(), 5);
        assert_eq!(t.children(Some(&l("us/tacc"))).count(), 2);
    }

    #[test]
    fn malformed_labels_rejected() {
        assert!(AffinityLabel::parse("").is_err());
        assert!(AffinityLabel::parse("us//tacc").is_err());
        assert!(AffinityLabel::parse("/us").is_err());
        assert!(AffinityLabel::parse("us/").is_err());
        assert!(AffinityLabel::from_segments(&["a/b"]).is_err());
    }

    #[test]
    fn distances() {
        let t = TopologyTree::from_labels(["us/tacc/lonestar", "us/tacc/stampede", "eu/sara/grid"])
            .unwrap();
        let ls = l("us/tacc/lonestar");
        assert_eq!(t.distance(&ls, &ls).unwrap(), 0.0);
        assert_eq!(t.distance(&ls, &l("us/tacc/stampede")).unwrap(), 2.0);
        assert_eq!(t.distance(&ls, &l("eu/sara/grid")).unwrap(), 6.0);
        assert_eq!(t.distance(&ls, &l("us")).unwrap(), 2.0);
        assert!(matches!(
            t.distance(&ls, &l("asia")),
            Err(Error::Lookup { .. })
        ));
    }

    #[test]
    fn weighted_distance() {
        let mut t = TopologyTree::from_labels(["us/tacc/lonestar", "us/tacc/stampede"]).unwrap();
        t.set_weight(&l("us/tacc/stampede"), 3.5).unwrap();
        assert_eq!(
            t.distance(&l("us/tacc/lonestar"), &l("us/tacc/stampede"))
                .unwrap(),
            4.5
        );
        assert!(t.set_weight(&l("us/tacc"), 0.0).is_err());
        assert!(t.set_weight(&l("eu"), 1.0).is_err());
    }

    #[test]
    fn nearest_rules() {
        let t = TopologyTree::from_labels(["us/tacc/lonestar", "us/tacc/stampede", "eu/sara/grid"])
            .unwrap();
        let ls = l("us/tacc/lonestar");
        let st = l("us/tacc/stampede");
        let eu = l("eu/sara/grid");
        assert_eq!(t.nearest(&ls, &[ls.clone(), st.clone()]).unwrap(), &ls);
        assert_eq!(t.nearest(&ls, &[eu.clone(), st.clone()]).unwrap(), &st);
        // tie at distance 2: smallest label wins
        let t2 = TopologyTree::from_labels(["a/x", "a/y", "a/z"]).unwrap();
        let cands = [l("a/z"), l("a/y")];
        let pick = t2.nearest(&l("a/x"), &cands).unwrap();
        assert_eq!(pick, &l("a/y"));
        assert!(matches!(t.nearest(&ls, &[]), Err(Error::Argument(_))));
    }

    #[test]
    fn subtree_membership() {
        assert!(l("us/tacc/lonestar").is_within(&l("us/tacc")));
        assert!(l("us/tacc").is_within(&l("us/tacc")));
        assert!(!l("us/taccx").is_within(&l("us/tacc")));
        assert!(!l("us").is_within(&l("us/tacc")));
    }

    #[test]
    fn label_text_roundtrip() {
        for s in ["a", "a/b", "Us/TACC/x-1"] {
            assert_eq!(l(s).to_string(), s);
        }
        let json = serde_json::to_string(&l("a/b")).unwrap();
        assert_eq!(json, "\"a/b\"");
        assert!(serde_json::from_str::<AffinityLabel>("\"a//b\"").is_err());
    }
}
