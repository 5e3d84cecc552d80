//! Shared control plane between the manager and the pilot agents.
//!
//! The store holds a versioned key/value map plus named FIFO queues of unit
//! ids: one `global` queue and one queue per Pilot-Compute. Every operation
//! runs under a single lock, so the store is linearizable. A pulled id stays
//! *in flight* until it is acknowledged; after a crash, in-flight ids are put
//! back at the head of the queue they came from.
//!
//! Snapshots are a sequence of length-prefixed JSON records:
//!
//! ```text
//! PSSNAP 1\n
//! <len>\n<json record>\n
//! ...
//! <len>\n{"type":"end","records":<n>}\n
//! ```

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::units::ResourceId;

pub const GLOBAL_QUEUE: &str = "global";
const SNAPSHOT_MAGIC: &str = "PSSNAP 1\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versioned {
    pub version: u64,
    pub value: Value,
}

/// Which queue a pulled id came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Pilot,
    Global,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pulled {
    pub id: String,
    pub source: Source,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnapshotPolicy {
    /// Snapshot after every mutating operation.
    WriteThrough,
    /// Snapshot after every `n` mutating operations.
    Every(u64),
    /// Only on explicit [`MemoryStore::snapshot`] calls.
    Manual,
}

/// Contract shared by every store implementation.
pub trait CoordinationStore: Send + Sync {
    fn name(&self) -> &str;

    /// Creates a queue; existing queues are left untouched.
    fn create_queue(&self, name: &str) -> Result<()>;
    /// Removes a queue and returns the ids it still held.
    fn drop_queue(&self, name: &str) -> Result<Vec<String>>;
    fn enqueue(&self, queue: &str, id: &str) -> Result<()>;
    /// Head of `pilot_queue` if non-empty, else head of the global queue.
    fn pull(&self, pilot_queue: &str) -> Result<Option<Pulled>>;
    /// Like [`pull`](Self::pull) but waits up to `timeout` for work.
    fn pull_timeout(&self, pilot_queue: &str, timeout: Duration) -> Result<Option<Pulled>>;
    /// Releases the in-flight lease on a pulled id.
    fn ack(&self, id: &str) -> Result<()>;
    /// Removes a queued id; false if it was not queued.
    fn remove(&self, id: &str) -> Result<bool>;
    /// Name of the queue currently holding `id`.
    fn locate(&self, id: &str) -> Result<Option<String>>;
    fn queue_items(&self, queue: &str) -> Result<Vec<String>>;
    fn queue_len(&self, queue: &str) -> Result<usize> {
        Ok(self.queue_items(queue)?.len())
    }
    /// Puts every in-flight id back at the head of its source queue.
    fn requeue_in_flight(&self) -> Result<Vec<String>>;

    fn put_state(&self, key: &str, value: Value) -> Result<u64>;
    fn get_state(&self, key: &str) -> Result<Versioned>;
    /// Writes only if the current version matches (`None`: key must be absent).
    fn compare_and_put(&self, key: &str, expected: Option<u64>, value: Value) -> Result<u64>;
    fn keys(&self, prefix: &str) -> Result<Vec<String>>;
    fn next_seq(&self, kind: &str) -> Result<u64>;
}

#[derive(Debug, Default, Clone, PartialEq)]
struct State {
    kv: BTreeMap<String, Versioned>,
    queues: BTreeMap<String, VecDeque<String>>,
    /// id -> queue it was pulled from, in pull order.
    in_flight: BTreeMap<String, (u64, String)>,
    /// id -> queue holding it; mirrors `queues`.
    index: HashMap<String, String>,
    pull_counter: u64,
    ops: u64,
}

impl State {
    fn fresh() -> Self {
        let mut s = State::default();
        s.queues.insert(GLOBAL_QUEUE.to_owned(), VecDeque::new());
        s
    }

    fn position(&self, id: &str) -> Option<&str> {
        self.index.get(id).map(String::as_str)
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .queues
            .iter()
            .flat_map(|(n, q)| q.iter().map(move |id| (id.clone(), n.clone())))
            .collect();
    }
}

#[derive(Debug)]
struct Fault {
    remaining: Option<u64>,
    crashed: bool,
}

/// In-process store with optional file snapshots.
pub struct MemoryStore {
    name: String,
    state: Mutex<State>,
    work: Condvar,
    snapshot_path: Option<PathBuf>,
    policy: SnapshotPolicy,
    fault: Mutex<Fault>,
}

impl std::fmt::Debug for MemoryStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemoryStore")
            .field("name", &self.name)
            .field("snapshot_path", &self.snapshot_path)
            .finish()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Record {
    Meta {
        store: String,
        ops: u64,
        pulls: u64,
    },
    Kv {
        key: String,
        version: u64,
        value: Value,
    },
    Queue {
        name: String,
        items: Vec<String>,
    },
    Inflight {
        id: String,
        order: u64,
        queue: String,
    },
    End {
        records: u64,
    },
}

impl MemoryStore {
    pub fn new(name: impl Into<String>) -> Self {
        Self::from_state(name.into(), State::fresh(), None, SnapshotPolicy::Manual)
    }

    /// Store that persists itself to `path` according to `policy`.
    pub fn persistent(
        name: impl Into<String>,
        path: impl Into<PathBuf>,
        policy: SnapshotPolicy,
    ) -> Self {
        Self::from_state(name.into(), State::fresh(), Some(path.into()), policy)
    }

    fn from_state(
        name: String,
        state: State,
        snapshot_path: Option<PathBuf>,
        policy: SnapshotPolicy,
    ) -> Self {
        MemoryStore {
            name,
            state: Mutex::new(state),
            work: Condvar::new(),
            snapshot_path,
            policy,
            fault: Mutex::new(Fault {
                remaining: None,
                crashed: false,
            }),
        }
    }

    pub fn into_shared(self) -> Arc<dyn CoordinationStore> {
        Arc::new(self)
    }

    pub fn snapshot_path(&self) -> Option<&Path> {
        self.snapshot_path.as_deref()
    }

    /// After `ops` more successful mutations every call fails with
    /// [`Error::Crashed`], as if the process had died at that point.
    pub fn crash_after(&self, ops: u64) {
        self.fault.lock().unwrap().remaining = Some(ops);
    }

    pub fn is_crashed(&self) -> bool {
        self.fault.lock().unwrap().crashed
    }

    /// Number of mutating operations applied since creation.
    pub fn op_count(&self) -> u64 {
        self.state.lock().unwrap().ops
    }

    fn check_alive(&self) -> Result<()> {
        if self.fault.lock().unwrap().crashed {
            Err(Error::Crashed)
        } else {
            Ok(())
        }
    }

    fn read(&self) -> Result<MutexGuard<'_, State>> {
        self.check_alive()?;
        Ok(self.state.lock().unwrap())
    }

    /// Runs a mutation atomically and applies the snapshot cadence.
    fn mutate<T>(&self, f: impl FnOnce(&mut State) -> Result<T>) -> Result<T> {
        {
            let mut fault = self.fault.lock().unwrap();
            if fault.crashed {
                return Err(Error::Crashed);
            }
            if let Some(n) = fault.remaining.as_mut() {
                if *n == 0 {
                    fault.crashed = true;
                    return Err(Error::Crashed);
                }
                *n -= 1;
            }
        }
        let mut st = self.state.lock().unwrap();
        // closures validate before they touch the state, so an Err leaves it unchanged
        let out = f(&mut st)?;
        st.ops += 1;
        let due = match self.policy {
            SnapshotPolicy::WriteThrough => true,
            SnapshotPolicy::Every(n) => n > 0 && st.ops.is_multiple_of(n),
            SnapshotPolicy::Manual => false,
        };
        if due {
            if let Some(path) = &self.snapshot_path {
                write_snapshot(path, &self.name, &st)?;
            }
        }
        drop(st);
        self.work.notify_all();
        Ok(out)
    }

    /// Writes the current state to the configured snapshot path.
    pub fn snapshot(&self) -> Result<PathBuf> {
        let path = self
            .snapshot_path
            .clone()
            .ok_or_else(|| Error::Argument("store has no snapshot path".into()))?;
        self.snapshot_to(&path)?;
        Ok(path)
    }

    pub fn snapshot_to(&self, path: &Path) -> Result<()> {
        let st = self.read()?;
        write_snapshot(path, &self.name, &st)
    }

    pub fn snapshot_bytes(&self) -> Result<Vec<u8>> {
        let st = self.read()?;
        Ok(encode_snapshot(&self.name, &st))
    }

    /// Rebuilds a store from a snapshot file. The restored store keeps
    /// persisting to the same path with `policy`.
    pub fn restore(path: impl AsRef<Path>, policy: SnapshotPolicy) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        let (name, state) = decode_snapshot(&bytes)?;
        Ok(Self::from_state(
            name,
            state,
            Some(path.to_path_buf()),
            policy,
        ))
    }

    pub fn restore_bytes(bytes: &[u8]) -> Result<Self> {
        let (name, state) = decode_snapshot(bytes)?;
        Ok(Self::from_state(name, state, None, SnapshotPolicy::Manual))
    }

    fn try_pull(st: &mut State, pilot_queue: &str) -> Result<Option<Pulled>> {
        if !st.queues.contains_key(pilot_queue) || pilot_queue == GLOBAL_QUEUE {
            return Err(Error::lookup("pilot queue", pilot_queue));
        }
        let (id, source) = if let Some(id) = st.queues.get_mut(pilot_queue).unwrap().pop_front() {
            (id, Source::Pilot)
        } else if let Some(id) = st.queues.get_mut(GLOBAL_QUEUE).unwrap().pop_front() {
            (id, Source::Global)
        } else {
            return Ok(None);
        };
        let from = match source {
            Source::Pilot => pilot_queue.to_owned(),
            Source::Global => GLOBAL_QUEUE.to_owned(),
        };
        st.index.remove(&id);
        st.pull_counter += 1;
        st.in_flight.insert(id.clone(), (st.pull_counter, from));
        Ok(Some(Pulled { id, source }))
    }
}

impl CoordinationStore for MemoryStore {
    fn name(&self) -> &str {
        &self.name
    }

    fn create_queue(&self, name: &str) -> Result<()> {
        if name.is_empty() {
            return Err(Error::Argument("queue name is empty".into()));
        }
        if self.read()?.queues.contains_key(name) {
            return Ok(());
        }
        self.mutate(|st| {
            st.queues.entry(name.to_owned()).or_default();
            Ok(())
        })
    }

    fn drop_queue(&self, name: &str) -> Result<Vec<String>> {
        if name == GLOBAL_QUEUE {
            return Err(Error::Argument("the global queue cannot be dropped".into()));
        }
        self.mutate(|st| {
            let left: Vec<String> = st
                .queues
                .remove(name)
                .map(Vec::from)
                .ok_or_else(|| Error::lookup("queue", name))?;
            for id in &left {
                st.index.remove(id);
            }
            Ok(left)
        })
    }

    fn enqueue(&self, queue: &str, id: &str) -> Result<()> {
        self.mutate(|st| {
            if let Some(q) = st.position(id) {
                return Err(Error::Conflict(format!("{id} is already queued on {q}")));
            }
            if st.in_flight.contains_key(id) {
                return Err(Error::Conflict(format!("{id} is in flight")));
            }
            st.queues
                .get_mut(queue)
                .ok_or_else(|| Error::lookup("queue", queue))?
                .push_back(id.to_owned());
            st.index.insert(id.to_owned(), queue.to_owned());
            Ok(())
        })
    }

    fn pull(&self, pilot_queue: &str) -> Result<Option<Pulled>> {
        {
            let st = self.read()?;
            if !st.queues.contains_key(pilot_queue) || pilot_queue == GLOBAL_QUEUE {
                return Err(Error::lookup("pilot queue", pilot_queue));
            }
            if st.queues[pilot_queue].is_empty() && st.queues[GLOBAL_QUEUE].is_empty() {
                return Ok(None);
            }
        }
        self.mutate(|st| Self::try_pull(st, pilot_queue))
    }

    fn pull_timeout(&self, pilot_queue: &str, timeout: Duration) -> Result<Option<Pulled>> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(p) = self.pull(pilot_queue)? {
                return Ok(Some(p));
            }
            let st = self.read()?;
            let now = Instant::now();
            if now >= deadline {
                return Ok(None);
            }
            let idle = st.queues.get(pilot_queue).is_none_or(VecDeque::is_empty)
                && st.queues[GLOBAL_QUEUE].is_empty();
            if idle {
                let _ = self.work.wait_timeout(st, deadline - now).unwrap();
            }
        }
    }

    fn ack(&self, id: &str) -> Result<()> {
        if !self.read()?.in_flight.contains_key(id) {
            return Ok(());
        }
        self.mutate(|st| {
            st.in_flight.remove(id);
            Ok(())
        })
    }

    fn remove(&self, id: &str) -> Result<bool> {
        if self.read()?.position(id).is_none() {
            return Ok(false);
        }
        self.mutate(|st| {
            let Some(name) = st.index.remove(id) else {
                return Ok(false);
            };
            let q = st.queues.get_mut(&name).expect("index mirrors queues");
            let i = q.iter().position(|x| x == id).expect("index mirrors queues");
            q.remove(i);
            Ok(true)
        })
    }

    fn locate(&self, id: &str) -> Result<Option<String>> {
        Ok(self.read()?.position(id).map(str::to_owned))
    }

    fn queue_items(&self, queue: &str) -> Result<Vec<String>> {
        self.read()?
            .queues
            .get(queue)
            .map(|q| q.iter().cloned().collect())
            .ok_or_else(|| Error::lookup("queue", queue))
    }

    fn queue_len(&self, queue: &str) -> Result<usize> {
        self.read()?
            .queues
            .get(queue)
            .map(|q| q.len())
            .ok_or_else(|| Error::lookup("queue", queue))
    }

    fn requeue_in_flight(&self) -> Result<Vec<String>> {
        if self.read()?.in_flight.is_empty() {
            return Ok(Vec::new());
        }
        self.mutate(|st| {
            let mut items: Vec<(u64, String, String)> = std::mem::take(&mut st.in_flight)
                .into_iter()
                .map(|(id, (order, q))| (order, id, q))
                .collect();
            items.sort();
            // push in reverse pull order so the earliest pull ends up at the head
            for (_, id, q) in items.iter().rev() {
                let target = if st.queues.contains_key(q) {
                    q.as_str()
                } else {
                    GLOBAL_QUEUE
                };
                st.queues.get_mut(target).unwrap().push_front(id.clone());
                st.index.insert(id.clone(), target.to_owned());
            }
            Ok(items.into_iter().map(|(_, id, _)| id).collect())
        })
    }

    fn put_state(&self, key: &str, value: Value) -> Result<u64> {
        if key.is_empty() {
            return Err(Error::Argument("key is empty".into()));
        }
        self.mutate(|st| {
            let version = st.kv.get(key).map_or(0, |v| v.version) + 1;
            st.kv.insert(key.to_owned(), Versioned { version, value });
            Ok(version)
        })
    }

    fn get_state(&self, key: &str) -> Result<Versioned> {
        self.read()?
            .kv
            .get(key)
            .cloned()
            .ok_or_else(|| Error::NotFound(key.to_owned()))
    }

    fn compare_and_put(&self, key: &str, expected: Option<u64>, value: Value) -> Result<u64> {
        if key.is_empty() {
            return Err(Error::Argument("key is empty".into()));
        }
        self.mutate(|st| {
            let current = st.kv.get(key).map(|v| v.version);
            if current != expected {
                return Err(Error::Conflict(format!(
                    "{key}: expected version {expected:?}, found {current:?}"
                )));
            }
            let version = current.unwrap_or(0) + 1;
            st.kv.insert(key.to_owned(), Versioned { version, value });
            Ok(version)
        })
    }

    fn keys(&self, prefix: &str) -> Result<Vec<String>> {
        Ok(self
            .read()?
            .kv
            .range(prefix.to_owned()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, _)| k.clone())
            .collect())
    }

    fn next_seq(&self, kind: &str) -> Result<u64> {
        let key = format!("seq/{kind}");
        self.mutate(|st| {
            let next = st
                .kv
                .get(&key)
                .and_then(|v| v.value.as_u64())
                .unwrap_or(0)
                + 1;
            let version = st.kv.get(&key).map_or(0, |v| v.version) + 1;
            st.kv.insert(
                key.clone(),
                Versioned {
                    version,
                    value: Value::from(next),
                },
            );
            Ok(next)
        })
    }
}

fn encode_snapshot(name: &str, st: &State) -> Vec<u8> {
    let mut records = vec![Record::Meta {
        store: name.to_owned(),
        ops: st.ops,
        pulls: st.pull_counter,
    }];
    records.extend(st.kv.iter().map(|(k, v)| Record::Kv {
        key: k.clone(),
        version: v.version,
        value: v.value.clone(),
    }));
    records.extend(st.queues.iter().map(|(n, q)| Record::Queue {
        name: n.clone(),
        items: q.iter().cloned().collect(),
    }));
    records.extend(st.in_flight.iter().map(|(id, (order, q))| Record::Inflight {
        id: id.clone(),
        order: *order,
        queue: q.clone(),
    }));
    let n = records.len() as u64;
    records.push(Record::End { records: n });

    let mut out = SNAPSHOT_MAGIC.as_bytes().to_vec();
    for r in &records {
        let body = serde_json::to_vec(r).expect("records serialize");
        out.extend_from_slice(format!("{}\n", body.len()).as_bytes());
        out.extend_from_slice(&body);
        out.push(b'\n');
    }
    out
}

fn write_snapshot(path: &Path, name: &str, st: &State) -> Result<()> {
    let bytes = encode_snapshot(name, st);
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn decode_snapshot(bytes: &[u8]) -> Result<(String, State)> {
    let corrupt = |offset: usize, reason: &str| Error::Snapshot {
        offset: offset as u64,
        reason: reason.to_owned(),
    };
    if !bytes.starts_with(SNAPSHOT_MAGIC.as_bytes()) {
        return Err(corrupt(0, "missing header"));
    }
    let mut pos = SNAPSHOT_MAGIC.len();
    let mut name = None;
    let mut st = State::default();
    let mut count = 0u64;
    loop {
        if pos >= bytes.len() {
            return Err(corrupt(pos, "truncated: no end record"));
        }
        let nl = bytes[pos..]
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| corrupt(pos, "truncated length prefix"))?;
        let len: usize = std::str::from_utf8(&bytes[pos..pos + nl])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt(pos, "bad length prefix"))?;
        let start = pos + nl + 1;
        let end = start + len;
        if end + 1 > bytes.len() {
            return Err(corrupt(start, "record shorter than its length prefix"));
        }
        if bytes[end] != b'\n' {
            return Err(corrupt(end, "length mismatch"));
        }
        let rec: Record = serde_json::from_slice(&bytes[start..end])
            .map_err(|e| corrupt(start, &format!("bad record: {e}")))?;
        pos = end + 1;
        match rec {
            Record::Meta { store, ops, pulls } => {
                name = Some(store);
                st.ops = ops;
                st.pull_counter = pulls;
            }
            Record::Kv {
                key,
                version,
                value,
            } => {
                st.kv.insert(key, Versioned { version, value });
            }
            Record::Queue { name, items } => {
                st.queues.insert(name, items.into());
            }
            Record::Inflight { id, order, queue } => {
                st.in_flight.insert(id, (order, queue));
            }
            Record::End { records } => {
                if records != count {
                    return Err(corrupt(start, "record count mismatch"));
                }
                if pos != bytes.len() {
                    return Err(corrupt(pos, "trailing bytes after end record"));
                }
                break;
            }
        }
        count += 1;
    }
    let name = name.ok_or_else(|| corrupt(SNAPSHOT_MAGIC.len(), "missing meta record"))?;
    st.queues.entry(GLOBAL_QUEUE.to_owned()).or_default();
    st.rebuild_index();
    Ok((name, st))
}

/// Live view of one unit or pilot, obtained by address.
#[derive(Clone)]
pub struct Handle {
    store: Arc<dyn CoordinationStore>,
    id: ResourceId,
}

impl std::fmt::Debug for Handle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Handle").field("id", &self.id).finish()
    }
}

/// Reattaches to a unit or pilot by its address.
pub fn reconnect(store: &Arc<dyn CoordinationStore>, id: &ResourceId) -> Result<Handle> {
    store
        .get_state(&id.record_key())
        .map_err(|_| Error::NotFound(id.to_string()))?;
    Ok(Handle {
        store: Arc::clone(store),
        id: id.clone(),
    })
}

impl Handle {
    pub fn id(&self) -> &ResourceId {
        &self.id
    }

    pub fn record(&self) -> Result<Value> {
        Ok(self.store.get_state(&self.id.record_key())?.value)
    }

    /// The `state` field of the current record.
    pub fn state(&self) -> Result<String> {
        self.record()?
            .get("state")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| Error::Integrity(format!("{} record has no state", self.id)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn store_with(pilots: &[&str]) -> MemoryStore {
        let s = MemoryStore::new("t");
        for p in pilots {
            s.create_queue(p).unwrap();
        }
        s
    }

    #[test]
    fn fifo_and_conflict() {
        let s = store_with(&["A"]);
        s.enqueue(GLOBAL_QUEUE, "cu-1").unwrap();
        assert!(matches!(
            s.enqueue(GLOBAL_QUEUE, "cu-1"),
            Err(Error::Conflict(_))
        ));
        assert!(matches!(s.enqueue("A", "cu-1"), Err(Error::Conflict(_))));
        let p = s.pull("A").unwrap().unwrap();
        assert_eq!(p.id, "cu-1");
        assert_eq!(p.source, Source::Global);
        // still in flight until acked
        assert!(matches!(s.enqueue("A", "cu-1"), Err(Error::Conflict(_))));
        s.ack("cu-1").unwrap();
        s.enqueue("A", "cu-1").unwrap();
    }

    #[test]
    fn queue_isolation_and_priority() {
        let s = store_with(&["A", "B"]);
        s.enqueue("A", "cu-2").unwrap();
        assert_eq!(s.pull("B").unwrap(), None);

        s.enqueue(GLOBAL_QUEUE, "cu-B").unwrap();
        let p = s.pull("A").unwrap().unwrap();
        assert_eq!((p.id.as_str(), p.source), ("cu-2", Source::Pilot));
        let p = s.pull("A").unwrap().unwrap();
        assert_eq!((p.id.as_str(), p.source), ("cu-B", Source::Global));
        assert_eq!(s.pull("A").unwrap(), None);
        assert!(matches!(s.pull("nope"), Err(Error::Lookup { .. })));
        assert!(s.pull(GLOBAL_QUEUE).is_err());
    }

    /// Every combination of (pilot queue empty?, global queue empty?).
    #[test]
    fn pull_priority_enumeration() {
        for pilot_has in [false, true] {
            for global_has in [false, true] {
                let s = store_with(&["A"]);
                if pilot_has {
                    s.enqueue("A", "p").unwrap();
                }
                if global_has {
                    s.enqueue(GLOBAL_QUEUE, "g").unwrap();
                }
                let got = s.pull("A").unwrap().map(|p| p.id);
                let want = match (pilot_has, global_has) {
                    (true, _) => Some("p"),
                    (false, true) => Some("g"),
                    (false, false) => None,
                };
                assert_eq!(got.as_deref(), want);
            }
        }
    }

    #[test]
    fn kv_versions() {
        let s = MemoryStore::new("t");
        assert_eq!(s.put_state("cu/1/state", json!("RUNNING")).unwrap(), 1);
        assert_eq!(s.get_state("cu/1/state").unwrap().value, json!("RUNNING"));
        assert_eq!(s.put_state("cu/1/state", json!("DONE")).unwrap(), 2);
        let v = s.get_state("cu/1/state").unwrap();
        assert_eq!((v.version, v.value), (2, json!("DONE")));
        assert!(matches!(s.get_state("nope"), Err(Error::NotFound(_))));
        assert!(s.put_state("", json!(1)).is_err());

        assert!(s.compare_and_put("k", Some(1), json!(1)).is_err());
        assert_eq!(s.compare_and_put("k", None, json!(1)).unwrap(), 1);
        assert!(s.compare_and_put("k", None, json!(2)).is_err());
        assert_eq!(s.compare_and_put("k", Some(1), json!(2)).unwrap(), 2);
        assert_eq!(s.keys("cu/").unwrap(), vec!["cu/1/state".to_owned()]);
        assert_eq!(s.next_seq("cu").unwrap(), 1);
        assert_eq!(s.next_seq("cu").unwrap(), 2);
    }

    #[test]
    fn snapshot_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.snap");
        let s = MemoryStore::persistent("t", &path, SnapshotPolicy::Manual);
        s.snapshot().unwrap();
        let r = MemoryStore::restore(&path, SnapshotPolicy::Manual).unwrap();
        assert_eq!(r.queue_items(GLOBAL_QUEUE).unwrap(), Vec::<String>::new());
        assert!(r.keys("").unwrap().is_empty());

        s.create_queue("A").unwrap();
        for id in ["c1", "c2", "c3"] {
            s.enqueue(GLOBAL_QUEUE, id).unwrap();
        }
        s.put_state("x", json!({"a": 1})).unwrap();
        s.pull("A").unwrap();
        s.snapshot().unwrap();
        let r = MemoryStore::restore(&path, SnapshotPolicy::Manual).unwrap();
        assert_eq!(r.queue_items(GLOBAL_QUEUE).unwrap(), vec!["c2", "c3"]);
        assert_eq!(r.snapshot_bytes().unwrap(), s.snapshot_bytes().unwrap());
        assert_eq!(r.requeue_in_flight().unwrap(), vec!["c1"]);
        assert_eq!(r.queue_items(GLOBAL_QUEUE).unwrap(), vec!["c1", "c2", "c3"]);
    }

    #[test]
    fn truncated_snapshot_is_detected() {
        let s = MemoryStore::new("t");
        for i in 0..3 {
            s.enqueue(GLOBAL_QUEUE, &format!("c{i}")).unwrap();
        }
        let bytes = s.snapshot_bytes().unwrap();
        for cut in [0, 5, bytes.len() / 2, bytes.len() - 1] {
            let err = MemoryStore::restore_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Snapshot { .. }), "cut {cut}: {err}");
        }
        let mut flipped = bytes.clone();
        let i = bytes.len() / 2;
        flipped[i] = b'#';
        assert!(MemoryStore::restore_bytes(&flipped).is_err());
    }

    #[test]
    fn write_through_persists_every_op() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.snap");
        let s = MemoryStore::persistent("t", &path, SnapshotPolicy::WriteThrough);
        s.enqueue(GLOBAL_QUEUE, "a").unwrap();
        s.put_state("k", json!(1)).unwrap();
        let r = MemoryStore::restore(&path, SnapshotPolicy::Manual).unwrap();
        assert_eq!(r.snapshot_bytes().unwrap(), s.snapshot_bytes().unwrap());
    }

    #[test]
    fn crash_injection_stops_all_ops() {
        let s = MemoryStore::new("t");
        s.crash_after(2);
        s.put_state("a", json!(1)).unwrap();
        s.put_state("b", json!(1)).unwrap();
        assert!(matches!(s.put_state("c", json!(1)), Err(Error::Crashed)));
        assert!(matches!(s.get_state("a"), Err(Error::Crashed)));
        assert!(s.is_crashed());
    }

    #[test]
    fn reconnect_handles() {
        let store = MemoryStore::new("t").into_shared();
        let id = ResourceId::parse("ps://t/cu/7").unwrap();
        assert!(matches!(reconnect(&store, &id), Err(Error::NotFound(_))));
        store
            .put_state(&id.record_key(), json!({"state": "RUNNING"}))
            .unwrap();
        let h = reconnect(&store, &id).unwrap();
        assert_eq!(h.state().unwrap(), "RUNNING");
        store
            .put_state(&id.record_key(), json!({"state": "DONE"}))
            .unwrap();
        assert_eq!(h.state().unwrap(), "DONE");
    }

    #[test]
    fn blocking_pull_wakes_on_enqueue() {
        let s = Arc::new(store_with(&["A"]));
        let s2 = Arc::clone(&s);
        let t = std::thread::spawn(move || s2.pull_timeout("A", Duration::from_secs(5)));
        std::thread::sleep(Duration::from_millis(20));
        s.enqueue(GLOBAL_QUEUE, "x").unwrap();
        let got = t.join().unwrap().unwrap().unwrap();
        assert_eq!(got.id, "x");
        assert_eq!(
            s.pull_timeout("A", Duration::from_millis(10)).unwrap(),
            None
        );
    }
}
