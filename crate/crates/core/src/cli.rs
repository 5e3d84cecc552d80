//! Command-line front end.
//!
//! `serve` hosts a service in a store directory and answers JSON-lines
//! requests on `<store>/store.sock`. Every other subcommand is a one-shot
//! process. Exit codes: 0 success, 2 validation problems, 1 anything else.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::coordination::{MemoryStore, SnapshotPolicy};
use crate::error::{Error, Result};
use crate::harness::{self, RunMetrics, Scenario};
use crate::pilots::{PilotComputeDescription, PilotDataDescription};
use crate::scheduler::{Policy, SchedulerConfig};
use crate::service::{ComputeDataService, ServiceConfig};
use crate::topology::{TopologyConfig, TopologyTree};
use crate::units::{ComputeUnitDescription, DataUnitDescription, ResourceId};

pub const SOCKET_NAME: &str = "store.sock";
pub const SNAPSHOT_NAME: &str = "store.snap";
pub const LOCK_NAME: &str = "LOCK";
pub const STORE_NAME: &str = "pilotdata";
pub const TOPOLOGY_NAME: &str = "topology.json";

#[derive(Debug, Parser)]
#[command(name = "pilotdata", version, about = "Pilot-Compute / Pilot-Data workload manager")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Host a coordination store and service until asked to shut down.
    Serve {
        #[arg(long, env = "PS_STORE")]
        store_path: PathBuf,
        /// Snapshot after this many mutations (1 = every mutation).
        #[arg(long, default_value_t = 1)]
        snapshot_every: u64,
        /// Topology labels as a JSON file (`{"labels": [...]}`).
        #[arg(long)]
        topology: Option<PathBuf>,
    },
    /// Submit a Compute-Unit or Data-Unit description; prints its id.
    Submit {
        #[arg(long = "type", value_enum)]
        kind: UnitType,
        #[arg(long)]
        file: PathBuf,
        #[arg(long, env = "PS_STORE")]
        store_path: PathBuf,
    },
    /// Run a scenario and write metrics into `--out`.
    RunScenario {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a scenario under two policies and print the delta.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        /// AFFINITY_AWARE, AFFINITY_BLIND_ROUNDROBIN or RANDOM:<seed>.
        #[arg(long)]
        policy_a: String,
        #[arg(long)]
        policy_b: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the metrics of an earlier run.
    Report {
        /// Directory written by `run-scenario`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Destination file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a scenario without running it.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum UnitType {
    Cu,
    Du,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Jsonl,
}

/// Parses the arguments of this process and runs the command; returns the
/// exit code.
pub fn main() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            report_error(&e);
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        2
    } else {
        1
    }
}

fn report_error(e: &Error) {
    match e {
        Error::Validation(items) => {
            eprintln!("validation failed:");
            for i in items {
                eprintln!("  - {i}");
            }
        }
        other => eprintln!("error: {other}"),
    }
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Serve {
            store_path,
            snapshot_every,
            topology,
        } => {
            if let Some(t) = topology {
                let cfg: TopologyConfig = serde_json::from_str(&std::fs::read_to_string(t)?)?;
                cfg.build()?;
                std::fs::create_dir_all(&store_path)?;
                std::fs::write(store_path.join(TOPOLOGY_NAME), serde_json::to_string_pretty(&cfg)?)?;
            }
            let server = Server::open(&store_path, snapshot_every)?;
            eprintln!("serving {}", server.socket_path().display());
            server.serve()
        }
        Command::Submit {
            kind,
            file,
            store_path,
        } => {
            let text = std::fs::read_to_string(&file)?;
            let req = submit_request(kind, &text)?;
            let resp = match UnixStream::connect(store_path.join(SOCKET_NAME)) {
                Ok(stream) => request(stream, &req)?,
                Err(_) => {
                    let server = Server::open(&store_path, 1)?;
                    let resp = server.handle(&req);
                    server.close()?;
                    resp
                }
            };
            let id = response_result(resp)?;
            println!("{}", id.as_str().unwrap_or_default());
            Ok(())
        }
        Command::RunScenario {
            scenario,
            out,
            seed,
        } => {
            let mut s = Scenario::load(&scenario)?;
            if let Some(k) = seed {
                s.seed = k;
            }
            let m = harness::run_scenario(&s)?;
            write_run(&out, &m)?;
            print!("{}", m.summary());
            Ok(())
        }
        Command::Compare {
            scenario,
            policy_a,
            policy_b,
            seed,
            out,
        } => {
            let mut s = Scenario::load(&scenario)?;
            if let Some(k) = seed {
                s.seed = k;
            }
            let a = SchedulerConfig {
                policy: parse_policy(&policy_a)?,
                ..s.scheduler.clone()
            };
            let b = SchedulerConfig {
                policy: parse_policy(&policy_b)?,
                ..s.scheduler.clone()
            };
            let (ma, mb, c) = harness::compare_policies(&s, &a, &b)?;
            if let Some(dir) = out {
                write_run(&dir.join("a"), &ma)?;
                write_run(&dir.join("b"), &mb)?;
                std::fs::write(dir.join("comparison.json"), serde_json::to_string_pretty(&c)?)?;
            }
            print!("{}", c.render());
            Ok(())
        }
        Command::Report { run, format, out } => {
            let m = RunMetrics::from_jsonl(&std::fs::read_to_string(run.join("metrics.jsonl"))?)?;
            let text = match format {
                Format::Csv => m.to_csv(),
                Format::Jsonl => m.to_jsonl()?,
            };
            match out {
                Some(p) => std::fs::write(p, text)?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::Validate { scenario } => {
            let s = Scenario::load(&scenario)?;
            let problems = s.validate();
            if problems.is_empty() {
                println!("ok");
                Ok(())
            } else {
                Err(Error::Validation(problems))
            }
        }
    }
}

/// `AFFINITY_AWARE`, `AFFINITY_BLIND_ROUNDROBIN`, `RANDOM:<seed>` or the JSON
/// form of a policy.
pub fn parse_policy(s: &str) -> Result<Policy> {
    match s {
        "AFFINITY_AWARE" => Ok(Policy::AffinityAware),
        "AFFINITY_BLIND_ROUNDROBIN" => Ok(Policy::AffinityBlindRoundrobin),
        _ => {
            if let Some(seed) = s.strip_prefix("RANDOM:") {
                let seed = seed
                    .parse()
                    .map_err(|_| Error::validation(format!("bad RANDOM seed in {s:?}")))?;
                return Ok(Policy::Random { seed });
            }
            serde_json::from_str(s).map_err(|_| Error::validation(format!("unknown policy {s:?}")))
        }
    }
}

fn load_topology(dir: &Path) -> Result<TopologyTree> {
    let p = dir.join(TOPOLOGY_NAME);
    if !p.exists() {
        return Ok(TopologyTree::new());
    }
    let cfg: TopologyConfig = serde_json::from_str(&std::fs::read_to_string(p)?)?;
    cfg.build()
}

/// Writes `metrics.csv`, `metrics.jsonl` and `decisions.csv` into `dir`.
pub fn write_run(dir: &Path, m: &RunMetrics) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.csv"), m.to_csv())?;
    std::fs::write(dir.join("metrics.jsonl"), m.to_jsonl()?)?;
    std::fs::write(dir.join("decisions.csv"), m.decisions_csv())?;
    Ok(())
}

fn submit_request(kind: UnitType, text: &str) -> Result<Value> {
    let schema = |e: serde_json::Error| Error::validation(format!("description does not parse: {e}"));
    match kind {
        UnitType::Cu => {
            let d: ComputeUnitDescription = serde_json::from_str(text).map_err(schema)?;
            let problems = d.validate(|_| true);
            if !problems.is_empty() {
                return Err(Error::Validation(problems));
            }
            Ok(json!({"op": "submit_cu", "description": d}))
        }
        UnitType::Du => {
            let d: DataUnitDescription = serde_json::from_str(text).map_err(schema)?;
            let problems = d.validate();
            if !problems.is_empty() {
                return Err(Error::Validation(problems));
            }
            Ok(json!({"op": "submit_du", "description": d}))
        }
    }
}

/// One request over an open connection.
pub fn request(stream: UnixStream, req: &Value) -> Result<Value> {
    let mut w = stream.try_clone()?;
    writeln!(w, "{req}")?;
    w.flush()?;
    let mut line = String::new();
    BufReader::new(stream).read_line(&mut line)?;
    if line.is_empty() {
        return Err(Error::Storage("server closed the connection".into()));
    }
    Ok(serde_json::from_str(&line)?)
}

/// Turns a server response back into a result.
pub fn response_result(resp: Value) -> Result<Value> {
    let r: Response = serde_json::from_value(resp)?;
    if r.ok {
        return Ok(r.result.unwrap_or(Value::Null));
    }
    let errors = r.errors.unwrap_or_default();
    match r.kind.as_deref() {
        Some("validation") => Err(Error::Validation(errors)),
        _ => Err(Error::Storage(errors.join("; "))),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Response {
    ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    errors: Option<Vec<String>>,
}

fn ok(result: Value) -> Value {
    serde_json::to_value(Response {
        ok: true,
        result: Some(result),
        kind: None,
        errors: None,
    })
    .expect("serializable")
}

fn err(e: &Error) -> Value {
    let (kind, errors) = match e {
        Error::Validation(items) => ("validation", items.clone()),
        other if other.is_validation() => ("validation", vec![other.to_string()]),
        other => ("error", vec![other.to_string()]),
    };
    serde_json::to_value(Response {
        ok: false,
        result: None,
        kind: Some(kind.into()),
        errors: Some(errors),
    })
    .expect("serializable")
}

#[derive(Debug, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Request {
    Ping,
    SubmitCu { description: ComputeUnitDescription },
    SubmitDu { description: DataUnitDescription },
    CreatePilotCompute { description: PilotComputeDescription },
    CreatePilotData { description: PilotDataDescription },
    Get { id: String },
    Cancel { id: String },
    Queues,
    Snapshot,
    Shutdown,
}

/// A service bound to a store directory. Holding a `Server` holds the
/// directory's lock.
pub struct Server {
    dir: PathBuf,
    store: Arc<MemoryStore>,
    svc: Arc<ComputeDataService>,
    _lock: File,
    stop: AtomicBool,
}

impl Server {
    /// Locks `dir`, restores its snapshot if there is one and rebuilds the
    /// service from it.
    pub fn open(dir: &Path, snapshot_every: u64) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(dir.join(LOCK_NAME))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(std::fs::TryLockError::WouldBlock) => {
                return Err(Error::Conflict(format!(
                    "{} is locked by another process",
                    dir.display()
                )))
            }
            Err(std::fs::TryLockError::Error(e)) => return Err(e.into()),
        }
        let policy = match snapshot_every {
            0 => SnapshotPolicy::Manual,
            1 => SnapshotPolicy::WriteThrough,
            n => SnapshotPolicy::Every(n),
        };
        let snap = dir.join(SNAPSHOT_NAME);
        let store = if snap.exists() {
            MemoryStore::restore(&snap, policy)?
        } else {
            MemoryStore::persistent(STORE_NAME, &snap, policy)
        };
        let store = Arc::new(store);
        let topology = load_topology(dir)?;
        let svc = ComputeDataService::recover(
            ComputeDataService::builder(topology)
                .store(store.clone())
                .config(ServiceConfig::default()),
        )?;
        Ok(Server {
            dir: dir.to_path_buf(),
            store,
            svc,
            _lock: lock,
            stop: AtomicBool::new(false),
        })
    }

    pub fn service(&self) -> &Arc<ComputeDataService> {
        &self.svc
    }

    pub fn socket_path(&self) -> PathBuf {
        self.dir.join(SOCKET_NAME)
    }

    /// Answers one request.
    pub fn handle(&self, req: &Value) -> Value {
        let parsed: Request = match serde_json::from_value(req.clone()) {
            Ok(r) => r,
            Err(e) => return err(&Error::validation(format!("bad request: {e}"))),
        };
        match self.dispatch(parsed) {
            Ok(v) => ok(v),
            Err(e) => err(&e),
        }
    }

    fn dispatch(&self, req: Request) -> Result<Value> {
        let svc = &self.svc;
        Ok(match req {
            Request::Ping => json!("pong"),
            Request::SubmitCu { description } => json!(svc.submit(description)?.id),
            Request::SubmitDu { description } => json!(svc.submit_du(&description)?.id),
            Request::CreatePilotCompute { description } => {
                json!(svc.create_pilot_compute(description)?.id)
            }
            Request::CreatePilotData { description } => {
                json!(svc.create_pilot_data(description)?.id)
            }
            Request::Get { id } => {
                let id = ResourceId::parse(&id)?;
                svc.store().get_state(&id.record_key())?.value
            }
            Request::Cancel { id } => json!(format!("{:?}", svc.cancel(&ResourceId::parse(&id)?)?)),
            Request::Queues => svc.queue_snapshot()?,
            Request::Snapshot => json!(self.store.snapshot()?),
            Request::Shutdown => {
                self.stop.store(true, Ordering::SeqCst);
                json!("stopping")
            }
        })
    }

    /// Accepts connections until a `shutdown` request arrives.
    pub fn serve(self) -> Result<()> {
        let path = self.socket_path();
        if path.exists() {
            std::fs::remove_file(&path)?;
        }
        let listener = UnixListener::bind(&path)?;
        let me = Arc::new(self);
        for conn in listener.incoming() {
            if me.stop.load(Ordering::SeqCst) {
                break;
            }
            match conn {
                Ok(stream) => {
                    let server = me.clone();
                    std::thread::spawn(move || server.connection(stream));
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
        let _ = std::fs::remove_file(&path);
        me.close()
    }

    fn connection(&self, stream: UnixStream) {
        let mut w = match stream.try_clone() {
            Ok(w) => w,
            Err(_) => return,
        };
        for line in BufReader::new(stream).lines() {
            let Ok(line) = line else { break };
            if line.trim().is_empty() {
                continue;
            }
            let resp = match serde_json::from_str::<Value>(&line) {
                Ok(req) => self.handle(&req),
                Err(e) => err(&Error::validation(format!("bad request: {e}"))),
            };
            if writeln!(w, "{resp}").and_then(|_| w.flush()).is_err() {
                break;
            }
            if self.stop.load(Ordering::SeqCst) {
                // wake the accept loop so it sees the flag
                let _ = UnixStream::connect(self.socket_path());
                break;
            }
        }
    }

    /// Stops pilots and writes a final snapshot. The lock is released when
    /// the server is dropped.
    pub fn close(&self) -> Result<()> {
        self.svc.shutdown()?;
        self.store.snapshot()?;
        Ok(())
    }
}
