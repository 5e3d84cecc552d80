//! Pilot-Data: placement and execution of compute and data units on pilot
//! resources, with affinity-aware scheduling over a logical topology.

pub mod agent;
pub mod cli;
pub mod coordination;
pub mod error;
pub mod harness;
pub mod pilots;
pub mod placement;
pub mod scheduler;
pub mod service;
pub mod sim;
pub mod topology;
pub mod units;

pub use agent::{Completion, StagingMode};
pub use coordination::{CoordinationStore, MemoryStore, SnapshotPolicy, GLOBAL_QUEUE};
pub use error::{Error, Result};
pub use pilots::{
    BandwidthConfig, BandwidthMatrix, PilotCompute, PilotComputeDescription, PilotData,
    PilotDataDescription, PilotState, QueueModel, ReplicationMode, ReplicationReport,
    StagingReport,
};
pub use placement::{decide, estimate, plan_replication, CostEstimate, PlacementMode};
pub use scheduler::{CancelOutcome, Policy, PlacementDecision, Reason, SchedulerConfig};
pub use service::{ComputeDataService, ServiceBuilder, ServiceConfig};
pub use sim::SimEngine;
pub use topology::{AffinityLabel, TopologyTree};
pub use units::{
    ComputeUnit, ComputeUnitDescription, CuState, DataUnit, DataUnitDescription, DuState,
    ResourceId,
};
