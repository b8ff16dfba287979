//! Joint query routing and heterogeneous GPU deployment planning for
//! multi-model LLM serving.

pub mod cluster;
pub mod candidates;
pub mod error;
pub mod optimizer;
pub mod perfdb;
pub mod plan;
pub mod simulator;
pub mod surrogate;
pub mod workload;

pub use cluster::{CalibrationCoeffs, Cents, ClusterSpec, GpuSpec, ModelSpec};
pub use error::{Error, Result};
pub use perfdb::{LoadGrid, PerfDb, PerfRecord};
pub use simulator::{Infeasibility, Replica, ReplicaConfig, SimOptions, SimResult};
pub use workload::{LoadFractions, Query, RoutingConfig, Trace};
