//! Simulation harness: devices, authenticated channels with fault
//! injection, protocol runners, scenarios and state files.

pub mod channel;
pub mod device;
pub mod isolation;
pub mod log;
pub mod owner;
pub mod persist;
pub mod runner;
pub mod samples;
pub mod scenario;

pub use channel::{
    Channel, Delivery, Fault, FaultKind, FaultPlan, FaultTarget, Side, TransportKind,
};
pub use device::{manufacturer, DeviceSummary, SimDevice, DEFAULT_MANUFACTURER};
pub use log::{EventLog, LogEntry};
pub use owner::OwnerSpec;
pub use runner::{
    run_migration, run_take_ownership, run_take_ownership_with, srk_holders, MigrationOutcome,
    MigrationRun,
};
pub use scenario::{run_scenario, Scenario, ScenarioError, ScenarioReport};

pub(crate) fn hex_digest<S: serde::Serializer>(
    d: &mtm_core::crypto::Digest,
    s: S,
) -> Result<S::Ok, S::Error> {
    s.serialize_str(&d.to_hex())
}
