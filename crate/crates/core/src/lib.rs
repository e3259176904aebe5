//! Context-aware security and privacy service for IoT deployments.
//!
//! Reports flow `ingestion → qoc → reasoning → dissemination → policy →
//! mechanisms`, with device identity and audit state kept in [`trust`].
//! [`harness`] wires the pipeline together for scenarios and the service API.

pub mod crypto;
pub mod dissemination;
pub mod harness;
pub mod ingestion;
pub mod mechanisms;
pub mod policy;
pub mod predicate;
pub mod qoc;
pub mod reasoning;
pub mod trust;

/// Milliseconds since the Unix epoch.
pub type Millis = i64;
