//! Edge access-control and safety-monitoring node with a cloud uplink,
//! plus a deterministic simulator for measuring it.

pub mod auth;
pub mod codec;
pub mod domain;
pub mod metrics;
pub mod safety;
pub mod sim;
pub mod sink;
pub mod sync;
