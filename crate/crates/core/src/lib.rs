//! Granule-based intermediate data store with data-driven task scheduling,
//! plus a discrete-event simulator comparing it against a compute-centric
//! baseline.

pub mod datastore;
pub mod execution;
pub mod ilp;
pub mod model;
pub mod sim;
pub mod triggers;

pub use model::*;
