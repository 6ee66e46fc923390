//! Streams per-timestep simulation fields to endpoint servers and analyzes
//! them with Dynamic Mode Decomposition in a micro-batching engine.
//!
//! Layout:
//! - [`model`]: stream keys, endpoints, rank-to-group assignment
//! - [`wire`]: framed binary protocol shared by every network peer
//! - [`broker`]: simulation-side client with a bounded async send queue
//! - [`endpoint`]: in-memory stream store and its TCP server
//! - [`engine`]: trigger-driven micro-batch puller and partition dispatcher
//! - [`dmd`]: exact DMD, the unit-circle stability metric, snapshot windows
//! - [`sim`]: synthetic generator standing in for the MPI simulation
//! - [`bench`]: workflow orchestration, metrics and reports

pub mod bench;
pub mod broker;
pub mod clock;
pub mod dmd;
pub mod endpoint;
pub mod engine;
pub mod model;
pub mod sim;
pub mod wire;
