//! Scalability building blocks for data- and model-parallel training on 2D
//! mesh/torus accelerator fabrics.
//!
//! The crate is organized by subsystem:
//!
//! - [`topology`]: multipod meshes, link classes, sparse-routing visibility,
//!   rings and model-parallel tiles.
//! - [`collectives`]: numerically executed ring reduce-scatter / all-gather,
//!   the hierarchical Y-then-X all-reduce with a weight-update hook, and the
//!   schedules those collectives emit.
//! - [`netsim`]: an alpha-beta cost simulator for schedules plus the
//!   compute/communication step breakdown model.
//! - [`sharding`]: weight-update sharding (distributed optimizer) and
//!   embedding table placement.
//! - [`partitioner`]: SPMD kernels (halo-exchange convolution, sharded
//!   matmul, resharding, one-hot gather, distributed batch norm and top-k).
//! - [`metrics`]: padded distributed evaluation and exact AUC.
//! - [`infeed`]: file sharding and shuffle-policy simulation.

pub mod collectives;
pub mod error;
pub mod infeed;
pub mod metrics;
pub mod netsim;
pub mod partitioner;
pub mod sharding;
pub mod topology;

pub use error::{Error, Result};
