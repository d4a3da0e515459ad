//! Planner and desk-scale simulator for hierarchical split federated learning.
//!
//! The crate models a network split into contiguous per-tier slices hosted on
//! a hierarchy of computing entities. It provides the per-round latency model,
//! the convergence bound and its round count, solvers for the aggregation
//! intervals and the cut layers, their block coordinate descent combination,
//! and a small split trainer used to check the analysis empirically.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bcd;
pub mod convergence;
pub mod error;
pub mod latency;
pub mod ma;
pub mod ms;
pub mod plan;
pub mod profile;
pub mod scenario;
pub mod topology;
pub mod train;

pub use bcd::{BcdOptions, BcdTrace};
pub use convergence::{ConvergenceParams, ObjectiveConstants};
pub use error::{HsflError, Result};
pub use ma::{MaOptions, MaSolution};
pub use ms::{MsMethod, MsSolution};
pub use plan::{AggSchedule, CutVector, Plan};
pub use profile::{ByteKind, LayerProfile, ModelProfile};
pub use topology::{Entity, Tier, Topology};
