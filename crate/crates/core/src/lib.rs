//! Distributed Dirichlet process mixture estimation.
//!
//! Workers run collapsed Gibbs sweeps over their shard against a possibly
//! stale copy of the global components and send sufficient-statistic deltas
//! to a master, which identifies duplicate components across workers with
//! merge-split odds computed from sufficient statistics alone.

pub mod consolidation;
pub mod data;
pub mod expfam;
pub mod metrics;
pub mod rng;
pub mod runtime;
pub mod sampler;
