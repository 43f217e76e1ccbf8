//! Master-side identification and merging of components.
//!
//! The master keeps a [`GlobalPool`] of components. Each component is a union
//! of *atoms*: sample sets that the workers can still address by id (either a
//! component published in an earlier snapshot or a component created locally
//! by a worker). Merge and split moves rearrange atoms between components;
//! publishing a new version collapses every component back to a single atom.

mod pool;
mod pooled;
mod progressive;

pub use pool::{GlobalPool, RemapRecord, RemapTarget, TempAssignment};
pub use pooled::{
    pooled_consolidate, propose_merge, propose_split, restricted_consolidate, restricted_split_log_prob,
    single_component_log_prob, MergeProposal, MoveKind, MoveOutcome, MoveStats, PooledConsolidator, RestrictedOutcome,
    SplitProposal,
};
pub use progressive::{absorb_delta, progressive_consolidate};

use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::expfam::{FamilyError, FamilySpec, PosteriorParams, SuffStats};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConsolidationError {
    #[error(transparent)]
    Family(#[from] FamilyError),
    #[error("component with no members")]
    EmptyComponent,
    #[error("at least two subcomponents are required, got {0}")]
    TooFewSubcomponents(usize),
    #[error("component id {0} cannot be resolved")]
    UnknownId(u64),
    #[error("component {id} would reach negative count {count}")]
    NegativeCount { id: u64, count: i64 },
    #[error("delta entry for component {id} is inconsistent: {reason}")]
    CorruptDelta { id: u64, reason: String },
}

/// An indivisible sample set inside a component.
#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub id: u64,
    pub stats: SuffStats,
}

/// A global cluster: the sum of its atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub id: u64,
    stats: SuffStats,
    /// Sorted by ascending atom id.
    subcomponents: Vec<Atom>,
    revision: u64,
}

impl Component {
    pub(crate) fn from_atoms(id: u64, mut atoms: Vec<Atom>, revision: u64) -> Self {
        assert!(!atoms.is_empty());
        atoms.sort_by_key(|a| a.id);
        let mut stats = atoms[0].stats.clone();
        for a in &atoms[1..] {
            stats
                .accumulate_in_place(&a.stats, 1)
                .expect("atoms share the pool dimension");
        }
        Component {
            id,
            stats,
            subcomponents: atoms,
            revision,
        }
    }

    pub fn stats(&self) -> &SuffStats {
        &self.stats
    }

    pub fn count(&self) -> i64 {
        self.stats.count
    }

    pub fn subcomponents(&self) -> &[Atom] {
        &self.subcomponents
    }

    pub fn is_atomic(&self) -> bool {
        self.subcomponents.len() == 1
    }

    pub fn params(&self, spec: &FamilySpec) -> PosteriorParams {
        spec.posterior_params(&self.stats)
            .expect("component stats match the pool dimension")
    }

    pub(crate) fn revision(&self) -> u64 {
        self.revision
    }

    /// Largest deviation between the component's stats and the sum of its
    /// atoms, relative to the magnitude of the stats.
    pub fn closure_error(&self) -> f64 {
        let mut sum = SuffStats::zero(self.stats.dim());
        for a in &self.subcomponents {
            sum.accumulate_in_place(&a.stats, 1).expect("same dimension");
        }
        if sum.count != self.stats.count {
            return f64::INFINITY;
        }
        self.stats
            .psi
            .iter()
            .zip(&sum.psi)
            .map(|(a, b)| (a - b).abs() / (1.0 + a.abs()))
            .fold(0.0, f64::max)
    }
}

/// `ln rho(a, b)`: log posterior odds that `a` and `b` come from one
/// component rather than two. Needs only sufficient statistics.
pub fn log_merge_split_ratio_stats(a: &SuffStats, b: &SuffStats, spec: &FamilySpec) -> Result<f64, ConsolidationError> {
    if a.count < 1 || b.count < 1 {
        return Err(ConsolidationError::EmptyComponent);
    }
    if a.dim() != spec.dim || b.dim() != spec.dim {
        return Err(FamilyError::DimensionMismatch {
            expected: spec.dim,
            got: if a.dim() != spec.dim { a.dim() } else { b.dim() },
        }
        .into());
    }
    Ok(log_rho_unchecked(a, b, spec))
}

pub fn log_merge_split_ratio(a: &Component, b: &Component, spec: &FamilySpec) -> Result<f64, ConsolidationError> {
    log_merge_split_ratio_stats(&a.stats, &b.stats, spec)
}

pub(crate) fn log_rho_unchecked(a: &SuffStats, b: &SuffStats, spec: &FamilySpec) -> f64 {
    let merged = a.accumulate(b, 1).expect("same dimension");
    let (na, nb) = (a.count as f64, b.count as f64);
    let prior = spec.log_partition_of_stats(&SuffStats::zero(spec.dim));
    -spec.alpha.ln() + ln_gamma(na + nb) - ln_gamma(na) - ln_gamma(nb) + spec.log_partition_of_stats(&merged) + prior
        - spec.log_partition_of_stats(a)
        - spec.log_partition_of_stats(b)
}
