use rand::Rng;

use super::{log_rho_unchecked, ConsolidationError, GlobalPool, TempAssignment};
use crate::expfam::FamilySpec;
use crate::rng::sample_log_weights;
use crate::sampler::Delta;

/// Adds a delta's existing-component entries and appends each of its new
/// components as a separate atomic component.
pub fn absorb_delta(
    pool: &mut GlobalPool,
    delta: &Delta,
    spec: &FamilySpec,
) -> Result<Vec<TempAssignment>, ConsolidationError> {
    for entry in &delta.entries {
        pool.apply_entry(spec, entry)?;
    }
    let mut placed = Vec::with_capacity(delta.new_components.len());
    for new in &delta.new_components {
        check_new(new.stats.count, new.temp_id)?;
        let atom = pool.insert_atomic(new.stats.clone());
        placed.push(TempAssignment {
            worker: delta.worker,
            temp_id: new.temp_id,
            atom,
        });
    }
    Ok(placed)
}

fn check_new(count: i64, temp_id: i64) -> Result<(), ConsolidationError> {
    if count < 1 {
        return Err(ConsolidationError::CorruptDelta {
            id: temp_id as u64,
            reason: format!("new component with count {count}"),
        });
    }
    Ok(())
}

/// Incorporates deltas one by one. Existing-component entries are added
/// directly; each new component is merged into an existing component `u`
/// with probability proportional to `rho(S_u, S')` or appended with
/// probability proportional to 1. Empty components are deleted at the end.
pub fn progressive_consolidate<R: Rng + ?Sized>(
    pool: &mut GlobalPool,
    deltas: &[Delta],
    spec: &FamilySpec,
    rng: &mut R,
) -> Result<Vec<TempAssignment>, ConsolidationError> {
    let mut placed = Vec::new();
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for delta in deltas {
        for entry in &delta.entries {
            pool.apply_entry(spec, entry)?;
        }
        for new in &delta.new_components {
            check_new(new.stats.count, new.temp_id)?;
            targets.clear();
            weights.clear();
            for comp in pool.components().filter(|c| c.count() > 0) {
                targets.push(comp.id);
                weights.push(log_rho_unchecked(comp.stats(), &new.stats, spec));
            }
            weights.push(0.0);
            let u = sample_log_weights(&weights, rng).unwrap_or(targets.len());
            let atom = match targets.get(u) {
                Some(&target) => pool.merge_new_atom(target, new.stats.clone())?,
                None => pool.insert_atomic(new.stats.clone()),
            };
            placed.push(TempAssignment {
                worker: delta.worker,
                temp_id: new.temp_id,
                atom,
            });
        }
    }
    pool.remove_empty();
    Ok(placed)
}
