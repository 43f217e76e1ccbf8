use std::collections::{BTreeMap, HashMap};

use super::{Atom, Component, ConsolidationError};
use crate::expfam::{FamilySpec, SuffStats};
use crate::sampler::{DeltaEntry, SnapshotComponent};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemapTarget {
    Live(u64),
    Deleted,
}

/// One id retirement, stamped with the version in which it was published.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RemapRecord {
    pub version: u64,
    pub old: u64,
    pub target: RemapTarget,
}

/// Where a worker's temporary component ended up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TempAssignment {
    pub worker: u32,
    pub temp_id: i64,
    pub atom: u64,
}

/// The master's versioned component collection.
#[derive(Debug, Clone, Default)]
pub struct GlobalPool {
    components: BTreeMap<u64, Component>,
    /// Live atom id -> containing component id.
    owner: HashMap<u64, u64>,
    /// Retired id -> (version, target).
    redirects: HashMap<u64, (u64, RemapTarget)>,
    remap_log: Vec<RemapRecord>,
    version: u64,
    next_id: u64,
    next_revision: u64,
}

impl GlobalPool {
    pub fn new() -> Self {
        GlobalPool {
            next_id: 1,
            ..Default::default()
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&Component> {
        self.components.get(&id)
    }

    pub fn components(&self) -> impl Iterator<Item = &Component> {
        self.components.values()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.components.keys().copied().collect()
    }

    pub fn remap_log(&self) -> &[RemapRecord] {
        &self.remap_log
    }

    pub fn total_count(&self) -> i64 {
        self.components.values().map(Component::count).sum()
    }

    /// Sum of all component statistics.
    pub fn total_stats(&self, dim: usize) -> SuffStats {
        let mut total = SuffStats::zero(dim);
        for c in self.components.values() {
            total.accumulate_in_place(c.stats(), 1).expect("same dimension");
        }
        total
    }

    pub fn max_closure_error(&self) -> f64 {
        self.components
            .values()
            .map(Component::closure_error)
            .fold(0.0, f64::max)
    }

    pub(crate) fn fresh_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    fn fresh_revision(&mut self) -> u64 {
        self.next_revision += 1;
        self.next_revision
    }

    /// Appends a new atomic component and returns its id.
    pub fn insert_atomic(&mut self, stats: SuffStats) -> u64 {
        let id = self.fresh_id();
        let rev = self.fresh_revision();
        self.owner.insert(id, id);
        self.components
            .insert(id, Component::from_atoms(id, vec![Atom { id, stats }], rev));
        id
    }

    /// Adds `stats` as a new atom of component `target`. Returns the atom id.
    pub fn merge_new_atom(&mut self, target: u64, stats: SuffStats) -> Result<u64, ConsolidationError> {
        let atom = self.fresh_id();
        let rev = self.fresh_revision();
        let comp = self
            .components
            .get_mut(&target)
            .ok_or(ConsolidationError::UnknownId(target))?;
        comp.stats.accumulate_in_place(&stats, 1)?;
        let pos = comp.subcomponents.partition_point(|a| a.id < atom);
        comp.subcomponents.insert(pos, Atom { id: atom, stats });
        comp.revision = rev;
        self.owner.insert(atom, target);
        Ok(atom)
    }

    /// Resolves an id a worker may hold to a live atom, `None` if the id was
    /// deleted.
    pub fn resolve_atom(&self, id: u64) -> Result<Option<u64>, ConsolidationError> {
        let mut cur = id;
        // chains are acyclic: each hop moves to a strictly newer id or ends
        for _ in 0..=self.redirects.len() {
            if self.owner.contains_key(&cur) {
                return Ok(Some(cur));
            }
            match self.redirects.get(&cur) {
                Some((_, RemapTarget::Live(next))) => cur = *next,
                Some((_, RemapTarget::Deleted)) => return Ok(None),
                None => return Err(ConsolidationError::UnknownId(id)),
            }
        }
        Err(ConsolidationError::UnknownId(id))
    }

    /// Resolves an id to the live component currently containing it.
    pub fn resolve(&self, id: u64) -> Result<Option<u64>, ConsolidationError> {
        Ok(self.resolve_atom(id)?.map(|a| self.owner[&a]))
    }

    fn record(&mut self, old: u64, target: RemapTarget) {
        let version = self.version + 1;
        self.redirects.insert(old, (version, target));
        self.remap_log.push(RemapRecord { version, old, target });
    }

    /// Adds an existing-component delta entry.
    ///
    /// Entries for deleted ids that carry mass re-create the component under
    /// a fresh id (another worker emptied it while this worker refilled it).
    pub fn apply_entry(&mut self, spec: &FamilySpec, entry: &DeltaEntry) -> Result<(), ConsolidationError> {
        if entry.d_beta.len() != spec.dim {
            return Err(ConsolidationError::CorruptDelta {
                id: entry.id,
                reason: format!("d_beta has {} entries, expected {}", entry.d_beta.len(), spec.dim),
            });
        }
        let delta = SuffStats {
            psi: entry.d_beta.clone(),
            count: entry.d_n,
        };
        let expected_kappa = spec.kappa_increment(&delta);
        if !entry.d_kappa.is_finite() || (entry.d_kappa - expected_kappa).abs() > 1e-6 * (1.0 + expected_kappa.abs()) {
            return Err(ConsolidationError::CorruptDelta {
                id: entry.id,
                reason: format!("d_kappa {} does not match {}", entry.d_kappa, expected_kappa),
            });
        }
        match self.resolve_atom(entry.id)? {
            Some(atom_id) => {
                let comp_id = self.owner[&atom_id];
                let rev = self.fresh_revision();
                let comp = self.components.get_mut(&comp_id).expect("owner map is consistent");
                let atom = comp
                    .subcomponents
                    .iter_mut()
                    .find(|a| a.id == atom_id)
                    .expect("owner map is consistent");
                let new_count = atom.stats.count + delta.count;
                if new_count < 0 {
                    return Err(ConsolidationError::NegativeCount {
                        id: entry.id,
                        count: new_count,
                    });
                }
                atom.stats.accumulate_in_place(&delta, 1)?;
                comp.stats.accumulate_in_place(&delta, 1)?;
                comp.revision = rev;
                Ok(())
            }
            None if entry.d_n == 0 && entry.d_beta.iter().all(|&v| v == 0.0) => Ok(()),
            None if entry.d_n < 0 => Err(ConsolidationError::NegativeCount {
                id: entry.id,
                count: entry.d_n,
            }),
            None => {
                let mut dead = entry.id;
                while let Some((_, RemapTarget::Live(next))) = self.redirects.get(&dead) {
                    dead = *next;
                }
                let id = self.insert_atomic(delta);
                self.record(dead, RemapTarget::Live(id));
                Ok(())
            }
        }
    }

    /// Removes components (and atoms inside components) with no members.
    pub fn remove_empty(&mut self) {
        let empty: Vec<u64> = self
            .components
            .values()
            .filter(|c| c.count() == 0)
            .map(|c| c.id)
            .collect();
        for id in empty {
            let comp = self.components.remove(&id).expect("listed above");
            for a in &comp.subcomponents {
                self.owner.remove(&a.id);
                self.record(a.id, RemapTarget::Deleted);
            }
            if comp.subcomponents.iter().all(|a| a.id != id) {
                self.record(id, RemapTarget::Deleted);
            }
        }
        let mut dead_atoms = Vec::new();
        for comp in self.components.values_mut() {
            if comp.subcomponents.iter().any(|a| a.stats.count == 0) {
                for a in comp.subcomponents.iter().filter(|a| a.stats.count == 0) {
                    comp.stats.accumulate_in_place(&a.stats, -1).expect("same dimension");
                    dead_atoms.push(a.id);
                }
                comp.subcomponents.retain(|a| a.stats.count != 0);
                comp.revision = self.next_revision + 1;
                self.next_revision += 1;
            }
        }
        for a in dead_atoms {
            self.owner.remove(&a);
            self.record(a, RemapTarget::Deleted);
        }
    }

    /// Collapses component `id` into a single atom carrying its id.
    pub fn freeze(&mut self, id: u64) {
        let Some(comp) = self.components.get(&id) else { return };
        if comp.is_atomic() && comp.subcomponents[0].id == id {
            return;
        }
        let retired: Vec<u64> = comp.subcomponents.iter().map(|a| a.id).filter(|&a| a != id).collect();
        let rev = self.fresh_revision();
        let comp = self.components.get_mut(&id).expect("checked above");
        comp.subcomponents = vec![Atom {
            id,
            stats: comp.stats.clone(),
        }];
        comp.revision = rev;
        self.owner.insert(id, id);
        for a in retired {
            self.owner.remove(&a);
            self.record(a, RemapTarget::Live(id));
        }
    }

    /// Deletes empties, collapses every component to a single atom and bumps
    /// the version. Returns the new version.
    pub fn publish(&mut self) -> u64 {
        self.remove_empty();
        for id in self.ids() {
            self.freeze(id);
        }
        self.version += 1;
        self.version
    }

    /// Read-only copy of the current components.
    pub fn snapshot_components(&self, spec: &FamilySpec) -> Vec<SnapshotComponent> {
        self.components
            .values()
            .map(|c| SnapshotComponent {
                id: c.id,
                params: c.params(spec),
                count: c.count(),
                atomic: c.is_atomic(),
            })
            .collect()
    }

    /// Resolved `(old, live)` pairs for every id retired after `since`.
    pub fn remap_since(&self, since: u64) -> Vec<(u64, u64)> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for rec in self.remap_log.iter().rev().take_while(|r| r.version > since) {
            if !seen.insert(rec.old) {
                continue;
            }
            if let Ok(Some(live)) = self.resolve(rec.old) {
                out.push((rec.old, live));
            }
        }
        out.reverse();
        out
    }

    /// Drops remap history no worker can still need.
    pub fn compact(&mut self, acknowledged: u64) {
        self.remap_log.retain(|r| r.version > acknowledged);
        self.redirects.retain(|_, (v, _)| *v > acknowledged);
    }

    // Internal surgery used by the pooled sampler.

    pub(crate) fn take(&mut self, id: u64) -> Option<Component> {
        self.components.remove(&id)
    }

    pub(crate) fn put_atoms(&mut self, id: Option<u64>, atoms: Vec<Atom>) -> u64 {
        let id = match id {
            Some(id) => id,
            None if atoms.len() == 1 => atoms[0].id,
            None => self.fresh_id(),
        };
        let rev = self.fresh_revision();
        for a in &atoms {
            self.owner.insert(a.id, id);
        }
        self.components.insert(id, Component::from_atoms(id, atoms, rev));
        id
    }
}
