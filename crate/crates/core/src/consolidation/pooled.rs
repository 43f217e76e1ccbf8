//! Pooled consolidation: a Metropolis-Hastings chain over the component
//! pool whose moves merge two components or split a merged component back
//! along its atoms.
//!
//! A merge picks a pair with probability proportional to `rho(A, B)`. A
//! split picks a non-atomic `C` with probability proportional to `1/beta_C`
//! and re-consolidates its atoms with a two-slot version of the progressive
//! rule, which yields either `C` itself (a self-transition) or a two-way
//! split `(A, B)` with probability `gamma_C(A, B)`. Atom order is ascending
//! atom id throughout so `beta_C` and `gamma_C` are functions of the atom set.

use std::collections::HashMap;

use rand::Rng;

use super::{log_rho_unchecked, Atom, Component, ConsolidationError, GlobalPool};
use crate::expfam::{log_add_exp, log_sum_exp, FamilySpec, SuffStats};
use crate::rng::sample_log_weights;

/// `ln beta_C`: probability that restricted consolidation of `subs` (in the
/// given order) re-forms a single component.
pub fn single_component_log_prob(subs: &[Atom], spec: &FamilySpec) -> Result<f64, ConsolidationError> {
    if subs.len() < 2 {
        return Err(ConsolidationError::TooFewSubcomponents(subs.len()));
    }
    check_atoms(subs)?;
    let mut acc = subs[0].stats.clone();
    let mut lp = 0.0;
    for a in &subs[1..] {
        let lr = log_rho_unchecked(&acc, &a.stats, spec);
        lp += lr - log_add_exp(lr, 0.0);
        acc.accumulate_in_place(&a.stats, 1)?;
    }
    Ok(lp)
}

fn check_atoms(subs: &[Atom]) -> Result<(), ConsolidationError> {
    if subs.iter().any(|a| a.stats.count < 1) {
        return Err(ConsolidationError::EmptyComponent);
    }
    Ok(())
}

/// Result of restricted consolidation.
#[derive(Debug, Clone, PartialEq)]
pub struct RestrictedOutcome {
    /// `sides[k]` is 0 when atom `k` ended in the first group, 1 otherwise.
    /// `sides[0]` is always 0.
    pub sides: Vec<u8>,
    /// `ln gamma`: log probability of the choices made.
    pub log_gamma: f64,
}

impl RestrictedOutcome {
    pub fn is_single(&self) -> bool {
        self.sides.iter().all(|&s| s == 0)
    }
}

/// Two-slot progressive re-consolidation of `subs`.
///
/// The first atom seeds group 1. Each following atom joins group `i` with
/// weight `rho(R_i, A_k)`; while only one group exists the second weight is
/// 1 and choosing it opens group 2. Once two groups exist no more can open.
pub fn restricted_consolidate<R: Rng + ?Sized>(
    subs: &[Atom],
    spec: &FamilySpec,
    rng: &mut R,
) -> Result<RestrictedOutcome, ConsolidationError> {
    if subs.len() < 2 {
        return Err(ConsolidationError::TooFewSubcomponents(subs.len()));
    }
    check_atoms(subs)?;
    restricted_walk(subs, spec, |lw| sample_log_weights(lw, rng).unwrap_or(0) as u8)
}

/// `ln gamma_C(A, B)`: probability that restricted consolidation of `subs`
/// produces exactly the split given by `sides`.
pub fn restricted_split_log_prob(subs: &[Atom], sides: &[u8], spec: &FamilySpec) -> Result<f64, ConsolidationError> {
    if subs.len() < 2 {
        return Err(ConsolidationError::TooFewSubcomponents(subs.len()));
    }
    check_atoms(subs)?;
    assert_eq!(subs.len(), sides.len());
    // normalize so that the first atom is in group 0
    let flip = sides[0];
    let mut k = 0;
    let out = restricted_walk(subs, spec, |_| {
        k += 1;
        sides[k] ^ flip
    })?;
    Ok(out.log_gamma)
}

fn restricted_walk(
    subs: &[Atom],
    spec: &FamilySpec,
    mut choose: impl FnMut(&[f64]) -> u8,
) -> Result<RestrictedOutcome, ConsolidationError> {
    let mut groups: Vec<SuffStats> = vec![subs[0].stats.clone()];
    let mut sides = vec![0u8; subs.len()];
    let mut log_gamma = 0.0;
    let mut lw = [0.0f64; 2];
    for (k, atom) in subs.iter().enumerate().skip(1) {
        lw[0] = log_rho_unchecked(&groups[0], &atom.stats, spec);
        lw[1] = match groups.get(1) {
            Some(g) => log_rho_unchecked(g, &atom.stats, spec),
            None => 0.0,
        };
        let norm = log_add_exp(lw[0], lw[1]);
        let u = choose(&lw).min(1);
        log_gamma += lw[usize::from(u)] - norm;
        sides[k] = u;
        if usize::from(u) < groups.len() {
            groups[usize::from(u)].accumulate_in_place(&atom.stats, 1)?;
        } else {
            groups.push(atom.stats.clone());
        }
    }
    Ok(RestrictedOutcome { sides, log_gamma })
}

/// A sampled merge pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeProposal {
    pub a: u64,
    pub b: u64,
    pub log_rho: f64,
    /// `ln Pr(Q -> Q')`.
    pub log_prob: f64,
}

/// A sampled split.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitProposal {
    /// Restricted consolidation re-formed `c`.
    SelfTransition { c: u64 },
    Split {
        c: u64,
        first: Vec<Atom>,
        second: Vec<Atom>,
        log_gamma: f64,
        log_beta_c: f64,
        /// `ln` of the probability of choosing `c`.
        log_select: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoveKind {
    Merge,
    Split,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MoveOutcome {
    /// No candidate for the chosen move.
    NoOp(MoveKind),
    SelfTransition,
    Accepted {
        kind: MoveKind,
        log_accept: f64,
    },
    Rejected {
        kind: MoveKind,
        log_accept: f64,
    },
}

/// Counters over a run of pooled iterations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MoveStats {
    pub merges_proposed: u64,
    pub merges_accepted: u64,
    pub splits_proposed: u64,
    pub splits_accepted: u64,
    pub no_ops: u64,
}

/// Pooled consolidation with cached `rho` and `beta_C` values.
///
/// Cache entries are keyed by component revision, so any mutation of a
/// component (including through the pool directly) invalidates them.
#[derive(Debug, Clone)]
pub struct PooledConsolidator {
    pub subcomp_cap: usize,
    pub stats: MoveStats,
    rho_cache: HashMap<(u64, u64), (u64, u64, f64)>,
    beta_cache: HashMap<u64, (u64, f64)>,
}

impl Default for PooledConsolidator {
    fn default() -> Self {
        Self::new(64)
    }
}

impl PooledConsolidator {
    pub fn new(subcomp_cap: usize) -> Self {
        PooledConsolidator {
            subcomp_cap: subcomp_cap.max(2),
            stats: MoveStats::default(),
            rho_cache: HashMap::new(),
            beta_cache: HashMap::new(),
        }
    }

    fn log_rho(&mut self, a: &Component, b: &Component, spec: &FamilySpec) -> f64 {
        let (x, y) = if a.id < b.id { (a, b) } else { (b, a) };
        let key = (x.id, y.id);
        if let Some(&(rx, ry, v)) = self.rho_cache.get(&key) {
            if rx == x.revision() && ry == y.revision() {
                return v;
            }
        }
        let v = log_rho_unchecked(x.stats(), y.stats(), spec);
        self.rho_cache.insert(key, (x.revision(), y.revision(), v));
        v
    }

    fn log_beta(&mut self, c: &Component, spec: &FamilySpec) -> f64 {
        if let Some(&(rev, v)) = self.beta_cache.get(&c.id) {
            if rev == c.revision() {
                return v;
            }
        }
        let v =
            single_component_log_prob(c.subcomponents(), spec).expect("called on non-atomic components with members");
        self.beta_cache.insert(c.id, (c.revision(), v));
        v
    }

    fn trim_caches(&mut self, k: usize) {
        if self.rho_cache.len() > 4 * k * k + 1024 {
            self.rho_cache.clear();
        }
        if self.beta_cache.len() > 4 * k + 1024 {
            self.beta_cache.clear();
        }
    }

    /// Log weights of all unordered pairs, in pool order.
    fn pair_weights(&mut self, comps: &[&Component], spec: &FamilySpec) -> (Vec<(usize, usize)>, Vec<f64>) {
        let k = comps.len();
        let mut pairs = Vec::with_capacity(k * k.saturating_sub(1) / 2);
        let mut weights = Vec::with_capacity(pairs.capacity());
        for i in 0..k {
            for j in i + 1..k {
                pairs.push((i, j));
                weights.push(self.log_rho(comps[i], comps[j], spec));
            }
        }
        (pairs, weights)
    }

    pub fn propose_merge<R: Rng + ?Sized>(
        &mut self,
        pool: &GlobalPool,
        spec: &FamilySpec,
        rng: &mut R,
    ) -> Option<(MergeProposal, f64)> {
        let comps: Vec<&Component> = pool.components().filter(|c| c.count() > 0).collect();
        if comps.len() < 2 {
            return None;
        }
        let (pairs, weights) = self.pair_weights(&comps, spec);
        let log_z = log_sum_exp(&weights);
        let pick = sample_log_weights(&weights, rng)?;
        let (i, j) = pairs[pick];
        let proposal = MergeProposal {
            a: comps[i].id,
            b: comps[j].id,
            log_rho: weights[pick],
            log_prob: weights[pick] - log_z,
        };
        Some((proposal, log_z))
    }

    pub fn propose_split<R: Rng + ?Sized>(
        &mut self,
        pool: &GlobalPool,
        spec: &FamilySpec,
        rng: &mut R,
    ) -> Option<SplitProposal> {
        let candidates: Vec<&Component> = pool.components().filter(|c| !c.is_atomic() && c.count() > 0).collect();
        if candidates.is_empty() {
            return None;
        }
        let log_betas: Vec<f64> = candidates.iter().map(|c| self.log_beta(c, spec)).collect();
        let inv: Vec<f64> = log_betas.iter().map(|b| -b).collect();
        let log_z = log_sum_exp(&inv);
        let pick = sample_log_weights(&inv, rng)?;
        let c = candidates[pick];
        let outcome = restricted_consolidate(c.subcomponents(), spec, rng)
            .expect("non-atomic component has at least two atoms with members");
        if outcome.is_single() {
            return Some(SplitProposal::SelfTransition { c: c.id });
        }
        let mut first = Vec::new();
        let mut second = Vec::new();
        for (atom, &side) in c.subcomponents().iter().zip(&outcome.sides) {
            if side == 0 {
                first.push(atom.clone());
            } else {
                second.push(atom.clone());
            }
        }
        Some(SplitProposal::Split {
            c: c.id,
            first,
            second,
            log_gamma: outcome.log_gamma,
            log_beta_c: log_betas[pick],
            log_select: inv[pick] - log_z,
        })
    }

    /// One MH iteration: a merge or a split with equal chance.
    pub fn step<R: Rng + ?Sized>(&mut self, pool: &mut GlobalPool, spec: &FamilySpec, rng: &mut R) -> MoveOutcome {
        self.trim_caches(pool.len());
        let outcome = if rng.random_bool(0.5) {
            self.merge_step(pool, spec, rng)
        } else {
            self.split_step(pool, spec, rng)
        };
        match &outcome {
            MoveOutcome::NoOp(_) => self.stats.no_ops += 1,
            MoveOutcome::SelfTransition => self.stats.splits_proposed += 1,
            MoveOutcome::Accepted { kind, .. } | MoveOutcome::Rejected { kind, .. } => {
                let accepted = matches!(outcome, MoveOutcome::Accepted { .. });
                match kind {
                    MoveKind::Merge => {
                        self.stats.merges_proposed += 1;
                        self.stats.merges_accepted += u64::from(accepted);
                    }
                    MoveKind::Split => {
                        self.stats.splits_proposed += 1;
                        self.stats.splits_accepted += u64::from(accepted);
                    }
                }
            }
        }
        outcome
    }

    pub fn run<R: Rng + ?Sized>(&mut self, pool: &mut GlobalPool, iters: usize, spec: &FamilySpec, rng: &mut R) {
        for _ in 0..iters {
            self.step(pool, spec, rng);
        }
    }

    fn merge_step<R: Rng + ?Sized>(&mut self, pool: &mut GlobalPool, spec: &FamilySpec, rng: &mut R) -> MoveOutcome {
        let Some((prop, log_z)) = self.propose_merge(pool, spec, rng) else {
            return MoveOutcome::NoOp(MoveKind::Merge);
        };
        let a = pool.get(prop.a).expect("proposed from pool");
        let b = pool.get(prop.b).expect("proposed from pool");
        let mut atoms: Vec<(Atom, u8)> = a
            .subcomponents()
            .iter()
            .map(|x| (x.clone(), 0))
            .chain(b.subcomponents().iter().map(|x| (x.clone(), 1)))
            .collect();
        atoms.sort_by_key(|(x, _)| x.id);
        let (atoms, sides): (Vec<Atom>, Vec<u8>) = atoms.into_iter().unzip();
        let log_beta_c = single_component_log_prob(&atoms, spec).expect("two or more atoms");
        let log_gamma = restricted_split_log_prob(&atoms, &sides, spec).expect("two or more atoms");

        // split-selection normalizer over the merged pool
        let mut inv: Vec<f64> = Vec::new();
        let others: Vec<&Component> = pool
            .components()
            .filter(|c| c.id != prop.a && c.id != prop.b && !c.is_atomic() && c.count() > 0)
            .collect();
        for c in others {
            inv.push(-self.log_beta(c, spec));
        }
        inv.push(-log_beta_c);
        let log_reverse = -log_beta_c - log_sum_exp(&inv) + log_gamma;
        // rho * Pr(Q'->Q) / Pr(Q->Q'), with Pr(Q->Q') = rho / Z
        let log_accept = log_reverse + log_z;

        if accept(log_accept, rng) {
            let a = pool.take(prop.a).expect("present");
            let b = pool.take(prop.b).expect("present");
            let mut merged = a.subcomponents().to_vec();
            merged.extend_from_slice(b.subcomponents());
            let c = pool.put_atoms(None, merged);
            if pool.get(c).map_or(0, |c| c.subcomponents().len()) > self.subcomp_cap {
                pool.freeze(c);
            }
            MoveOutcome::Accepted {
                kind: MoveKind::Merge,
                log_accept,
            }
        } else {
            MoveOutcome::Rejected {
                kind: MoveKind::Merge,
                log_accept,
            }
        }
    }

    fn split_step<R: Rng + ?Sized>(&mut self, pool: &mut GlobalPool, spec: &FamilySpec, rng: &mut R) -> MoveOutcome {
        let proposal = match self.propose_split(pool, spec, rng) {
            None => return MoveOutcome::NoOp(MoveKind::Split),
            Some(SplitProposal::SelfTransition { .. }) => return MoveOutcome::SelfTransition,
            Some(p) => p,
        };
        let SplitProposal::Split {
            c,
            first,
            second,
            log_gamma,
            log_select,
            ..
        } = proposal
        else {
            unreachable!()
        };
        let sum = |atoms: &[Atom]| {
            let mut s = atoms[0].stats.clone();
            for a in &atoms[1..] {
                s.accumulate_in_place(&a.stats, 1).expect("same dimension");
            }
            s
        };
        let s1 = sum(&first);
        let s2 = sum(&second);
        let log_rho_12 = log_rho_unchecked(&s1, &s2, spec);

        // merge normalizer over the split pool
        let rest: Vec<&Component> = pool.components().filter(|x| x.id != c && x.count() > 0).collect();
        let (_, mut weights) = self.pair_weights(&rest, spec);
        for x in &rest {
            weights.push(log_rho_unchecked(x.stats(), &s1, spec));
            weights.push(log_rho_unchecked(x.stats(), &s2, spec));
        }
        weights.push(log_rho_12);
        let log_z_split = log_sum_exp(&weights);
        // (1/rho) * Pr(Q->Q') / Pr(Q'->Q), with Pr(Q->Q') = rho / Z'
        let log_forward = log_select + log_gamma;
        let log_accept = -log_z_split - log_forward;

        if accept(log_accept, rng) {
            pool.take(c).expect("present");
            pool.put_atoms(None, first);
            pool.put_atoms(None, second);
            MoveOutcome::Accepted {
                kind: MoveKind::Split,
                log_accept,
            }
        } else {
            MoveOutcome::Rejected {
                kind: MoveKind::Split,
                log_accept,
            }
        }
    }
}

fn accept<R: Rng + ?Sized>(log_accept: f64, rng: &mut R) -> bool {
    if log_accept >= 0.0 {
        // still consume a draw so the stream does not depend on the branch
        let _: f64 = rng.random();
        return true;
    }
    let u: f64 = rng.random();
    u.ln() < log_accept
}

/// Samples a merge pair from `pool` (probability proportional to `rho`).
pub fn propose_merge<R: Rng + ?Sized>(pool: &GlobalPool, spec: &FamilySpec, rng: &mut R) -> Option<MergeProposal> {
    PooledConsolidator::default()
        .propose_merge(pool, spec, rng)
        .map(|(p, _)| p)
}

/// Samples a split of a non-atomic component (probability proportional to
/// `1/beta_C`). `None` when every component is atomic.
pub fn propose_split<R: Rng + ?Sized>(pool: &GlobalPool, spec: &FamilySpec, rng: &mut R) -> Option<SplitProposal> {
    PooledConsolidator::default().propose_split(pool, spec, rng)
}

/// Runs `iters` pooled MH iterations on `pool`.
pub fn pooled_consolidate<R: Rng + ?Sized>(
    pool: &mut GlobalPool,
    iters: usize,
    spec: &FamilySpec,
    subcomp_cap: usize,
    rng: &mut R,
) -> MoveStats {
    let mut c = PooledConsolidator::new(subcomp_cap);
    c.run(pool, iters, spec, rng);
    c.stats
}
