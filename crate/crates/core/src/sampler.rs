//! Worker-local collapsed Gibbs sampling against a delayed copy of the
//! global component pool, and extraction of the per-component deltas that
//! are pushed back to the master.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::expfam::{FamilyError, FamilySpec, PosteriorParams, SuffStats};
use crate::rng::sample_log_weights;

/// Component identifier as seen by a worker.
///
/// Positive values are master-allocated global ids; negative values are
/// temporary ids of components created locally since the last pull.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ComponentId(pub i64);

impl ComponentId {
    pub fn global(id: u64) -> Self {
        ComponentId(id as i64)
    }

    pub fn is_local(self) -> bool {
        self.0 < 0
    }

    /// Wire representation (two's complement for temporary ids).
    pub fn to_wire(self) -> u64 {
        self.0 as u64
    }

    pub fn from_wire(v: u64) -> Self {
        ComponentId(v as i64)
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error(transparent)]
    Family(#[from] FamilyError),
    #[error("component {0} has no members and must be pruned first")]
    EmptyComponent(ComponentId),
    #[error("observation {index} is labeled with unknown component {id}")]
    UnknownLabel { index: usize, id: ComponentId },
}

/// A worker's slice of the data together with its current labels.
#[derive(Debug, Clone)]
pub struct Shard {
    pub id: u32,
    dim: usize,
    data: Vec<f64>,
    /// `None` marks an observation that has not been assigned yet.
    pub assignments: Vec<Option<ComponentId>>,
}

impl Shard {
    /// Validates every row against the family.
    pub fn new(id: u32, spec: &FamilySpec, data: Vec<f64>) -> Result<Self, SamplerError> {
        let dim = spec.dim;
        if !data.len().is_multiple_of(dim) {
            return Err(FamilyError::DimensionMismatch {
                expected: dim,
                got: data.len() % dim,
            }
            .into());
        }
        for row in data.chunks_exact(dim) {
            spec.check_observation(row)?;
        }
        let n = data.len() / dim;
        Ok(Shard {
            id,
            dim,
            data,
            assignments: vec![None; n],
        })
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Rewrites labels through `(old, new)` pairs (wire ids).
    pub fn apply_remap(&mut self, remap: &[(u64, u64)]) {
        if remap.is_empty() {
            return;
        }
        let table: std::collections::HashMap<u64, u64> = remap.iter().copied().collect();
        for label in self.assignments.iter_mut().flatten() {
            if let Some(&new) = table.get(&label.to_wire()) {
                *label = ComponentId::from_wire(new);
            }
        }
    }
}

/// One component as seen by a worker.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewComponent {
    pub id: ComponentId,
    pub stats: SuffStats,
    pub params: PosteriorParams,
    log_part: f64,
}

impl ViewComponent {
    fn new(spec: &FamilySpec, id: ComponentId, stats: SuffStats, params: PosteriorParams) -> Self {
        let log_part = spec.log_partition_unchecked(&params.beta, params.kappa);
        ViewComponent {
            id,
            stats,
            params,
            log_part,
        }
    }

    pub fn count(&self) -> i64 {
        self.stats.count
    }

    fn update(&mut self, spec: &FamilySpec, x: &[f64], sign: i8) {
        self.stats.add_observation(x, sign);
        self.params.absorb(spec, x, f64::from(sign));
        self.log_part = spec.log_partition_unchecked(&self.params.beta, self.params.kappa);
    }
}

/// A global component as fetched at the start of a cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotComponent {
    pub id: u64,
    pub params: PosteriorParams,
    pub count: i64,
    pub atomic: bool,
}

/// Orders global components by id, then local ones by creation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct ViewKey(u8, u64);

impl From<ComponentId> for ViewKey {
    fn from(id: ComponentId) -> Self {
        if id.is_local() {
            ViewKey(1, id.0.unsigned_abs())
        } else {
            ViewKey(0, id.0 as u64)
        }
    }
}

/// A worker's local version of the component pool.
#[derive(Debug, Clone)]
pub struct LocalView {
    components: BTreeMap<ViewKey, ViewComponent>,
    snapshot: BTreeMap<u64, SnapshotComponent>,
    pub version: u64,
    next_temp: i64,
}

impl LocalView {
    /// A view with no global components (serial sampling or a first pull of
    /// an empty pool).
    pub fn empty(version: u64) -> Self {
        LocalView {
            components: BTreeMap::new(),
            snapshot: BTreeMap::new(),
            version,
            next_temp: 1,
        }
    }

    pub fn from_snapshot(
        spec: &FamilySpec,
        version: u64,
        components: Vec<SnapshotComponent>,
    ) -> Result<Self, SamplerError> {
        let mut view = LocalView::empty(version);
        let b0 = spec.prior_beta_entry();
        for c in components {
            if c.params.beta.len() != spec.dim {
                return Err(FamilyError::DimensionMismatch {
                    expected: spec.dim,
                    got: c.params.beta.len(),
                }
                .into());
            }
            let stats = SuffStats {
                psi: c.params.beta.iter().map(|b| b - b0).collect(),
                count: c.count,
            };
            let id = ComponentId::global(c.id);
            view.components
                .insert(id.into(), ViewComponent::new(spec, id, stats, c.params.clone()));
            view.snapshot.insert(c.id, c);
        }
        Ok(view)
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Components with at least one member.
    pub fn live_count(&self) -> usize {
        self.components.values().filter(|c| c.count() > 0).count()
    }

    pub fn get(&self, id: ComponentId) -> Option<&ViewComponent> {
        self.components.get(&id.into())
    }

    pub fn components(&self) -> impl Iterator<Item = &ViewComponent> {
        self.components.values()
    }

    pub fn snapshot(&self) -> impl Iterator<Item = &SnapshotComponent> {
        self.snapshot.values()
    }

    /// Builds a view directly from labeled data (used by serial sampling and
    /// tests). All components are local.
    pub fn from_assignments(spec: &FamilySpec, shard: &mut Shard) -> Self {
        let mut view = LocalView::empty(0);
        let mut relabel = BTreeMap::new();
        for i in 0..shard.len() {
            if let Some(old) = shard.assignments[i] {
                let id = *relabel.entry(old).or_insert_with(|| view.new_local(spec));
                shard.assignments[i] = Some(id);
                let x = shard.row(i);
                view.components
                    .get_mut(&id.into())
                    .expect("just inserted")
                    .update(spec, x, 1);
            }
        }
        view
    }

    fn new_local(&mut self, spec: &FamilySpec) -> ComponentId {
        let id = ComponentId(-self.next_temp);
        self.next_temp += 1;
        let comp = ViewComponent::new(spec, id, SuffStats::zero(spec.dim), spec.prior());
        self.components.insert(id.into(), comp);
        id
    }

    fn add(&mut self, spec: &FamilySpec, id: ComponentId, x: &[f64]) {
        self.components
            .get_mut(&id.into())
            .expect("label refers to a component in the view")
            .update(spec, x, 1);
    }

    fn remove(&mut self, spec: &FamilySpec, id: ComponentId, x: &[f64]) {
        let key = ViewKey::from(id);
        let comp = self
            .components
            .get_mut(&key)
            .expect("label refers to a component in the view");
        comp.update(spec, x, -1);
        if id.is_local() && comp.count() == 0 {
            self.components.remove(&key);
        }
    }

    /// Checks that every label of `shard` is present in the view.
    pub fn check_labels(&self, shard: &Shard) -> Result<(), SamplerError> {
        for (index, label) in shard.assignments.iter().enumerate() {
            if let Some(id) = *label {
                if !self.components.contains_key(&id.into()) {
                    return Err(SamplerError::UnknownLabel { index, id });
                }
            }
        }
        Ok(())
    }
}

/// Unnormalized log weights of the collapsed assignment step for `x`.
///
/// Entry `k < K` corresponds to the `k`-th component of the view (in view
/// order) and equals `ln n_k + ln f(x | p_k)`; the last entry is
/// `ln alpha + ln f(x | prior)`. `x` must already be removed from the view.
pub fn assignment_distribution(
    x: &[f64],
    view: &LocalView,
    spec: &FamilySpec,
) -> Result<(Vec<ComponentId>, Vec<f64>), SamplerError> {
    spec.check_observation(x)?;
    if let Some(c) = view.components().find(|c| c.count() <= 0) {
        return Err(SamplerError::EmptyComponent(c.id));
    }
    let mut ids = Vec::with_capacity(view.len());
    let mut weights = Vec::with_capacity(view.len() + 1);
    let prior = spec.prior();
    let prior_part = spec.log_partition_unchecked(&prior.beta, prior.kappa);
    fill_log_weights(x, view, spec, &prior, prior_part, true, &mut ids, &mut weights);
    let base = spec.log_base_measure(x);
    for w in &mut weights {
        *w += base;
    }
    Ok((ids, weights))
}

#[allow(clippy::too_many_arguments)]
fn fill_log_weights(
    x: &[f64],
    view: &LocalView,
    spec: &FamilySpec,
    prior: &PosteriorParams,
    prior_part: f64,
    allow_new: bool,
    ids: &mut Vec<ComponentId>,
    weights: &mut Vec<f64>,
) {
    ids.clear();
    weights.clear();
    for c in view.components.values() {
        if c.count() <= 0 {
            continue;
        }
        ids.push(c.id);
        weights.push((c.count() as f64).ln() + spec.log_marginal_ratio(x, &c.params, c.log_part));
    }
    if allow_new {
        weights.push(spec.alpha.ln() + spec.log_marginal_ratio(x, prior, prior_part));
    }
}

/// Sweep options.
#[derive(Debug, Clone, Copy)]
pub struct SweepOptions {
    /// Visit observations in a random order instead of index order.
    pub shuffle: bool,
    /// When false, the new-component branch is masked out.
    pub allow_new: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            shuffle: false,
            allow_new: true,
        }
    }
}

/// One collapsed Gibbs sweep over the shard.
///
/// Local components that become empty are dropped; global components are
/// kept at local count zero since their mass may live on other workers.
pub fn gibbs_sweep<R: Rng + ?Sized>(
    shard: &mut Shard,
    view: &mut LocalView,
    spec: &FamilySpec,
    opts: SweepOptions,
    rng: &mut R,
) {
    if shard.is_empty() {
        return;
    }
    let prior = spec.prior();
    let prior_part = spec.log_partition_unchecked(&prior.beta, prior.kappa);
    let mut order: Vec<usize> = (0..shard.len()).collect();
    if opts.shuffle {
        order.shuffle(rng);
    }
    let mut ids = Vec::new();
    let mut weights = Vec::new();
    for i in order {
        let x = shard.row(i);
        if let Some(id) = shard.assignments[i] {
            view.remove(spec, id, x);
        }
        fill_log_weights(
            x,
            view,
            spec,
            &prior,
            prior_part,
            opts.allow_new,
            &mut ids,
            &mut weights,
        );
        if weights.is_empty() {
            // nothing to join: a new component is the only choice
            weights.push(0.0);
        }
        let pick = sample_log_weights(&weights, rng).unwrap_or(weights.len() - 1);
        let target = match ids.get(pick) {
            Some(&id) => id,
            None => view.new_local(spec),
        };
        view.add(spec, target, x);
        shard.assignments[i] = Some(target);
    }
}

/// Per-component difference pushed from a worker to the master.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaEntry {
    pub id: u64,
    pub d_beta: Vec<f64>,
    pub d_kappa: f64,
    pub d_n: i64,
}

/// A component created locally since the last pull.
#[derive(Debug, Clone, PartialEq)]
pub struct NewComponent {
    pub temp_id: i64,
    pub stats: SuffStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delta {
    pub worker: u32,
    pub based_on: u64,
    pub entries: Vec<DeltaEntry>,
    pub new_components: Vec<NewComponent>,
}

impl Delta {
    /// Total count change carried by the delta.
    pub fn net_count(&self) -> i64 {
        self.entries.iter().map(|e| e.d_n).sum::<i64>() + self.new_components.iter().map(|c| c.stats.count).sum::<i64>()
    }
}

/// Differences between the view and the snapshot it started from.
pub fn compute_deltas(view: &LocalView, worker: u32) -> Delta {
    let mut entries = Vec::with_capacity(view.snapshot.len());
    for snap in view.snapshot.values() {
        let cur = view
            .get(ComponentId::global(snap.id))
            .expect("global components are never dropped from a view");
        entries.push(DeltaEntry {
            id: snap.id,
            d_beta: cur
                .params
                .beta
                .iter()
                .zip(&snap.params.beta)
                .map(|(a, b)| a - b)
                .collect(),
            d_kappa: cur.params.kappa - snap.params.kappa,
            d_n: cur.count() - snap.count,
        });
    }
    let new_components = view
        .components
        .values()
        .filter(|c| c.id.is_local() && c.count() > 0)
        .map(|c| NewComponent {
            temp_id: c.id.0,
            stats: c.stats.clone(),
        })
        .collect();
    Delta {
        worker,
        based_on: view.version,
        entries,
        new_components,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn g1(alpha: f64) -> FamilySpec {
        FamilySpec::gaussian(1, 1.0, 1.0, alpha)
    }

    fn snap(id: u64, spec: &FamilySpec, psi: f64, n: i64) -> SnapshotComponent {
        let params = spec
            .posterior_params(&SuffStats {
                psi: vec![psi],
                count: n,
            })
            .unwrap();
        SnapshotComponent {
            id,
            params,
            count: n,
            atomic: true,
        }
    }

    #[test]
    fn empty_view_forces_new_component() {
        let spec = g1(1.0);
        let view = LocalView::empty(0);
        let (ids, w) = assignment_distribution(&[0.3], &view, &spec).unwrap();
        assert!(ids.is_empty());
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn identical_components_get_equal_weights() {
        let spec = g1(1.0);
        let view = LocalView::from_snapshot(&spec, 1, vec![snap(1, &spec, 2.0, 3), snap(2, &spec, 2.0, 3)]).unwrap();
        let (_, w) = assignment_distribution(&[0.5], &view, &spec).unwrap();
        assert_eq!(w[0], w[1]);
    }

    #[test]
    fn weight_ratio_against_new_component() {
        // one component {n=2, sum=0}, x=0, alpha=1
        let spec = g1(1.0);
        let view = LocalView::from_snapshot(&spec, 1, vec![snap(1, &spec, 0.0, 2)]).unwrap();
        let (_, w) = assignment_distribution(&[0.0], &view, &spec).unwrap();
        let ratio = (w[0] - w[1]).exp();
        // 2 N(0;0,1+1/3) / N(0;0,2)
        let npdf = |v: f64| (-0.5 * (2.0 * std::f64::consts::PI * v).ln()).exp();
        let expected = 2.0 * npdf(4.0 / 3.0) / npdf(2.0);
        assert!((ratio - expected).abs() < 1e-12);
        // quadrature oracle: integrate N(0; mu, 1) against the mu posterior
        // N(mu; 0, 1/3) and the prior N(mu; 0, 1)
        let gauss = |x: f64, v: f64| (-x * x / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
        let quad = |post_var: f64| {
            let h = 1e-3;
            (-20_000..=20_000)
                .map(|i| i as f64 * h)
                .map(|mu| gauss(mu, 1.0) * gauss(mu, post_var) * h)
                .sum::<f64>()
        };
        let oracle = 2.0 * quad(1.0 / 3.0) / quad(1.0);
        assert!((ratio - oracle).abs() < 1e-6);
        assert!((ratio - 2.449_49).abs() < 1e-4);
    }

    #[test]
    fn empty_component_is_rejected() {
        let spec = g1(1.0);
        let view = LocalView::from_snapshot(&spec, 1, vec![snap(4, &spec, 0.0, 0)]).unwrap();
        assert_eq!(
            assignment_distribution(&[0.0], &view, &spec),
            Err(SamplerError::EmptyComponent(ComponentId(4)))
        );
    }

    #[test]
    fn single_observation_creates_atomic_local_component() {
        let spec = g1(1.0);
        let mut shard = Shard::new(0, &spec, vec![1.25]).unwrap();
        let mut view = LocalView::empty(0);
        gibbs_sweep(
            &mut shard,
            &mut view,
            &spec,
            SweepOptions::default(),
            &mut stream_rng(1, 0, 0),
        );
        let label = shard.assignments[0].unwrap();
        assert!(label.is_local());
        let delta = compute_deltas(&view, 0);
        assert!(delta.entries.is_empty());
        assert_eq!(delta.new_components.len(), 1);
        assert_eq!(
            delta.new_components[0].stats,
            SuffStats {
                psi: vec![1.25],
                count: 1
            }
        );
    }

    #[test]
    fn empty_shard_is_noop() {
        let spec = g1(1.0);
        let mut shard = Shard::new(0, &spec, vec![]).unwrap();
        let mut view = LocalView::from_snapshot(&spec, 3, vec![snap(1, &spec, 0.0, 2)]).unwrap();
        let before = view.clone();
        gibbs_sweep(
            &mut shard,
            &mut view,
            &spec,
            SweepOptions::default(),
            &mut stream_rng(1, 0, 0),
        );
        assert_eq!(
            view.components().collect::<Vec<_>>(),
            before.components().collect::<Vec<_>>()
        );
        let d = compute_deltas(&view, 0);
        assert!(d.entries.iter().all(|e| e.d_n == 0 && e.d_kappa == 0.0));
    }

    #[test]
    fn tiny_alpha_collapses_identical_points() {
        let spec = g1(1e-10);
        let mut ok = 0;
        for seed in 0..10 {
            let mut shard = Shard::new(0, &spec, vec![2.0; 40]).unwrap();
            let mut view = LocalView::empty(0);
            for sweep in 0..3 {
                gibbs_sweep(
                    &mut shard,
                    &mut view,
                    &spec,
                    SweepOptions::default(),
                    &mut stream_rng(seed, 0, sweep),
                );
            }
            if view.live_count() == 1 {
                ok += 1;
            }
        }
        assert!(ok >= 9, "{ok}/10");
    }

    #[test]
    fn delta_for_move_to_new_component() {
        let spec = g1(1.0);
        // global component 7 holds the shard's single point x=3 plus 4 elsewhere
        let mut shard = Shard::new(0, &spec, vec![3.0]).unwrap();
        shard.assignments[0] = Some(ComponentId(7));
        let mut view = LocalView::from_snapshot(&spec, 2, vec![snap(7, &spec, 3.0 + 4.0, 5)]).unwrap();
        let x = shard.row(0).to_vec();
        view.remove(&spec, ComponentId(7), &x);
        let id = view.new_local(&spec);
        view.add(&spec, id, &x);
        let d = compute_deltas(&view, 0);
        assert_eq!(d.based_on, 2);
        assert_eq!(
            d.entries,
            vec![DeltaEntry {
                id: 7,
                d_beta: vec![-3.0],
                d_kappa: -1.0,
                d_n: -1
            }]
        );
        assert_eq!(
            d.new_components,
            vec![NewComponent {
                temp_id: -1,
                stats: SuffStats {
                    psi: vec![3.0],
                    count: 1
                }
            }]
        );
        assert_eq!(d.net_count(), 0);
    }

    #[test]
    fn remap_rewrites_labels() {
        let spec = g1(1.0);
        let mut shard = Shard::new(0, &spec, vec![0.0, 1.0, 2.0]).unwrap();
        shard.assignments = vec![Some(ComponentId(7)), Some(ComponentId(-1)), Some(ComponentId(5))];
        shard.apply_remap(&[(7, 3), (ComponentId(-1).to_wire(), 9)]);
        assert_eq!(
            shard.assignments,
            vec![Some(ComponentId(3)), Some(ComponentId(9)), Some(ComponentId(5))]
        );
    }
}
