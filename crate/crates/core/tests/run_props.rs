use dpmm_core::data::{DataKind, Dataset};
use dpmm_core::expfam::FamilySpec;
use dpmm_core::metrics::{joint_log_likelihood, variation_of_information};
use dpmm_core::rng::stream_rng;
use dpmm_core::runtime::{run, Mode, RunConfig};
use dpmm_core::sampler::{compute_deltas, gibbs_sweep, LocalView, Shard, SweepOptions};
use proptest::prelude::*;

fn dense(dim: usize) -> impl Strategy<Value = Dataset> {
    prop::collection::vec(-8.0f64..8.0, (30 * dim)..(120 * dim)).prop_map(move |mut v| {
        v.truncate(v.len() / dim * dim);
        Dataset::new(DataKind::Dense, dim, v, None).unwrap()
    })
}

fn mode() -> impl Strategy<Value = Mode> {
    prop_oneof![Just(Mode::SyncProg), Just(Mode::SyncPooled), Just(Mode::Async)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn runs_conserve_global_mass(
        (dim, data) in (1usize..3).prop_flat_map(|d| (Just(d), dense(d))),
        mode in mode(),
        workers in 1usize..5,
        iters in 1u64..5,
        seed in any::<u64>(),
    ) {
        let spec = FamilySpec::gaussian(dim, 1.0, 5.0, 1.0);
        let cfg = RunConfig { workers, iterations: iters, seed, ..RunConfig::new(mode, spec) };
        let out = run(&cfg, &data).unwrap();
        prop_assert!(out.aborted.is_none());
        prop_assert_eq!(out.pool.total_count(), data.len() as i64);
        let total = out.pool.total_stats(dim);
        for j in 0..dim {
            let want: f64 = data.rows().map(|r| r[j]).sum();
            prop_assert!((total.psi[j] - want).abs() <= 1e-9 * (1.0 + want.abs()));
        }
        prop_assert_eq!(out.labels.len(), data.len());
        for l in &out.labels {
            prop_assert!(out.pool.get(*l).is_some());
        }
        if mode != Mode::Async {
            prop_assert!(out.comm.rounds.iter().all(|r| r.msgs == 2 * workers as u64 && r.bytes <= r.budget));
        }
    }

    #[test]
    fn view_reconstructs_from_snapshot_and_delta(
        data in dense(2),
        seed in any::<u64>(),
        sweeps in 1usize..4,
    ) {
        let spec = FamilySpec::gaussian(2, 1.0, 5.0, 1.0);
        // a first sweep from nothing produces a view to snapshot from
        let mut shard = Shard::new(0, &spec, data.values().to_vec()).unwrap();
        let mut view = LocalView::empty(0);
        let opts = SweepOptions { shuffle: false, allow_new: true };
        gibbs_sweep(&mut shard, &mut view, &spec, opts, &mut stream_rng(seed, 0, 0));
        let snapshot: Vec<_> = view
            .components()
            .enumerate()
            .map(|(i, c)| (i as u64 + 1, c.stats.clone()))
            .collect();
        let labels: Vec<u64> = {
            let ids: Vec<_> = view.components().map(|c| c.id).collect();
            shard.assignments.iter().map(|a| ids.iter().position(|id| Some(*id) == *a).unwrap() as u64 + 1).collect()
        };
        let (pool, map) = dpmm_core::runtime::pool_from_labels(&data, &labels, &spec);
        prop_assert_eq!(pool.len(), snapshot.len());
        let init: Vec<u64> = labels.iter().map(|l| map[l]).collect();
        let mut shard = dpmm_core::runtime::make_shard(&data, &spec, 1, 0, Some(&init)).unwrap();
        let comps = pool.snapshot_components(&spec);
        let mut view = LocalView::from_snapshot(&spec, 1, comps.clone()).unwrap();
        for t in 0..sweeps {
            gibbs_sweep(&mut shard, &mut view, &spec, opts, &mut stream_rng(seed, 1, t as u64));
        }
        // shard conservation
        let live: i64 = view.components().map(|c| c.count()).sum();
        prop_assert_eq!(live, data.len() as i64);
        let delta = compute_deltas(&view, 0);
        for e in &delta.entries {
            let snap = comps.iter().find(|c| c.id == e.id).unwrap();
            let cur = view.get(dpmm_core::sampler::ComponentId::global(e.id)).unwrap();
            prop_assert_eq!(snap.count + e.d_n, cur.count());
            prop_assert!((snap.params.kappa + e.d_kappa - cur.params.kappa).abs() <= 1e-12 * (1.0 + cur.params.kappa));
            for j in 0..2 {
                let rebuilt = snap.params.beta[j] + e.d_beta[j];
                prop_assert!((rebuilt - cur.params.beta[j]).abs() <= 1e-12 * (1.0 + cur.params.beta[j].abs()));
            }
        }
    }

    #[test]
    fn vi_is_bounded_and_relabel_invariant(
        (a, b, shift) in (2usize..200).prop_flat_map(|n| (
            prop::collection::vec(0u64..6, n),
            prop::collection::vec(0u64..6, n),
            1u64..1000,
        ))
    ) {
        let vi = variation_of_information(&a, &b).unwrap();
        prop_assert!(vi >= -1e-12 && vi <= (a.len() as f64).ln() + 1e-12);
        prop_assert!(variation_of_information(&a, &a).unwrap().abs() < 1e-12);
        let relabeled: Vec<u64> = a.iter().map(|x| (x + shift) * 7).collect();
        prop_assert!(variation_of_information(&a, &relabeled).unwrap().abs() < 1e-12);
        prop_assert!((variation_of_information(&relabeled, &b).unwrap() - vi).abs() < 1e-12);
    }

    #[test]
    fn loglik_is_relabel_invariant(data in dense(2), shift in 1u64..50) {
        let spec = FamilySpec::gaussian(2, 1.0, 5.0, 1.0);
        let z: Vec<u64> = (0..data.len() as u64).map(|i| i % 4).collect();
        let relabeled: Vec<u64> = z.iter().map(|x| 1000 - x * shift).collect();
        for crp in [false, true] {
            let a = joint_log_likelihood(&data, &z, &spec, crp).unwrap();
            let b = joint_log_likelihood(&data, &relabeled, &spec, crp).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }
}
