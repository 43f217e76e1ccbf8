use dpmm_core::expfam::{FamilySpec, SuffStats};
use proptest::prelude::*;

fn gaussian() -> impl Strategy<Value = FamilySpec> {
    (1usize..4, 0.3f64..3.0, 0.3f64..20.0, 0.1f64..5.0).prop_map(|(d, s, s0, a)| FamilySpec::gaussian(d, s, s0, a))
}

fn multinomial() -> impl Strategy<Value = FamilySpec> {
    (2usize..6, 0.1f64..3.0, 0.1f64..5.0).prop_map(|(v, g, a)| FamilySpec::multinomial(v, g, a))
}

fn family() -> impl Strategy<Value = FamilySpec> {
    prop_oneof![gaussian(), multinomial()]
}

/// Points valid for `spec`: reals for gaussian, non-empty count vectors for multinomial.
fn points(spec: &FamilySpec, n: std::ops::Range<usize>) -> BoxedStrategy<Vec<Vec<f64>>> {
    let d = spec.dim;
    if spec.is_gaussian() {
        prop::collection::vec(prop::collection::vec(-20.0f64..20.0, d), n).boxed()
    } else {
        prop::collection::vec(
            prop::collection::vec(0u32..4, d).prop_map(|mut c| {
                c[0] += 1;
                c.into_iter().map(f64::from).collect()
            }),
            n,
        )
        .boxed()
    }
}

fn stats(xs: &[Vec<f64>], d: usize) -> SuffStats {
    let mut s = SuffStats::zero(d);
    xs.iter().for_each(|x| s.add_observation(x, 1));
    s
}

proptest! {
    #[test]
    fn predictive_is_a_partition_difference(
        (spec, prior, x) in family().prop_flat_map(|s| {
            let p = points(&s, 0..10);
            let x = points(&s, 1..2);
            (Just(s), p, x)
        })
    ) {
        let p = spec.posterior_params(&stats(&prior, spec.dim)).unwrap();
        let x = &x[0];
        let with_x = spec.posterior_params(&stats(&prior.iter().chain([x]).cloned().collect::<Vec<_>>(), spec.dim)).unwrap();
        let lhs = spec.log_marginal(x, &p).unwrap() - spec.log_base_measure(x);
        let rhs = spec.log_partition(&with_x).unwrap() - spec.log_partition(&p).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()), "{lhs} vs {rhs}");
    }

    #[test]
    fn chained_marginal_is_exchangeable(
        (spec, xs, perm) in family().prop_flat_map(|s| {
            points(&s, 1..21).prop_flat_map(move |xs| {
                let n = xs.len();
                (Just(s), Just(xs), Just((0..n).collect::<Vec<_>>()).prop_shuffle())
            })
        })
    ) {
        let chain = |order: &[usize]| {
            let mut s = SuffStats::zero(spec.dim);
            let mut lp = 0.0;
            for &i in order {
                lp += spec.log_marginal(&xs[i], &spec.posterior_params(&s).unwrap()).unwrap();
                s.add_observation(&xs[i], 1);
            }
            lp
        };
        let ident: Vec<usize> = (0..xs.len()).collect();
        let (a, b) = (chain(&ident), chain(&perm));
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{a} vs {b}");
    }

    #[test]
    fn accumulate_is_commutative_and_associative(
        (a, b, c) in (1usize..5).prop_flat_map(|d| {
            let s = (prop::collection::vec(-1e3f64..1e3, d), 0i64..100)
                .prop_map(|(psi, count)| SuffStats { psi, count });
            (s.clone(), s.clone(), s)
        })
    ) {
        let ab = a.accumulate(&b, 1).unwrap();
        let ba = b.accumulate(&a, 1).unwrap();
        prop_assert_eq!(&ab, &ba);
        let left = ab.accumulate(&c, 1).unwrap();
        let right = a.accumulate(&b.accumulate(&c, 1).unwrap(), 1).unwrap();
        prop_assert_eq!(left.count, right.count);
        for (x, y) in left.psi.iter().zip(&right.psi) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
        // subtraction undoes addition
        let back = ab.accumulate(&b, -1).unwrap();
        prop_assert_eq!(back.count, a.count);
    }
}

#[test]
fn gaussian_predictive_integrates_to_one() {
    let spec = FamilySpec::gaussian(1, 1.3, 2.0, 1.0);
    let p = spec
        .posterior_params(&SuffStats {
            psi: vec![4.0],
            count: 3,
        })
        .unwrap();
    let (lo, hi, n) = (-30.0, 30.0, 60_000);
    let h = (hi - lo) / n as f64;
    let f = |x: f64| spec.log_marginal(&[x], &p).unwrap().exp();
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(lo + i as f64 * h);
    }
    let total = s * h / 3.0;
    assert!((total - 1.0).abs() < 1e-6, "{total}");
}

#[test]
fn multinomial_predictive_sums_to_one_per_length() {
    // documents of a fixed length form a complete outcome space
    for v in 1..=4usize {
        let spec = FamilySpec::multinomial(v, 0.7, 1.0);
        let p = spec
            .posterior_params(&SuffStats {
                psi: (0..v).map(|j| j as f64).collect(),
                count: 1,
            })
            .unwrap();
        for len in 1..=3u32 {
            let mut total = 0.0;
            let mut doc = vec![0u32; v];
            loop {
                if doc.iter().sum::<u32>() == len {
                    let x: Vec<f64> = doc.iter().map(|&c| f64::from(c)).collect();
                    total += spec.log_marginal(&x, &p).unwrap().exp();
                }
                let mut i = 0;
                while i < v {
                    doc[i] += 1;
                    if doc[i] <= len {
                        break;
                    }
                    doc[i] = 0;
                    i += 1;
                }
                if i == v {
                    break;
                }
            }
            assert!((total - 1.0).abs() < 1e-10, "V={v} len={len}: {total}");
        }
    }
}
