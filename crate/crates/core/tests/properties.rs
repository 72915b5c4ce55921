use nalgebra::DMatrix;
use proptest::prelude::*;
use spreme_core::eval::{mask_precision_recall, mse};
use spreme_core::library::{logit, sigmoid};
use spreme_core::sindy::{estimate_derivatives_with, DerivativeScheme};
use spreme_core::spreme::{
    coefficient_loss_grad, init_relaxed_mask, prune_coefficients, prune_relaxed_mask,
    quantize_mask, regularizer_weight, AnchorRule, DataTerm, EnvData, Penalty, RolloutSettings,
};
use spreme_core::{
    intersection_mask, union_mask, BinaryMask, CoefficientSet, FeatureLibrary, RelaxedMask, Trajectory,
};

fn matrix(n: usize, p: usize, range: std::ops::Range<f64>) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(range, n * p).prop_map(move |v| DMatrix::from_row_slice(n, p, &v))
}

fn bool_matrix(n: usize, p: usize) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(any::<bool>(), n * p).prop_map(move |v| BinaryMask::from_fn(n, p, |r, c| v[r * p + c]))
}

/// Coefficient sets whose entries are exactly zero about half the time.
fn sparse_set(envs: usize, n: usize, p: usize) -> impl Strategy<Value = CoefficientSet> {
    prop::collection::vec(
        prop::collection::vec(prop_oneof![Just(0.0), -2.0..2.0f64], n * p),
        envs,
    )
    .prop_map(move |ms| CoefficientSet(ms.iter().map(|m| DMatrix::from_row_slice(n, p, m)).collect()))
}

fn relaxed(n: usize, p: usize) -> impl Strategy<Value = RelaxedMask> {
    prop::collection::vec(prop_oneof![Just(f64::NEG_INFINITY), -6.0..6.0f64], n * p)
        .prop_map(move |v| RelaxedMask(DMatrix::from_row_slice(n, p, &v)))
}

fn trajectory(n: usize, m: usize) -> impl Strategy<Value = Trajectory> {
    matrix(m, n, -1.0..1.0).prop_map(move |states| {
        Trajectory::new(0, (0..m).map(|i| i as f64 * 0.1).collect(), states, None).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn off_mask_coefficients_never_reach_the_loss(
        mask in bool_matrix(2, 6),
        xi in matrix(2, 6, -0.5..0.5),
        noise in matrix(2, 6, -100.0..100.0),
        traj in trajectory(2, 6),
    ) {
        let lib = FeatureLibrary::new(2, 2, false).unwrap();
        let data = EnvData { envs: vec![vec![traj]] };
        let term = DataTerm {
            eta: 2,
            full: false,
            rule: AnchorRule::Floor,
            penalty: Penalty::Huber(1.0),
            settings: RolloutSettings { substeps: 1 },
        };
        let perturbed = DMatrix::from_fn(2, 6, |r, c| if mask.get(r, c) { xi[(r, c)] } else { noise[(r, c)] });
        let a = coefficient_loss_grad(&lib, &CoefficientSet(vec![xi]), &mask, &data, term, true).unwrap();
        let b = coefficient_loss_grad(&lib, &CoefficientSet(vec![perturbed]), &mask, &data, term, true).unwrap();
        prop_assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        prop_assert_eq!(a.grads, b.grads);
    }

    #[test]
    fn quantization_marks_exactly_the_unpruned_entries(m in relaxed(3, 5)) {
        let q = quantize_mask(&m);
        for r in 0..3 {
            for c in 0..5 {
                prop_assert_eq!(q.get(r, c), m.0[(r, c)].is_finite());
            }
        }
        prop_assert_eq!(q.count_ones(), m.active_count());
    }

    #[test]
    fn pruning_only_removes_entries(
        mut m in relaxed(2, 4),
        mut coeffs in sparse_set(3, 2, 4),
        kappa in 0.0..0.5f64,
    ) {
        let before = quantize_mask(&m);
        prune_coefficients(&mut coeffs, kappa);
        for x in coeffs.0.iter().flat_map(|c| c.iter()) {
            prop_assert!(*x == 0.0 || x.abs() >= kappa);
        }
        let removed = prune_relaxed_mask(&mut m, &coeffs, kappa.max(1e-3));
        let after = quantize_mask(&m);
        prop_assert!(after.is_subset_of(&before));
        prop_assert_eq!(before.count_ones() - after.count_ones(), removed);
        for (r, c) in after.ones_positions() {
            prop_assert!(sigmoid(m.0[(r, c)]) >= kappa.max(1e-3));
            prop_assert!(coeffs.nonzero_count(r, c) > 0);
        }
    }

    #[test]
    fn init_mask_follows_the_nonzero_fraction(coeffs in sparse_set(4, 2, 3), alpha in 0.05..0.95f64) {
        let m = init_relaxed_mask(&coeffs, alpha).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                let k = coeffs.nonzero_count(r, c);
                if k == 0 {
                    prop_assert!(m.is_pruned(r, c));
                } else {
                    let expect = alpha * k as f64 / 4.0;
                    prop_assert!((sigmoid(m.0[(r, c)]) - expect).abs() < 1e-12);
                    prop_assert!((m.0[(r, c)] - logit(expect)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn regularizer_weight_never_decreases(lambda in 0.0..10.0f64, s in 0.0..0.5f64, tau in 0u32..300) {
        let a = regularizer_weight(lambda, s, tau);
        let b = regularizer_weight(lambda, s, tau + 1);
        prop_assert!(a >= 0.0);
        prop_assert!(b >= a);
        prop_assert!((regularizer_weight(lambda, s, 0) - lambda).abs() <= 1e-15 * lambda);
    }

    #[test]
    fn aggregation_matches_brute_force(coeffs in (1usize..5).prop_flat_map(|e| sparse_set(e, 3, 4))) {
        let inter = intersection_mask(&coeffs).unwrap();
        let uni = union_mask(&coeffs).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                let mut all = true;
                let mut any = false;
                for m in &coeffs.0 {
                    all &= m[(r, c)] != 0.0;
                    any |= m[(r, c)] != 0.0;
                }
                prop_assert_eq!(inter.get(r, c), all);
                prop_assert_eq!(uni.get(r, c), any);
            }
        }
        prop_assert!(inter.is_subset_of(&uni));
    }

    #[test]
    fn mse_is_the_mean_squared_difference(a in matrix(4, 3, -5.0..5.0), b in matrix(4, 3, -5.0..5.0)) {
        let v = mse(&a, &b).unwrap();
        let mut sum = 0.0;
        for i in 0..4 {
            for k in 0..3 {
                sum += (a[(i, k)] - b[(i, k)]).powi(2);
            }
        }
        prop_assert!((v - sum / 12.0).abs() <= 1e-12 * (1.0 + v));
        prop_assert_eq!(v, mse(&b, &a).unwrap());
        prop_assert_eq!(mse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn precision_and_recall_count_hits(pred in bool_matrix(3, 4), truth in bool_matrix(3, 4)) {
        prop_assume!(truth.count_ones() > 0);
        let (p, r) = mask_precision_recall(&pred, &truth).unwrap();
        let hits = pred.ones_positions().iter().filter(|&&(i, j)| truth.get(i, j)).count() as f64;
        prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&r));
        prop_assert_eq!(r, hits / truth.count_ones() as f64);
        if pred.count_ones() > 0 {
            prop_assert_eq!(p, hits / pred.count_ones() as f64);
        }
        prop_assert_eq!(p == 1.0 && r == 1.0, pred == truth);
    }

    #[test]
    fn stencils_are_exact_on_low_degree_polynomials(
        coef in prop::collection::vec(-2.0..2.0f64, 5),
        dt in 0.01..0.5f64,
        m in 5usize..12,
    ) {
        let times: Vec<f64> = (0..m).map(|i| i as f64 * dt).collect();
        let poly = |t: f64, deg: usize| (0..=deg).map(|k| coef[k] * t.powi(k as i32)).sum::<f64>();
        let dpoly = |t: f64, deg: usize| (1..=deg).map(|k| k as f64 * coef[k] * t.powi(k as i32 - 1)).sum::<f64>();
        for (scheme, deg) in [(DerivativeScheme::SecondOrder, 2), (DerivativeScheme::FourthOrder, 4)] {
            let states = DMatrix::from_fn(m, 1, |i, _| poly(times[i], deg));
            let traj = Trajectory::new(0, times.clone(), states, None).unwrap();
            let d = estimate_derivatives_with(&traj, scheme).unwrap();
            for (i, t) in times.iter().enumerate() {
                let exact = dpoly(*t, deg);
                prop_assert!((d[(i, 0)] - exact).abs() < 1e-8 * (1.0 + exact.abs()) / dt.min(1.0));
            }
        }
    }
}

#[test]
fn fourth_order_stencil_converges_at_fourth_order() {
    let err = |dt: f64| {
        let m = (1.0 / dt).round() as usize + 1;
        let times: Vec<f64> = (0..m).map(|i| i as f64 * dt).collect();
        let states = DMatrix::from_fn(m, 1, |i, _| (2.0 * times[i]).sin());
        let traj = Trajectory::new(0, times.clone(), states, None).unwrap();
        let d = estimate_derivatives_with(&traj, DerivativeScheme::FourthOrder).unwrap();
        (0..m)
            .map(|i| (d[(i, 0)] - 2.0 * (2.0 * times[i]).cos()).abs())
            .fold(0.0, f64::max)
    };
    let order = (err(0.02) / err(0.01)).log2();
    assert!((3.7..4.4).contains(&order), "observed order {order}");
}

#[test]
fn library_sizes_follow_the_binomial_count() {
    let binom = |n: u64, k: u64| (1..=k).fold(1u64, |acc, i| acc * (n + 1 - i) / i);
    for n in 1..=4usize {
        for d in 1..=5u32 {
            let lib = FeatureLibrary::new(n, d, false).unwrap();
            assert_eq!(lib.p() as u64, binom(n as u64 + d as u64, d as u64));
        }
    }
    assert_eq!(FeatureLibrary::new(2, 5, true).unwrap().p(), 24);
    assert_eq!(FeatureLibrary::new(3, 5, false).unwrap().p(), 56);
    assert_eq!(FeatureLibrary::new(2, 5, false).unwrap().p(), 21);
}
