use mcssl::theory::*;
use mcssl::{Exec, Rng};
use nalgebra::DVector;

#[test]
fn closed_form_matches_direct_solve() {
    let report = verify_linear_gaussian(100, &[0.0, 0.1, 1.0, 10.0, 100.0], 1e8, &Rng::new(7), Exec::Parallel).unwrap();
    for row in &report.rows {
        assert!(row.condition < 1e6, "instance {} condition {}", row.instance, row.condition);
    }
    assert!(report.max_relative_gap < 1e-10, "{}", report.max_relative_gap);
    assert!(report.ols_gap < 1e-10);
    assert!(report.limit_beta2_norm < 1e-4, "{}", report.limit_beta2_norm);
    assert!(report.limit_beta1_gap < 1e-4, "{}", report.limit_beta1_gap);
}

#[test]
fn numeric_minimizer_beats_perturbations() {
    let mut r = Rng::new(21);
    for _ in 0..10 {
        let inst = LGInstance::random_well_conditioned(3, 2, WELL_CONDITIONED, &mut r).unwrap();
        let lambda = 2.5;
        let (b1, b2) = lg_numeric_min(&inst, lambda).unwrap();
        let best = inst.objective(lambda, &b1, &b2);
        for _ in 0..100 {
            let p1 = &b1 + DVector::from_fn(3, |_, _| 1e-3 * r.normal());
            let p2 = &b2 + DVector::from_fn(2, |_, _| 1e-3 * r.normal());
            assert!(inst.objective(lambda, &p1, &p2) >= best - 1e-12);
        }
    }
}

#[test]
fn refined_coefficients_shrink_with_lambda() {
    // Monotone in the conditional-covariance metric and in the penalty itself;
    // the plain Euclidean norm need not be when the two blocks do not commute.
    let mut r = Rng::new(4);
    for _ in 0..20 {
        let inst = LGInstance::random_well_conditioned(4, 2, WELL_CONDITIONED, &mut r).unwrap();
        let (mut prev_metric, mut prev_penalty) = (f64::INFINITY, f64::INFINITY);
        for lambda in [0.0, 0.1, 1.0, 10.0, 100.0, 1e4] {
            let b2 = lg_closed_form(&inst, lambda).unwrap().1;
            let metric = (b2.transpose() * &inst.s2_1 * &b2)[(0, 0)];
            let penalty = (b2.transpose() * &inst.c * &b2)[(0, 0)];
            assert!(metric <= prev_metric * (1.0 + 1e-9), "{metric} after {prev_metric} at {lambda}");
            assert!(penalty <= prev_penalty * (1.0 + 1e-9), "{penalty} after {prev_penalty} at {lambda}");
            (prev_metric, prev_penalty) = (metric, penalty);
        }
    }
}

#[test]
fn commuting_blocks_shrink_in_euclidean_norm() {
    let s = nalgebra::DMatrix::from_row_slice(
        4,
        4,
        &[1.0, 0.0, 0.5, 0.0, 0.0, 1.0, 0.0, 0.3, 0.5, 0.0, 1.0, 0.0, 0.0, 0.3, 0.0, 1.0],
    );
    let inst = LGInstance::new(s, 2, DVector::from_vec(vec![1.0, 1.0, -2.0, 3.0]), 1.0).unwrap();
    let mut prev = f64::INFINITY;
    for lambda in [0.0, 0.1, 1.0, 10.0, 100.0, 1e4] {
        let n = lg_closed_form(&inst, lambda).unwrap().1.norm();
        assert!(n < prev);
        prev = n;
    }
}

#[test]
fn two_sample_estimator_is_unbiased() {
    let rep = verify_unbiasedness(6, 100_000, &Rng::new(1), Exec::Parallel).unwrap();
    assert!(rep.two_sample_z().abs() < 4.0, "{rep:?}");
    assert!(rep.single_bias_z().abs() < 4.0, "{rep:?}");
    // The single-sample bias is large relative to its own noise.
    assert!(rep.single_sample_mean - rep.target > 10.0 * rep.single_sample_se);
}

#[test]
fn degenerate_sampler_is_exact() {
    let mu = DVector::from_vec(vec![1.0, -2.0, 0.5]);
    let u = DVector::from_vec(vec![0.0, 1.0, 1.0]);
    let rep = verify_unbiasedness_with(&u, &Sampler::degenerate(mu.clone()), 100, &Rng::new(2), Exec::Sequential).unwrap();
    let target = (&u - &mu).norm_squared();
    assert!((rep.two_sample_mean - target).abs() < 1e-12);
    assert_eq!(rep.two_sample_se, 0.0);
    assert!(rep.passes(3.0));
}

#[test]
fn centered_case_averages_to_zero() {
    let mut r = Rng::new(3);
    let s = Sampler::random(4, &mut r);
    let rep = verify_unbiasedness_with(&s.mean.clone(), &s, 50_000, &Rng::new(5), Exec::Parallel).unwrap();
    assert_eq!(rep.target, 0.0);
    assert!(rep.two_sample_z().abs() < 3.0, "{rep:?}");
    assert!(rep.single_bias_z().abs() < 3.0, "{rep:?}");
}

#[test]
fn excess_risk_bound_holds_everywhere() {
    let rep = verify_excess_risk_bound(1000, &Rng::new(9), Exec::Parallel);
    assert!(rep.passed(), "{:?}", rep.violations);
    assert_eq!(rep.zero_risk_checked, 250);
    assert!(rep.max_ratio <= 1.0 + 1e-12);
}

#[test]
fn exact_fine_predictor_reduces_to_violation_bound() {
    let mut r = Rng::new(10);
    for _ in 0..200 {
        let t = DiscreteInstance::random(&mut r, PredictorKind::ExactFine).terms();
        assert_eq!(t.fine_risk, 0.0);
        assert!(t.coarse_error <= 2.0 * t.violation * (1.0 + 1e-12) + 1e-15);
    }
}

#[test]
fn bound_is_tight_for_some_instance() {
    // Independent check that the enumerated quantities are not trivially small:
    // with a fine predictor equal to E[Y|F2] and coarse predictor equal to its
    // own conditional mean, all three terms vanish together.
    let mut r = Rng::new(11);
    let mut inst = DiscreteInstance::random(&mut r, PredictorKind::ExactFine);
    inst.coarse = inst.conditional(&inst.m2);
    let t = inst.terms();
    assert!(t.coarse_error < 1e-24 && t.violation < 1e-24 && t.fine_risk == 0.0);
}
