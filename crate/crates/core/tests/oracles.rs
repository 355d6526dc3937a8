mod common;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semistatic_vem::consistency::{
    beta_kl, digamma, e_step_weights, elbo_landmark, gaussian_log_density, uniform_log_density,
    BetaState, MixtureParams,
};
use semistatic_vem::factors::{max_mixture_select, FactorKind, Mode};
use semistatic_vem::geom::Point2;

#[test]
fn digamma_matches_integral_representation() {
    for &x in &[0.05, 0.3, 0.5, 1.0, 1.5, 2.0, 3.3, 7.0, 12.5, 40.0, 100.0] {
        let exact = common::digamma_integral(x);
        let got = digamma(x).unwrap();
        assert!(
            (got - exact).abs() < 1e-10 * exact.abs().max(1.0),
            "x={x}: {got} vs {exact}"
        );
    }
}

#[test]
fn beta_kl_matches_quadrature() {
    let states = [
        (1.0, 1.0),
        (0.5, 2.0),
        (3.0, 0.7),
        (20.0, 4.0),
        (50.0, 50.0),
    ];
    for &(aq, bq) in &states {
        for &(ap, bp) in &states {
            let q = BetaState::new(aq, bq).unwrap();
            let p = BetaState::new(ap, bp).unwrap();
            let cross = common::beta_expectation(aq, bq, |lv, lw| (aq - ap) * lv + (bq - bp) * lw);
            let exact = cross - common::ln_beta_fn(aq, bq) + common::ln_beta_fn(ap, bp);
            assert_abs_diff_eq!(beta_kl(&q, &p), exact, epsilon = 1e-8);
        }
    }
}

#[test]
fn responsibility_at_zero_residual_is_logistic_in_density_gap() {
    let p = MixtureParams::new(0.1, 10.0, 2).unwrap();
    let w = e_step_weights(Point2::ORIGIN, &p, &BetaState::default());
    let gap = -(2.0 * std::f64::consts::PI * 0.01f64).ln() + 10f64.ln();
    assert_abs_diff_eq!(w.w_static, 1.0 / (1.0 + (-gap).exp()), epsilon = 1e-14);
}

#[test]
fn large_residual_is_changed() {
    let p = MixtureParams::default();
    let w = e_step_weights(Point2::new(2.0, 0.0), &p, &BetaState::default());
    assert!(w.w_changed > 0.99);
    let far = e_step_weights(Point2::new(1e3 * p.sigma, 0.0), &p, &BetaState::default());
    assert!(far.w_static.is_finite() && far.w_changed == 1.0);
}

#[test]
fn half_weights_at_unit_scale() {
    let p = MixtureParams::new(1.0, 1.0, 2).unwrap();
    let w = semistatic_vem::consistency::EStepWeights {
        w_static: 0.5,
        w_changed: 0.5,
    };
    assert_abs_diff_eq!(
        elbo_landmark(Point2::ORIGIN, &p, &w),
        -0.5 * (2.0 * std::f64::consts::PI).ln(),
        epsilon = 1e-15
    );
}

#[test]
fn max_mixture_rejects_half_metre_residual() {
    let p = MixtureParams::new(0.1, 10.0, 2).unwrap();
    assert_eq!(
        max_mixture_select(Point2::new(0.3, 0.4), &BetaState::default(), &p),
        Mode::Changed
    );
    let sure = BetaState::new(1e9, 1.0).unwrap();
    assert_eq!(max_mixture_select(Point2::ORIGIN, &sure, &p), Mode::Static);
}

fn beta_params() -> impl Strategy<Value = (f64, f64)> {
    (0.05f64..60.0, 0.05f64..60.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn expected_logs_match_quadrature((a, b) in beta_params()) {
        let s = BetaState::new(a, b).unwrap();
        let lv = common::beta_expectation(a, b, |lv, _| lv);
        let lw = common::beta_expectation(a, b, |_, lw| lw);
        prop_assert!((s.expected_log_v() - lv).abs() < 1e-8);
        prop_assert!((s.expected_log_1mv() - lw).abs() < 1e-8);
    }

    #[test]
    fn landmark_bound_never_exceeds_marginal(
        (a, b) in beta_params(),
        sigma in 0.01f64..1.0,
        e_max in 0.5f64..20.0,
        r in 0.0f64..8.0,
        phi in 0.0f64..std::f64::consts::TAU,
    ) {
        let p = MixtureParams::new(sigma, e_max, 2).unwrap();
        let s = BetaState::new(a, b).unwrap();
        let e = Point2::new(r * sigma * phi.cos(), r * sigma * phi.sin());
        let w = e_step_weights(e, &p, &s);
        let bound = w.w_static * s.expected_log_v()
            + w.w_changed * s.expected_log_1mv()
            + elbo_landmark(e, &p, &w)
            + w.entropy();
        let n = gaussian_log_density(e, &p).exp();
        let u = uniform_log_density(&p).exp();
        let marginal = common::beta_expectation(a, b, |lv, lw| lv.exp() * n + lw.exp() * u).ln();
        prop_assert!(bound <= marginal + 1e-6, "bound {} > log marginal {}", bound, marginal);
    }

    #[test]
    fn weights_sum_to_one(
        (a, b) in beta_params(),
        sigma in 1e-3f64..2.0,
        ex in -1e3f64..1e3,
        ey in -1e3f64..1e3,
    ) {
        let p = MixtureParams::new(sigma, 5.0, 2).unwrap();
        let w = e_step_weights(Point2::new(ex * sigma, ey * sigma), &p, &BetaState::new(a, b).unwrap());
        prop_assert!((w.w_static + w.w_changed - 1.0).abs() < 1e-12);
        prop_assert!(w.w_static >= 0.0 && w.w_changed >= 0.0);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_diagonal((a, b) in beta_params(), (c, d) in beta_params()) {
        let q = BetaState::new(a, b).unwrap();
        let p = BetaState::new(c, d).unwrap();
        prop_assert!(beta_kl(&q, &p) >= -1e-12);
        prop_assert!(beta_kl(&q, &q).abs() < 1e-12);
    }

    #[test]
    fn analytic_jacobians_match_finite_differences(seed in any::<u64>(), k in 0usize..4) {
        let kind = [
            FactorKind::Odometry,
            FactorKind::Rigid,
            FactorKind::LandmarkPrior,
            FactorKind::LandmarkMeasurement,
        ][k];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, vars) = common::random_factor(kind, &mut rng);
        let err = common::jacobian_error(&f, &vars);
        prop_assert!(err < 1e-5, "{:?}: {}", kind, err);
    }
}
