//! Independent numerical oracles shared by the integration tests.

#![allow(dead_code)]

use std::f64::consts::PI;

use rand::Rng;
use semistatic_vem::consistency::{BetaState, EStepWeights, MixtureParams};
use semistatic_vem::factors::{
    Factor, FactorKind, LandmarkKey, MixtureTerm, Mode, PoseNoise, VariableSet,
};
use semistatic_vem::geom::{Point2, Pose2};

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Tanh-sinh quadrature over `(0, 1)` of an integrand given in factored
/// form: `f(ln v, ln(1 - v))` returns `(g, l)` with integrand `g · e^l`.
///
/// Working with logarithms keeps nodes that sit far closer to the endpoints
/// than `f64` can resolve, so integrable endpoint singularities such as
/// `v^{-0.9}` are handled. The step is halved until successive estimates
/// agree to `tol`.
pub fn tanh_sinh<F: Fn(f64, f64) -> (f64, f64)>(f: F, tol: f64) -> f64 {
    let t_max = 8.0;
    let eval = |t: f64| {
        let u = 0.5 * PI * t.sinh();
        let ln_v = -softplus(-2.0 * u);
        let ln_w = -softplus(2.0 * u);
        // dv/dt = (π/4) cosh t sech²u
        let ln_sech = std::f64::consts::LN_2 - u.abs() - softplus(-2.0 * u.abs());
        let ln_weight = (0.25 * PI).ln() + t.cosh().ln() + 2.0 * ln_sech;
        let (g, l) = f(ln_v, ln_w);
        if g == 0.0 {
            0.0
        } else {
            g * (l + ln_weight).exp()
        }
    };
    let mut h = 0.25;
    let mut sum = eval(0.0);
    let mut k = 1;
    while (k as f64) * h <= t_max {
        let t = k as f64 * h;
        sum += eval(t) + eval(-t);
        k += 1;
    }
    let mut estimate = sum * h;
    for _ in 0..10 {
        h *= 0.5;
        let mut k = 1;
        while (k as f64) * h <= t_max {
            let t = k as f64 * h;
            sum += eval(t) + eval(-t);
            k += 2;
        }
        let next = sum * h;
        if (next - estimate).abs() <= tol * next.abs().max(1.0) {
            return next;
        }
        estimate = next;
    }
    estimate
}

pub fn ln_beta_fn(a: f64, b: f64) -> f64 {
    statrs::function::gamma::ln_gamma(a) + statrs::function::gamma::ln_gamma(b)
        - statrs::function::gamma::ln_gamma(a + b)
}

/// `E_{Beta(a,b)}[g(ln v, ln(1 - v))]` by quadrature.
pub fn beta_expectation<G: Fn(f64, f64) -> f64>(a: f64, b: f64, g: G) -> f64 {
    let lb = ln_beta_fn(a, b);
    tanh_sinh(
        |ln_v, ln_w| (g(ln_v, ln_w), (a - 1.0) * ln_v + (b - 1.0) * ln_w - lb),
        1e-14,
    )
}

/// Digamma through `-γ + ∫₀¹ (1 - t^{x-1}) / (1 - t) dt`, shifted with
/// `ψ(x) = ψ(x + 1) - 1/x` below 1 where the integrand is unbounded.
pub fn digamma_integral(x: f64) -> f64 {
    if x < 1.0 {
        return digamma_integral(x + 1.0) - 1.0 / x;
    }
    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
    -EULER_GAMMA + tanh_sinh(|ln_t, ln_w| (-((x - 1.0) * ln_t).exp_m1(), -ln_w), 1e-15)
}

/// Central-difference Jacobian of `f` with respect to an additive
/// perturbation of `x`.
pub fn central_difference<F: Fn(&[f64]) -> Vec<f64>>(f: F, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let m = f(x).len();
    let mut jac = vec![vec![0.0; x.len()]; m];
    for j in 0..x.len() {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let (fp, fm) = (f(&xp), f(&xm));
        for i in 0..m {
            jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

/// Least-squares rigid transform `T` minimizing `Σ ‖T a_i - b_i‖²`.
pub fn fit_rigid(a: &[Point2], b: &[Point2]) -> Pose2 {
    let ca = Point2::centroid(a).unwrap();
    let cb = Point2::centroid(b).unwrap();
    let (mut s_cos, mut s_sin) = (0.0, 0.0);
    for (p, q) in a.iter().zip(b) {
        let (p, q) = (*p - ca, *q - cb);
        s_cos += p.x * q.x + p.y * q.y;
        s_sin += p.x * q.y - p.y * q.x;
    }
    let theta = s_sin.atan2(s_cos);
    let rotated = Pose2::new(0.0, 0.0, theta).apply(ca);
    Pose2::from_parts(cb - rotated, theta)
}

fn random_pose<R: Rng>(rng: &mut R) -> Pose2 {
    Pose2::new(
        rng.random_range(-10.0..10.0),
        rng.random_range(-10.0..10.0),
        rng.random_range(-PI..PI),
    )
}

fn random_point<R: Rng>(rng: &mut R) -> Point2 {
    Point2::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0))
}

/// A random factor of `kind` together with values for all its variables.
pub fn random_factor<R: Rng>(kind: FactorKind, rng: &mut R) -> (Factor, VariableSet) {
    let key = LandmarkKey::new(0, 0);
    let mut vars = VariableSet::default();
    vars.window_poses = vec![(0, random_pose(rng)), (1, random_pose(rng))];
    vars.landmarks.insert(key, random_point(rng));
    vars.objects.insert(0, random_pose(rng));
    let factor = match kind {
        FactorKind::Odometry => {
            // Keep the angular residual away from the wrap-around.
            let (p, c) = (vars.window_poses[0].1, vars.window_poses[1].1);
            let noise = Pose2::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-2.5..2.5),
            );
            let meas = c.compose(&p.inverse()).inverse().compose(&noise);
            Factor::Odometry {
                prev: 0,
                curr: 1,
                meas,
                noise: PoseNoise::default(),
            }
        }
        FactorKind::Rigid => Factor::Rigid {
            landmark: key,
            template: random_point(rng),
            sigma: rng.random_range(0.005..0.5),
        },
        FactorKind::LandmarkPrior => Factor::LandmarkPrior {
            landmark: key,
            previous: random_point(rng),
            sigma: rng.random_range(0.05..2.0),
        },
        FactorKind::LandmarkMeasurement => {
            let params =
                MixtureParams::new(rng.random_range(0.01..0.5), rng.random_range(1.0..10.0), 2)
                    .unwrap();
            let prior =
                BetaState::new(rng.random_range(0.1..20.0), rng.random_range(0.1..20.0)).unwrap();
            let w = rng.random_range(0.0..1.0);
            let mode = if rng.random_bool(0.8) {
                Mode::Static
            } else {
                Mode::Changed
            };
            let mixture =
                MixtureTerm::new(params, &prior, semistatic_vem::factors::Gating::ExpectedV)
                    .with_weights(
                        EStepWeights {
                            w_static: w,
                            w_changed: 1.0 - w,
                        },
                        mode,
                    );
            Factor::LandmarkMeasurement {
                frame: 1,
                landmark: key,
                obs: random_point(rng),
                mixture,
            }
        }
    };
    (factor, vars)
}

/// Relative Frobenius error between the analytic whitened Jacobian of `f`
/// and a central-difference estimate. Exact zero Jacobians must match exactly.
pub fn jacobian_error(f: &Factor, vars: &VariableSet) -> f64 {
    let keys = f.variables();
    let analytic = f.jacobians(vars).unwrap();
    let s = f.sqrt_information();
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (key, block) in &analytic {
        assert!(keys.contains(key));
        let dim = key.dim();
        let whitened = |delta: &[f64]| {
            let mut v = vars.clone();
            v.retract(*key, delta);
            f.residual(&v)
                .unwrap()
                .component_mul(&s)
                .iter()
                .copied()
                .collect::<Vec<f64>>()
        };
        let fd = central_difference(whitened, &vec![0.0; dim], 1e-6);
        for (i, row) in fd.iter().enumerate() {
            for (j, x) in row.iter().enumerate() {
                let a = block[(i, j)] * s[i];
                diff += (a - x).powi(2);
                norm += x * x;
            }
        }
    }
    if norm == 0.0 {
        diff.sqrt()
    } else {
        (diff / norm).sqrt()
    }
}
