use couplab::estimators::TestFunction;
use couplab::jumps::{
    alpha_rate_check, bernstein_alpha, jump_derivative, jump_fd_oracle, no_jump_row, simulate_jump,
    tv_decay_experiment, Bernstein, Flow, JumpDensity, JumpSpec, StableSurrogate,
};
use couplab::quadrature::integrate;
use couplab::sde::Record;
use couplab::stats::MeanSe;
use proptest::prelude::*;
use statrs::function::beta::beta;
use statrs::function::gamma::gamma;

fn gauss() -> JumpDensity {
    JumpDensity::Gaussian { sigma: 1.0 }
}

#[test]
fn jump_counts_are_poisson() {
    let spec = JumpSpec::scalar(0.0, gauss(), 1.3).unwrap();
    let b = simulate_jump(&spec, &[0.0], 1.5, 20_000, 3, Record::Terminal).unwrap();
    assert!(no_jump_row(&b).passed());
    let n: Vec<f64> = b.counts.iter().map(|&c| c as f64).collect();
    let m = MeanSe::of(&n);
    let lam = 1.3 * 1.5;
    assert!((m.mean - lam).abs() <= 4.0 * m.se, "{m:?}");
    let var = n.iter().map(|v| (v - m.mean).powi(2)).sum::<f64>() / (n.len() - 1) as f64;
    assert!((var - lam).abs() < 0.1 * lam, "{var}");
}

#[test]
fn compound_poisson_moments() {
    let spec = JumpSpec::scalar(0.0, JumpDensity::Gaussian { sigma: 0.5 }, 2.0).unwrap();
    let b = simulate_jump(&spec, &[0.4], 2.0, 20_000, 5, Record::Terminal).unwrap();
    let x: Vec<f64> = b.terminals().map(|z| z[0]).collect();
    let m = MeanSe::of(&x);
    assert!((m.mean - 0.4).abs() <= 4.0 * m.se);
    let var = x.iter().map(|v| (v - m.mean).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
    // λ t σ²
    assert!((var - 1.0).abs() < 0.05, "{var}");
}

#[test]
fn ou_flow_moments() {
    let spec = JumpSpec::scalar(-1.0, gauss(), 1.0).unwrap();
    let t = 1.0;
    let b = simulate_jump(&spec, &[2.0], t, 20_000, 9, Record::Full).unwrap();
    let x: Vec<f64> = b.terminals().map(|z| z[0]).collect();
    let m = MeanSe::of(&x);
    assert!((m.mean - 2.0 * (-t).exp()).abs() <= 4.0 * m.se);
    let var = x.iter().map(|v| (v - m.mean).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
    let exact = 0.5 * (1.0 - (-2.0 * t).exp());
    assert!((var - exact).abs() < 0.05 * exact, "{var} vs {exact}");
    // skeleton reproduces the terminal
    for p in 0..50 {
        let mut y = 2.0 * (-t).exp();
        for (tau, xi) in b.jump_times(p).iter().zip(b.jump_sizes(p)) {
            assert!((0.0..=t).contains(tau));
            y += (-(t - tau)).exp() * xi;
        }
        assert!((y - b.terminal(p)[0]).abs() < 1e-12);
    }
}

#[test]
fn general_flow_agrees_with_scalar() {
    let a = JumpSpec::scalar(-0.5, gauss(), 1.0).unwrap();
    let m = nalgebra::DMatrix::from_element(1, 1, -0.5);
    let b = JumpSpec::new(1, Flow::General(m), gauss(), 1.0, None).unwrap();
    let pa = simulate_jump(&a, &[1.0], 1.0, 200, 4, Record::Terminal).unwrap();
    let pb = simulate_jump(&b, &[1.0], 1.0, 200, 4, Record::Terminal).unwrap();
    for (u, v) in pa.terminals().zip(pb.terminals()) {
        assert!((u[0] - v[0]).abs() < 1e-12);
    }
}

#[test]
fn flow_is_linear() {
    let rot = nalgebra::DMatrix::from_row_slice(2, 2, &[-0.3, 1.0, -1.0, -0.2]);
    let f = Flow::General(rot);
    let (u, v) = ([0.3, -0.7], [1.1, 0.4]);
    let mut fu = [0.0; 2];
    let mut fv = [0.0; 2];
    let mut fw = [0.0; 2];
    f.apply(0.8, &u, false, &mut fu);
    f.apply(0.8, &v, false, &mut fv);
    f.apply(0.8, &[2.0 * u[0] - v[0], 2.0 * u[1] - v[1]], false, &mut fw);
    for i in 0..2 {
        assert!((fw[i] - (2.0 * fu[i] - fv[i])).abs() < 1e-12);
    }
    // <e^{As}u, v> = <u, e^{Aᵀs}v>
    let mut tv = [0.0; 2];
    f.apply(0.8, &v, true, &mut tv);
    let l = fu[0] * v[0] + fu[1] * v[1];
    let r = u[0] * tv[0] + u[1] * tv[1];
    assert!((l - r).abs() < 1e-12);
}

/// `∇P¹f(x)` for Gaussian jumps and `A = 0`: conditionally on `N = n >= 1`
/// the terminal is `x + σ√n Z`.
fn gaussian_series_gradient(f: &TestFunction, x: f64, lambda_t: f64, sigma: f64) -> f64 {
    let mut total = 0.0;
    let mut pn = (-lambda_t).exp();
    for n in 1..80 {
        pn *= lambda_t / n as f64;
        let s = sigma * (n as f64).sqrt();
        let g = integrate(
            |z| {
                let mut d = [0.0];
                f.gradient(&[x + s * z], &mut d);
                d[0] * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
            },
            -12.0,
            12.0,
            1e-13,
            1e-12,
            400,
        );
        total += pn * g.value;
    }
    total
}

#[test]
fn derivative_formula_matches_series_oracle() {
    let spec = JumpSpec::scalar(0.0, gauss(), 1.0).unwrap();
    for id in ["bump:0.8", "smooth_step:0:0.5"] {
        let f = TestFunction::from_id(id, 1).unwrap();
        let exact = gaussian_series_gradient(&f, 0.3, 1.0, 1.0);
        let r = &jump_derivative(&spec, &[0.3], &f, 1.0, 40_000, 17).unwrap()[0];
        assert!((r.estimate - exact).abs() <= 4.0 * r.std_error, "{id}: {} vs {exact} ± {}", r.estimate, r.std_error);
    }
}

#[test]
fn derivative_formula_agrees_with_finite_differences() {
    for rho in [gauss(), JumpDensity::CosSquared] {
        for a in [0.0, -1.0] {
            let spec = JumpSpec::scalar(a, rho, 1.0).unwrap();
            for id in ["bump:0.8", "smooth_step:0:0.5"] {
                let f = TestFunction::from_id(id, 1).unwrap();
                let est = &jump_derivative(&spec, &[0.3], &f, 1.0, 40_000, 31).unwrap()[0];
                let fd = &jump_fd_oracle(&spec, &[0.3], &f, 1.0, 40_000, 32, 0.02).unwrap()[0];
                let se = est.std_error.hypot(fd.report.std_error);
                let gap = (est.estimate - fd.report.estimate).abs();
                assert!(
                    gap <= 3.0 * se + fd.bias_budget,
                    "{} A={a} {id}: {} vs {} (se {se})",
                    rho.id(),
                    est.estimate,
                    fd.report.estimate
                );
            }
        }
    }
}

#[test]
fn derivative_of_constant_vanishes() {
    let spec = JumpSpec::scalar(-0.5, JumpDensity::CosSquared, 2.0).unwrap();
    let f = TestFunction::Constant(3.0);
    let r = &jump_derivative(&spec, &[0.0], &f, 1.0, 20_000, 8).unwrap()[0];
    assert_eq!(r.verdict.map(|v| v.0), Some(true));
}

#[test]
fn two_dimensional_derivative_is_per_coordinate() {
    let a = nalgebra::DMatrix::from_row_slice(2, 2, &[-0.5, 0.3, -0.3, -0.5]);
    let spec = JumpSpec::new(2, Flow::General(a), gauss(), 1.0, None).unwrap();
    let f = TestFunction::from_id("bump:1", 2).unwrap();
    let x = [0.2, -0.4];
    let est = jump_derivative(&spec, &x, &f, 1.0, 20_000, 41).unwrap();
    let fd = jump_fd_oracle(&spec, &x, &f, 1.0, 20_000, 42, 0.02).unwrap();
    assert_eq!(est.len(), 2);
    for (e, o) in est.iter().zip(&fd) {
        let se = e.std_error.hypot(o.report.std_error);
        assert!((e.estimate - o.report.estimate).abs() <= 3.0 * se + o.bias_budget);
    }
}

#[test]
fn unbounded_test_functions_are_rejected() {
    let spec = JumpSpec::scalar(0.0, gauss(), 1.0).unwrap();
    let f = TestFunction::from_id("projection", 1).unwrap();
    assert!(jump_derivative(&spec, &[0.0], &f, 1.0, 10, 1).is_err());
}

#[test]
fn tv_decay_smoke() {
    let spec = JumpSpec::scalar(0.0, gauss(), 1.0).unwrap();
    let grid = [2.0, 5.0, 20.0, 80.0];
    let r = tv_decay_experiment(&spec, 0.0, 1.0, &grid, 20_000, 6, Some((0.0, 1.0))).unwrap();
    assert!(r.sharp_case && !r.exploratory);
    assert!(r.lower_bound_rows().iter().all(|c| c.passed()));
    assert!(r.csv().starts_with("t,tv_hat,se,lower_bound\n"));
    assert_eq!(r.csv().lines().count(), grid.len() + 1);
    // narrow grids and early times are refused
    assert!(tv_decay_experiment(&spec, 0.0, 1.0, &[2.0, 20.0], 100, 6, None).is_err());
    assert!(tv_decay_experiment(&spec, 0.0, 1.0, &[1.5, 100.0], 100, 6, None).is_err());
}

#[test]
fn tv_decay_flags_failed_hypothesis() {
    let spec = JumpSpec::scalar(0.0, JumpDensity::CosSquared, 1.0).unwrap();
    let r = tv_decay_experiment(&spec, 0.0, 0.5, &[2.0, 100.0], 2_000, 6, Some((0.5, 0.6))).unwrap();
    assert!(r.exploratory);
    assert!(r.slope_rows().iter().all(|c| c.exploratory));
}

#[test]
fn surrogate_runs_are_exploratory() {
    let heavy = StableSurrogate { alpha: 1.5, c: 0.2 };
    assert!(heavy.check_horizon(100.0).is_err());
    let s = StableSurrogate { alpha: 0.5, c: 0.2 };
    let spec = JumpSpec::new(1, Flow::Zero, gauss(), 1.0, Some(s)).unwrap();
    let r = tv_decay_experiment(&spec, 0.0, 1.0, &[2.0, 100.0], 2_000, 6, None).unwrap();
    assert!(r.exploratory && !r.sharp_case);
}

#[test]
fn alpha_matches_gamma_and_beta_oracles() {
    for (beta_, c) in [(0.5, 1.0), (1.0, 2.0), (1.5, 0.3)] {
        let s = Bernstein::power_law(beta_, c).unwrap();
        for t in [0.2f64, 1.0, 7.0] {
            let exact = 2.0 * gamma(1.0 + 1.0 / beta_) / (t.powf(1.0 / beta_) * c.sqrt());
            let a = bernstein_alpha(&s, t).unwrap().value();
            assert!((a - exact).abs() <= 1e-8 * exact, "β={beta_} t={t}: {a} vs {exact}");
        }
    }
    for t in [0.75, 1.0, 3.0] {
        let exact = beta(0.5, t - 0.5);
        let a = bernstein_alpha(&Bernstein::Log1p, t).unwrap().value();
        assert!((a - exact).abs() <= 1e-8 * exact, "log1p t={t}: {a} vs {exact}");
    }
}

#[test]
fn alpha_rate_report() {
    let grid: Vec<f64> = (0..9).map(|k| 10f64.powf(-2.0 + 0.5 * k as f64)).collect();
    for b in [0.5, 1.0, 1.5] {
        let r = alpha_rate_check(b, 1.0, &grid).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.rows().iter().all(|c| c.passed()));
        assert!(r.csv().starts_with("t,alpha,rel_err\n"));
    }
    assert!(alpha_rate_check(2.0, 1.0, &grid).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn alpha_decreases_in_t(b in 0.2f64..1.9, t in 0.05f64..20.0, f in 1.01f64..4.0) {
        let s = Bernstein::power_law(b, 1.0).unwrap();
        prop_assert!(bernstein_alpha(&s, f * t).unwrap().value() < bernstein_alpha(&s, t).unwrap().value());
        let l = bernstein_alpha(&Bernstein::Log1p, 0.6 + t).unwrap().value();
        let l2 = bernstein_alpha(&Bernstein::Log1p, f * (0.6 + t)).unwrap().value();
        prop_assert!(l2 < l);
    }

    #[test]
    fn alpha_doubling_scales_by_power(b in 0.2f64..1.9, t in 0.05f64..20.0) {
        let s = Bernstein::power_law(b, 1.0).unwrap();
        let r = bernstein_alpha(&s, 2.0 * t).unwrap().value() / bernstein_alpha(&s, t).unwrap().value();
        prop_assert!((r - 2f64.powf(-1.0 / b)).abs() < 1e-8);
    }

    #[test]
    fn translation_invariance_without_drift(x in -2.0f64..2.0, seed in any::<u64>()) {
        let spec = JumpSpec::scalar(0.0, gauss(), 1.0).unwrap();
        let a = simulate_jump(&spec, &[0.0], 1.0, 32, seed, Record::Terminal).unwrap();
        let b = simulate_jump(&spec, &[x], 1.0, 32, seed, Record::Terminal).unwrap();
        for (u, v) in a.terminals().zip(b.terminals()) {
            prop_assert!((v[0] - u[0] - x).abs() < 1e-12);
        }
    }
}
