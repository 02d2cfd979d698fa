use couplab::couplings::{
    couple_forced, couple_girsanov_tt, couple_synchronous, coupling_time_tail, entropy_bound,
    CouplingRun, EtaSchedule,
};
use couplab::sde::{simulate, Diffusion, DiffusionSpec, Drift, Record, StepGrid};
use couplab::stats::MeanSe;
use proptest::prelude::*;

fn ou() -> DiffusionSpec {
    DiffusionSpec::ou(1)
}

fn sin_diffusion() -> DiffusionSpec {
    DiffusionSpec::new(
        1,
        Drift::ou(1, 1.0),
        Diffusion::from_id("diag_sin", 1).unwrap(),
    )
    .unwrap()
}

fn weighted_mean(run: &CouplingRun, f: impl Fn(f64) -> f64) -> MeanSe {
    let v: Vec<f64> = run
        .valid_paths()
        .map(|i| run.weight(i) * f(run.y_terminal(i)[0]))
        .collect();
    MeanSe::of(&v)
}

fn plain_mean(spec: &DiffusionSpec, y0: f64, grid: StepGrid, n: usize, seed: u64, f: impl Fn(f64) -> f64) -> MeanSe {
    let b = simulate(spec, &[y0], grid, n, seed, Record::Terminal).unwrap();
    let v: Vec<f64> = b.terminals().map(|x| f(x[0])).collect();
    MeanSe::of(&v)
}

#[test]
fn eta_identity_over_a_grid_of_constants() {
    for k in [-2.0, -1.0, -0.3, 0.0, 1e-9, 0.5, 1.0] {
        for t in [0.25, 1.0, 3.0] {
            let s = EtaSchedule::new(k, t, 1.7, None);
            assert!((s.closing_integral() - 1.7).abs() < 1e-8, "K={k} t={t}");
        }
    }
}

#[test]
fn synchronous_ou_contracts() {
    let g = StepGrid::new(1e-3, 2.0).unwrap();
    let run = couple_synchronous(&ou(), &[0.0], &[1.0], g, 200, 3, Record::Terminal).unwrap();
    let msq: f64 = (0..200)
        .map(|i| (run.x_terminal(i)[0] - run.y_terminal(i)[0]).powi(2))
        .sum::<f64>()
        / 200.0;
    assert!(msq <= (-4f64).exp() * (1.0 + 10.0 * g.h), "{msq}");
}

#[test]
fn forced_coupling_closes_the_gap() {
    let g = StepGrid::new(1e-3, 1.0).unwrap();
    for spec in [DiffusionSpec::brownian(1), ou()] {
        let run = couple_forced(&spec, &[0.0], &[1.0], g, 2000, 11, Record::Terminal).unwrap();
        assert!(run.coupling_fraction() >= 0.99, "{}", run.coupling_fraction());
        let w = run.mean_weight();
        assert!((w.mean - 1.0).abs() <= 4.0 * w.se, "{w:?}");
        let tail = coupling_time_tail(&run, &[1.0]);
        assert!(tail[0].tail <= 0.01);
        // log E R² against the exponential moment bound used for p = 2
        let k = spec.k_drift;
        let bound = if k.abs() < 1e-8 { 2.0 } else { 2.0 * k / -(-k).exp_m1() };
        let m2 = run.weight_moment(2.0);
        assert!(m2.mean.ln() <= bound, "{} vs {bound}", m2.mean.ln());
    }
}

#[test]
fn girsanov_entropy_respects_the_bound() {
    let g = StepGrid::new(1e-3, 1.0).unwrap();
    let spec = ou();
    let run = couple_girsanov_tt(&spec, &[0.0], &[1.0], g, 4000, 5, Record::Terminal).unwrap();
    let e = run.entropy();
    let bound = entropy_bound(spec.k_augmented, spec.lambda, 1.0, 1.0);
    assert!((bound - 1.0 / (2f64.exp() - 1.0)).abs() < 1e-12);
    assert!(e.mean <= bound + 3.0 * e.se, "{e:?} vs {bound}");
    assert!(run.weighted_uncoupled_fraction() <= 0.01);
    let w = run.mean_weight();
    assert!((w.mean - 1.0).abs() <= 4.0 * w.se);
}

#[test]
fn weighted_marginals_match_plain_simulation() {
    let g = StepGrid::new(2e-3, 1.0).unwrap();
    let battery: [fn(f64) -> f64; 3] = [|y| y.tanh(), |y| (2.0 * y).cos(), |y| (-y * y).exp()];
    let cases = [
        couple_forced(&ou(), &[0.0], &[1.0], g, 4000, 21, Record::Terminal).unwrap(),
        couple_girsanov_tt(&ou(), &[0.0], &[1.0], g, 4000, 22, Record::Terminal).unwrap(),
        couple_girsanov_tt(&sin_diffusion(), &[0.0], &[0.8], g, 4000, 23, Record::Terminal).unwrap(),
    ];
    for run in &cases {
        for f in battery {
            let a = weighted_mean(run, f);
            let b = plain_mean(&run.spec, run.y0[0], g, 4000, 99, f);
            let se = (a.se * a.se + b.se * b.se).sqrt();
            assert!((a.mean - b.mean).abs() <= 4.0 * se, "{:?}: {a:?} vs {b:?}", run.construction);
        }
    }
}

#[test]
fn coupling_bound_dominates_test_function_gaps() {
    let g = StepGrid::new(2e-3, 1.0).unwrap();
    let f = |y: f64| y.tanh();
    let osc = 2.0;
    for run in [
        couple_forced(&ou(), &[0.0], &[1.0], g, 3000, 4, Record::Terminal).unwrap(),
        couple_synchronous(&DiffusionSpec::brownian(1), &[0.0], &[1.0], g, 3000, 4, Record::Terminal).unwrap(),
    ] {
        // the unweighted pair is a coupling of its own two marginals
        let tail = coupling_time_tail(&run, &[1.0])[0];
        let xs: Vec<f64> = run.valid_paths().map(|i| f(run.x_terminal(i)[0])).collect();
        let ys: Vec<f64> = run.valid_paths().map(|i| f(run.y_terminal(i)[0])).collect();
        let gap = MeanSe::paired_difference(&xs, &ys);
        assert!(gap.mean.abs() <= osc * (tail.tail + 3.0 * tail.se) + 3.0 * gap.se);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn glue_discipline(
        x in -2.0f64..2.0,
        y in -2.0f64..2.0,
        seed in any::<u64>(),
        which in 0usize..3,
    ) {
        let g = StepGrid::new(0.01, 1.0).unwrap();
        let spec = ou();
        let run = match which {
            0 => couple_synchronous(&spec, &[x], &[y], g, 16, seed, Record::Full),
            1 => couple_forced(&spec, &[x], &[y], g, 16, seed, Record::Full),
            _ => couple_girsanov_tt(&spec, &[x], &[y], g, 16, seed, Record::Full),
        }
        .unwrap();
        prop_assert!(run.glue_holds());
        if which > 0 {
            prop_assert!(run.coupling_step.iter().all(|c| c.is_some()));
        }
    }

    #[test]
    fn identical_seeds_identical_runs(seed in any::<u64>()) {
        let g = StepGrid::new(0.01, 0.5).unwrap();
        let a = couple_forced(&ou(), &[0.0], &[1.0], g, 8, seed, Record::Terminal).unwrap();
        let b = couple_forced(&ou(), &[0.0], &[1.0], g, 8, seed, Record::Terminal).unwrap();
        prop_assert_eq!(a.weights_csv(), b.weights_csv());
    }
}
