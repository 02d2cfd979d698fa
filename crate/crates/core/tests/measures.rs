use couplab::measures::{
    fkg_check, kantorovich_dual, monotone_map_1d, solve_transport, wasserstein_coupling_tv,
    wasserstein_lp, CostMatrix, CouplingMatrix, DiscreteMeasure,
};
use minilp::{ComparisonOp, OptimizationDirection, Problem};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn normalize(raw: Vec<f64>) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    let mut w: Vec<f64> = raw.iter().map(|x| x / s).collect();
    // push round-off into the largest entry so the sum is 1 to ~1e-16
    let err = 1.0 - w.iter().sum::<f64>();
    let k = (0..w.len()).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap();
    w[k] += err;
    w
}

fn labels(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("p{i}")).collect()
}

fn measure(raw: Vec<f64>) -> DiscreteMeasure {
    let l = labels(raw.len());
    let refs: Vec<&str> = l.iter().map(|s| s.as_str()).collect();
    DiscreteMeasure::with_labels(&refs, normalize(raw)).unwrap()
}

/// Independent LP oracle for the primal transport problem.
fn minilp_primal(mu: &DiscreteMeasure, nu: &DiscreteMeasure, cost: &CostMatrix, p: f64) -> f64 {
    let (n, m) = (mu.len(), nu.len());
    let mut pb = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<_> = (0..n * m)
        .map(|k| pb.add_var(cost.get(k / m, k % m).powf(p), (0.0, f64::INFINITY)))
        .collect();
    for i in 0..n {
        let row: Vec<_> = (0..m).map(|j| (vars[i * m + j], 1.0)).collect();
        pb.add_constraint(row.as_slice(), ComparisonOp::Eq, mu.weights()[i]);
    }
    for j in 0..m {
        let col: Vec<_> = (0..n).map(|i| (vars[i * m + j], 1.0)).collect();
        pb.add_constraint(col.as_slice(), ComparisonOp::Eq, nu.weights()[j]);
    }
    pb.solve().unwrap().objective()
}

fn weights(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n).prop_filter("non-zero", |v| v.iter().sum::<f64>() > 1e-3)
}

fn random_cost(n: usize, m: usize, rng: &mut ChaCha8Rng) -> CostMatrix {
    CostMatrix::new(n, m, (0..n * m).map(|_| rng.random_range(0.0..3.0)).collect()).unwrap()
}

/// Metric from random points in the plane.
fn random_metric(n: usize, rng: &mut ChaCha8Rng) -> CostMatrix {
    let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
    let entries = (0..n * n)
        .map(|k| {
            let (a, b) = (pts[k / n], pts[k % n]);
            ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
        })
        .collect();
    CostMatrix::metric(n, entries).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn strong_duality_and_independent_oracle(
        (a, b) in (1usize..=6, 1usize..=6).prop_flat_map(|(n, m)| (weights(n), weights(m))),
        seed in any::<u64>(),
        p in prop_oneof![Just(1.0), Just(2.0), 1.0f64..3.0],
    ) {
        let mu = measure(a);
        let nu = measure(b);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost = random_cost(mu.len(), nu.len(), &mut rng);
        let sol = solve_transport(&mu, &nu, &cost, p).unwrap();
        let (dual, cert) = kantorovich_dual(&mu, &nu, &cost, p).unwrap();
        prop_assert!(cert.is_feasible(&cost));
        prop_assert!(dual <= sol.cost_p + 1e-8);
        prop_assert!((sol.cost_p - dual).abs() <= 1e-8);
        let oracle = minilp_primal(&mu, &nu, &cost, p);
        prop_assert!((sol.cost_p - oracle).abs() <= 1e-7, "{} vs {}", sol.cost_p, oracle);
        let min_g = cert.g_values.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert!(min_g.abs() < 1e-12);
    }

    #[test]
    fn discrete_cost_equals_total_variation(
        (a, b) in (1usize..=6).prop_flat_map(|n| (weights(n), weights(n))),
        p in prop_oneof![Just(1.0), Just(2.0), 1.0f64..4.0],
    ) {
        let mu = measure(a);
        let nu = measure(b);
        let cost = CostMatrix::discrete(mu.len());
        let (w, _) = wasserstein_lp(&mu, &nu, &cost, p).unwrap();
        let (tv, plan) = wasserstein_coupling_tv(&mu, &nu).unwrap();
        prop_assert!((w.powf(p) - tv).abs() <= 1e-10);
        prop_assert!((w - tv.powf(1.0 / p)).abs() <= 1e-9);
        prop_assert!((plan.off_diagonal_mass() - tv).abs() <= 1e-10);
        prop_assert!((plan.transport_cost(&cost, 1.0).unwrap() - tv).abs() <= 1e-10);
        // sup_A |mu(A) - nu(A)| by enumerating subsets
        let n = mu.len();
        let brute = (0u32..(1 << n))
            .map(|mask| {
                (0..n)
                    .filter(|i| mask & (1 << i) != 0)
                    .map(|i| mu.weights()[i] - nu.weights()[i])
                    .sum::<f64>()
                    .abs()
            })
            .fold(0.0, f64::max);
        prop_assert!((brute - tv).abs() <= 1e-12);
    }

    #[test]
    fn any_coupling_costs_at_least_the_optimum(
        (a, b) in (2usize..=5, 2usize..=5).prop_flat_map(|(n, m)| (weights(n), weights(m))),
        seed in any::<u64>(),
        mix in 0.0f64..1.0,
    ) {
        let mu = measure(a);
        let nu = measure(b);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost = random_cost(mu.len(), nu.len(), &mut rng);
        let (w, opt) = wasserstein_lp(&mu, &nu, &cost, 1.0).unwrap();
        let prod = CouplingMatrix::product(&mu, &nu);
        // convex combinations of couplings are couplings
        let blend: Vec<f64> = prod
            .entries()
            .iter()
            .zip(opt.entries())
            .map(|(x, y)| mix * x + (1.0 - mix) * y)
            .collect();
        let blend = CouplingMatrix::new(blend, &mu, &nu).unwrap();
        prop_assert!(prod.transport_cost(&cost, 1.0).unwrap() >= w - 1e-10);
        prop_assert!(blend.transport_cost(&cost, 1.0).unwrap() >= w - 1e-10);
    }

    #[test]
    fn quantile_coupling_is_optimal_on_the_line(
        (a, b) in (1usize..=8, 1usize..=8).prop_flat_map(|(n, m)| (weights(n), weights(m))),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..a.len()).map(|i| i as f64 + rng.random_range(0.0..0.9)).collect();
        let ys: Vec<f64> = (0..b.len()).map(|i| 2.0 * i as f64 - 3.0 + rng.random::<f64>()).collect();
        let mu = DiscreteMeasure::on_line(&xs, normalize(a)).unwrap();
        let nu = DiscreteMeasure::on_line(&ys, normalize(b)).unwrap();
        let (_, cost2) = monotone_map_1d(&mu, &nu).unwrap();
        let cost = CostMatrix::euclidean(&mu, &nu).unwrap();
        let (w2, _) = wasserstein_lp(&mu, &nu, &cost, 2.0).unwrap();
        prop_assert!((cost2 - w2).abs() <= 1e-8, "{} vs {}", cost2, w2);
    }
}

#[test]
fn triangle_inequality_on_metric_costs() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..100 {
        let n = rng.random_range(2..=6);
        let cost = random_metric(n, &mut rng);
        let m: Vec<DiscreteMeasure> = (0..3)
            .map(|_| measure((0..n).map(|_| rng.random::<f64>() + 1e-3).collect()))
            .collect();
        for p in [1.0, 2.0, 3.0] {
            let d = |i: usize, j: usize| wasserstein_lp(&m[i], &m[j], &cost, p).unwrap().0;
            assert!(d(0, 2) <= d(0, 1) + d(1, 2) + 1e-8);
        }
    }
}

#[test]
fn seeded_five_by_five_duality_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mu = measure((0..5).map(|_| rng.random()).collect());
    let nu = measure((0..5).map(|_| rng.random()).collect());
    let cost = random_cost(5, 5, &mut rng);
    let sol = solve_transport(&mu, &nu, &cost, 1.0).unwrap();
    let (dual, _) = kantorovich_dual(&mu, &nu, &cost, 1.0).unwrap();
    assert!((sol.cost_p - dual).abs() <= 1e-8);
}

#[test]
fn tiny_weights_are_dropped_before_solving() {
    let mu = DiscreteMeasure::with_labels(&["a", "b", "c"], vec![0.5, 0.5 - 1e-16, 1e-16]).unwrap();
    let nu = DiscreteMeasure::with_labels(&["a", "b", "c"], vec![0.25, 0.25, 0.5]).unwrap();
    let cost = CostMatrix::discrete(3);
    let sol = solve_transport(&mu, &nu, &cost, 1.0).unwrap();
    assert!((sol.cost_p - 0.5).abs() < 1e-12);
    assert!(sol.certificate.is_feasible(&cost));
}

#[test]
fn fkg_holds_on_random_monotone_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let n = rng.random_range(1..=8);
        let xs: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let mu = DiscreteMeasure::on_line(&xs, normalize((0..n).map(|_| rng.random()).collect())).unwrap();
        let nu = DiscreteMeasure::on_line(&xs, normalize((0..n).map(|_| rng.random()).collect())).unwrap();
        let increasing = |rng: &mut ChaCha8Rng| {
            let mut acc = rng.random_range(-2.0..2.0);
            (0..n)
                .map(|_| {
                    acc += rng.random_range(0.0..1.0);
                    acc
                })
                .collect::<Vec<f64>>()
        };
        let f = increasing(&mut rng);
        let g = increasing(&mut rng);
        let out = fkg_check(&mu, &nu, &f, &g).unwrap();
        // direct evaluation of the double sum over the product coupling
        let mut direct = 0.0;
        for i in 0..n {
            for j in 0..n {
                direct += mu.weights()[i] * nu.weights()[j] * (f[i] - f[j]) * (g[i] - g[j]);
            }
        }
        assert!((out.lhs - out.rhs - direct).abs() < 1e-10);
        assert!(out.holds);
    }
}
