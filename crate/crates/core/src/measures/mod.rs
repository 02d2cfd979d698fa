//! Exact optimal transport between finitely supported probability measures.
//!
//! Everything here is solved to vertex precision by a dense simplex: the
//! Wasserstein cost and plan, the Kantorovich potentials read off the same
//! basis, the explicit total-variation coupling built from the Hahn
//! decomposition, and the quantile coupling on the real line.

pub mod io;
pub mod simplex;

use std::collections::HashSet;

use crate::error::{invalid, Error, Result};

/// Mass below this is treated as absent when solving.
pub const NEGLIGIBLE_MASS: f64 = 1e-15;
const WEIGHT_SUM_TOL: f64 = 1e-12;
const MARGINAL_TOL: f64 = 1e-10;
const METRIC_TOL: f64 = 1e-12;
const DUAL_FEAS_TOL: f64 = 1e-10;
/// Largest transport problem (`n·m`) the exact solver accepts.
pub const MAX_CELLS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub label: String,
    pub coord: Option<f64>,
}

impl Point {
    pub fn new(label: impl Into<String>) -> Self {
        Point {
            label: label.into(),
            coord: None,
        }
    }

    pub fn at(coord: f64) -> Self {
        Point {
            label: format!("{coord}"),
            coord: Some(coord),
        }
    }
}

/// Probability vector over a finite labelled ground set.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    points: Vec<Point>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(points: Vec<Point>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return invalid("measure needs at least one point");
        }
        if points.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                found: weights.len(),
            });
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return invalid(format!("weight {w} is not a non-negative number"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return invalid(format!("weights sum to {total}, not 1"));
        }
        let mut seen = HashSet::new();
        for p in &points {
            if !seen.insert(p.label.as_str()) {
                return invalid(format!("duplicate label `{}`", p.label));
            }
        }
        Ok(DiscreteMeasure { points, weights })
    }

    /// Measure on real coordinates; labels are the coordinates' display form.
    pub fn on_line(coords: &[f64], weights: Vec<f64>) -> Result<Self> {
        Self::new(coords.iter().map(|&x| Point::at(x)).collect(), weights)
    }

    pub fn with_labels(labels: &[&str], weights: Vec<f64>) -> Result<Self> {
        Self::new(labels.iter().map(|&l| Point::new(l)).collect(), weights)
    }

    /// Dirac mass at `label` within the ground set `labels`.
    pub fn dirac(labels: &[&str], label: &str) -> Result<Self> {
        let weights = labels
            .iter()
            .map(|&l| if l == label { 1.0 } else { 0.0 })
            .collect();
        Self::with_labels(labels, weights)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.points.iter().map(|p| p.label.as_str())
    }

    pub fn coords(&self) -> Result<Vec<f64>> {
        self.points
            .iter()
            .map(|p| {
                p.coord.ok_or_else(|| {
                    Error::InvalidInput(format!("point `{}` has no coordinate", p.label))
                })
            })
            .collect()
    }

    /// Integral of `f` (indexed like the points).
    pub fn integrate(&self, f: &[f64]) -> f64 {
        self.weights.iter().zip(f).map(|(w, v)| w * v).sum()
    }

    pub fn same_ground_set(&self, other: &DiscreteMeasure) -> bool {
        self.points.len() == other.points.len()
            && self.points.iter().zip(&other.points).all(|(a, b)| a == b)
    }
}

/// Non-negative `n × m` cost matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
    metric: bool,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: entries.len(),
            });
        }
        if let Some(c) = entries.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
            return invalid(format!("cost entry {c} is not a non-negative number"));
        }
        Ok(CostMatrix {
            rows,
            cols,
            entries,
            metric: false,
        })
    }

    /// Square cost that must be a metric (zero diagonal, symmetric, triangle inequality).
    pub fn metric(n: usize, entries: Vec<f64>) -> Result<Self> {
        let mut c = Self::new(n, n, entries)?;
        for i in 0..n {
            if c.get(i, i).abs() > METRIC_TOL {
                return invalid(format!("metric cost has non-zero diagonal at {i}"));
            }
            for j in 0..n {
                if (c.get(i, j) - c.get(j, i)).abs() > METRIC_TOL {
                    return invalid(format!("metric cost is not symmetric at ({i},{j})"));
                }
                for k in 0..n {
                    if c.get(i, k) > c.get(i, j) + c.get(j, k) + METRIC_TOL {
                        return invalid(format!("triangle inequality fails for ({i},{j},{k})"));
                    }
                }
            }
        }
        c.metric = true;
        Ok(c)
    }

    /// The discrete metric `1{x != y}` on `n` points.
    pub fn discrete(n: usize) -> Self {
        let entries = (0..n * n)
            .map(|k| if k / n == k % n { 0.0 } else { 1.0 })
            .collect();
        Self::metric(n, entries).expect("discrete metric is a metric")
    }

    /// `|x - y|` between the coordinates of two measures on the line.
    pub fn euclidean(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<Self> {
        let xs = mu.coords()?;
        let ys = nu.coords()?;
        let entries = xs
            .iter()
            .flat_map(|x| ys.iter().map(move |y| (x - y).abs()))
            .collect();
        Self::new(xs.len(), ys.len(), entries)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_metric(&self) -> bool {
        self.metric
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.cols + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }
}

/// Joint law with prescribed marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
    row_marginal: DiscreteMeasure,
    col_marginal: DiscreteMeasure,
}

impl CouplingMatrix {
    /// Validates non-negativity and both marginals to `1e-10`.
    pub fn new(entries: Vec<f64>, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<Self> {
        let (rows, cols) = (mu.len(), nu.len());
        if entries.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: entries.len(),
            });
        }
        if let Some(e) = entries.iter().find(|e| !(**e >= -MARGINAL_TOL)) {
            return invalid(format!("coupling entry {e} is negative"));
        }
        for i in 0..rows {
            let s: f64 = entries[i * cols..(i + 1) * cols].iter().sum();
            if (s - mu.weights[i]).abs() > MARGINAL_TOL {
                return invalid(format!("row {i} sums to {s}, marginal is {}", mu.weights[i]));
            }
        }
        for j in 0..cols {
            let s: f64 = (0..rows).map(|i| entries[i * cols + j]).sum();
            if (s - nu.weights[j]).abs() > MARGINAL_TOL {
                return invalid(format!(
                    "column {j} sums to {s}, marginal is {}",
                    nu.weights[j]
                ));
            }
        }
        Ok(CouplingMatrix {
            rows,
            cols,
            entries: entries.into_iter().map(|e| e.max(0.0)).collect(),
            row_marginal: mu.clone(),
            col_marginal: nu.clone(),
        })
    }

    /// Independent coupling `mu ⊗ nu`.
    pub fn product(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Self {
        let entries = mu
            .weights
            .iter()
            .flat_map(|a| nu.weights.iter().map(move |b| a * b))
            .collect();
        Self::new(entries, mu, nu).expect("product of probability vectors is a coupling")
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.cols + j]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn row_marginal(&self) -> &DiscreteMeasure {
        &self.row_marginal
    }

    pub fn col_marginal(&self) -> &DiscreteMeasure {
        &self.col_marginal
    }

    /// `Σ cost^p · π`.
    pub fn transport_cost(&self, cost: &CostMatrix, p: f64) -> Result<f64> {
        check_dims(&self.row_marginal, &self.col_marginal, cost)?;
        Ok(self
            .entries
            .iter()
            .zip(&cost.entries)
            .map(|(pi, c)| pi * c.powf(p))
            .sum())
    }

    /// Mass moved off the diagonal (square couplings only).
    pub fn off_diagonal_mass(&self) -> f64 {
        (0..self.rows)
            .flat_map(|i| (0..self.cols).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .map(|(i, j)| self.get(i, j))
            .sum()
    }
}

/// Feasible pair for the Kantorovich dual: `f(x) <= g(y) + cost(x,y)^p`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualCertificate {
    pub f_values: Vec<f64>,
    pub g_values: Vec<f64>,
    pub p: f64,
}

impl DualCertificate {
    /// `mu(f) - nu(g)`.
    pub fn value(&self, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> f64 {
        mu.integrate(&self.f_values) - nu.integrate(&self.g_values)
    }

    /// Largest violation of `f(x) - g(y) - cost^p <= 0` (non-positive when feasible).
    pub fn max_violation(&self, cost: &CostMatrix) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for (i, f) in self.f_values.iter().enumerate() {
            for (j, g) in self.g_values.iter().enumerate() {
                worst = worst.max(f - g - cost.get(i, j).powf(self.p));
            }
        }
        worst
    }

    pub fn is_feasible(&self, cost: &CostMatrix) -> bool {
        self.max_violation(cost) <= DUAL_FEAS_TOL
    }
}

fn check_dims(mu: &DiscreteMeasure, nu: &DiscreteMeasure, cost: &CostMatrix) -> Result<()> {
    if cost.rows != mu.len() {
        return Err(Error::DimensionMismatch {
            expected: mu.len(),
            found: cost.rows,
        });
    }
    if cost.cols != nu.len() {
        return Err(Error::DimensionMismatch {
            expected: nu.len(),
            found: cost.cols,
        });
    }
    Ok(())
}

fn check_exponent(p: f64) -> Result<()> {
    if !(p.is_finite() && p >= 1.0) {
        return invalid(format!("exponent p = {p} must be a real >= 1"));
    }
    Ok(())
}

/// Optimal plan plus Kantorovich potentials from one simplex solve.
#[derive(Debug, Clone)]
pub struct TransportSolution {
    /// `min Σ cost^p π` (the p-th power of the distance).
    pub cost_p: f64,
    pub plan: CouplingMatrix,
    pub certificate: DualCertificate,
}

impl TransportSolution {
    pub fn distance(&self) -> f64 {
        self.cost_p.powf(1.0 / self.certificate.p)
    }
}

/// Solves the transport LP over the support of `mu` and `nu`.
pub fn solve_transport(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    cost: &CostMatrix,
    p: f64,
) -> Result<TransportSolution> {
    check_dims(mu, nu, cost)?;
    check_exponent(p)?;
    let rows: Vec<usize> = (0..mu.len())
        .filter(|&i| mu.weights[i] >= NEGLIGIBLE_MASS)
        .collect();
    let cols: Vec<usize> = (0..nu.len())
        .filter(|&j| nu.weights[j] >= NEGLIGIBLE_MASS)
        .collect();
    let (n, m) = (rows.len(), cols.len());
    if n * m > MAX_CELLS {
        return invalid(format!(
            "transport problem with {n}x{m} support exceeds the exact-solver limit of {MAX_CELLS} cells"
        ));
    }

    let c: Vec<f64> = rows
        .iter()
        .flat_map(|&i| cols.iter().map(move |&j| (i, j)))
        .map(|(i, j)| cost.get(i, j).powf(p))
        .collect();
    let mut a = vec![0.0; (n + m) * n * m];
    let mut b = vec![0.0; n + m];
    for (r, &i) in rows.iter().enumerate() {
        for s in 0..m {
            a[r * n * m + r * m + s] = 1.0;
        }
        b[r] = mu.weights[i];
    }
    for (s, &j) in cols.iter().enumerate() {
        for r in 0..n {
            a[(n + s) * n * m + r * m + s] = 1.0;
        }
        b[n + s] = nu.weights[j];
    }
    let sol = simplex::solve(&c, &a, &b)?;

    let mut entries = vec![0.0; mu.len() * nu.len()];
    for (r, &i) in rows.iter().enumerate() {
        for (s, &j) in cols.iter().enumerate() {
            entries[i * nu.len() + j] = sol.x[r * m + s];
        }
    }
    let plan = CouplingMatrix::new(entries, mu, nu)?;

    // u_i + v_j <= c_ij on the support; f = u, g = -v.
    let u = &sol.duals[..n];
    let v = &sol.duals[n..];
    let mut f_values = vec![0.0; mu.len()];
    let mut g_values = vec![0.0; nu.len()];
    for (r, &i) in rows.iter().enumerate() {
        f_values[i] = u[r];
    }
    for (s, &j) in cols.iter().enumerate() {
        g_values[j] = -v[s];
    }
    // points outside the support: tightest values that keep feasibility
    for j in (0..nu.len()).filter(|j| !cols.contains(j)) {
        g_values[j] = rows
            .iter()
            .map(|&i| f_values[i] - cost.get(i, j).powf(p))
            .fold(f64::NEG_INFINITY, f64::max);
    }
    for i in (0..mu.len()).filter(|i| !rows.contains(i)) {
        f_values[i] = (0..nu.len())
            .map(|j| g_values[j] + cost.get(i, j).powf(p))
            .fold(f64::INFINITY, f64::min);
    }
    let shift = g_values.iter().copied().fold(f64::INFINITY, f64::min);
    for x in f_values.iter_mut().chain(g_values.iter_mut()) {
        *x -= shift;
    }
    let certificate = DualCertificate {
        f_values,
        g_values,
        p,
    };
    if !certificate.is_feasible(cost) {
        return Err(Error::Solver(format!(
            "dual certificate violates feasibility by {:e}",
            certificate.max_violation(cost)
        )));
    }
    Ok(TransportSolution {
        cost_p: sol.objective,
        plan,
        certificate,
    })
}

/// `W_p` under `cost` and an optimal plan.
pub fn wasserstein_lp(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    cost: &CostMatrix,
    p: f64,
) -> Result<(f64, CouplingMatrix)> {
    let sol = solve_transport(mu, nu, cost, p)?;
    Ok((sol.distance(), sol.plan))
}

/// Dual value `sup mu(f) - nu(g)` (equal to `W_p^p`) and an attaining pair.
pub fn kantorovich_dual(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    cost: &CostMatrix,
    p: f64,
) -> Result<(f64, DualCertificate)> {
    let sol = solve_transport(mu, nu, cost, p)?;
    let value = sol.certificate.value(mu, nu);
    Ok((value, sol.certificate))
}

/// Total variation `sup_A |mu(A) - nu(A)|` and the coupling that keeps the
/// common mass `mu ∧ nu` on the diagonal and spreads `(mu-nu)^+ ⊗ (mu-nu)^-`.
pub fn wasserstein_coupling_tv(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
) -> Result<(f64, CouplingMatrix)> {
    if !mu.same_ground_set(nu) {
        return invalid("total-variation coupling needs a common ground set");
    }
    let n = mu.len();
    let pos: Vec<f64> = mu
        .weights
        .iter()
        .zip(&nu.weights)
        .map(|(a, b)| (a - b).max(0.0))
        .collect();
    let neg: Vec<f64> = mu
        .weights
        .iter()
        .zip(&nu.weights)
        .map(|(a, b)| (b - a).max(0.0))
        .collect();
    let tv_half: f64 = pos.iter().sum();
    let neg_mass: f64 = neg.iter().sum();
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        entries[i * n + i] = mu.weights[i].min(nu.weights[i]);
    }
    if neg_mass > 0.0 {
        for i in 0..n {
            for j in 0..n {
                entries[i * n + j] += pos[i] * neg[j] / neg_mass;
            }
        }
    }
    Ok((tv_half, CouplingMatrix::new(entries, mu, nu)?))
}

/// Quantile (comonotone) coupling on the line and its `W_2` cost.
pub fn monotone_map_1d(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
) -> Result<(CouplingMatrix, f64)> {
    let xs = mu.coords()?;
    let ys = nu.coords()?;
    let order = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        idx
    };
    let ox = order(&xs);
    let oy = order(&ys);
    for w in ox.windows(2) {
        if xs[w[0]] == xs[w[1]] {
            return invalid("coordinates of the source measure are not distinct");
        }
    }
    for w in oy.windows(2) {
        if ys[w[0]] == ys[w[1]] {
            return invalid("coordinates of the target measure are not distinct");
        }
    }

    let m = ys.len();
    let mut entries = vec![0.0; xs.len() * m];
    let (mut a, mut b) = (0usize, 0usize);
    let mut left_a = mu.weights[ox[0]];
    let mut left_b = nu.weights[oy[0]];
    // north-west corner rule on the sorted supports
    loop {
        if left_a <= left_b {
            entries[ox[a] * m + oy[b]] += left_a;
            left_b -= left_a;
            a += 1;
            if a == ox.len() {
                break;
            }
            left_a = mu.weights[ox[a]];
        } else {
            entries[ox[a] * m + oy[b]] += left_b;
            left_a -= left_b;
            b += 1;
            if b == oy.len() {
                break;
            }
            left_b = nu.weights[oy[b]];
        }
    }
    let plan = CouplingMatrix::new(entries, mu, nu)?;
    let cost = CostMatrix::euclidean(mu, nu)?;
    let cost2 = plan.transport_cost(&cost, 2.0)?.sqrt();
    Ok((plan, cost2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FkgOutcome {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// `mu(fg) + nu(fg) >= mu(f)nu(g) + nu(f)mu(g)` for increasing `f`, `g`.
pub fn fkg_check(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    f: &[f64],
    g: &[f64],
) -> Result<FkgOutcome> {
    if !mu.same_ground_set(nu) {
        return invalid("FKG check needs a common ground set");
    }
    let n = mu.len();
    for (name, v) in [("f", f), ("g", g)] {
        if v.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return invalid(format!("{name} must be bounded"));
        }
    }
    let xs = mu.coords()?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    for w in order.windows(2) {
        if f[w[1]] < f[w[0]] {
            return invalid("f is not non-decreasing on the ground set");
        }
        if g[w[1]] < g[w[0]] {
            return invalid("g is not non-decreasing on the ground set");
        }
    }
    let fg: Vec<f64> = f.iter().zip(g).map(|(a, b)| a * b).collect();
    let lhs = mu.integrate(&fg) + nu.integrate(&fg);
    let rhs = mu.integrate(f) * nu.integrate(g) + nu.integrate(f) * mu.integrate(g);
    Ok(FkgOutcome {
        lhs,
        rhs,
        holds: lhs >= rhs - 1e-12,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point(a: f64, b: f64) -> (DiscreteMeasure, DiscreteMeasure) {
        (
            DiscreteMeasure::with_labels(&["1", "2"], vec![a, 1.0 - a]).unwrap(),
            DiscreteMeasure::with_labels(&["1", "2"], vec![b, 1.0 - b]).unwrap(),
        )
    }

    #[test]
    fn measure_validation() {
        assert!(DiscreteMeasure::with_labels(&["a", "b"], vec![0.5, 0.4]).is_err());
        assert!(DiscreteMeasure::with_labels(&["a", "b"], vec![1.5, -0.5]).is_err());
        assert!(DiscreteMeasure::with_labels(&["a", "a"], vec![0.5, 0.5]).is_err());
        assert!(DiscreteMeasure::with_labels(&["a"], vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn identity_case() {
        let mu = DiscreteMeasure::with_labels(&["a", "b", "c"], vec![0.2, 0.5, 0.3]).unwrap();
        let cost = CostMatrix::discrete(3);
        let (w, plan) = wasserstein_lp(&mu, &mu, &cost, 1.0).unwrap();
        assert_eq!(w, 0.0);
        for i in 0..3 {
            assert!((plan.get(i, i) - mu.weights()[i]).abs() < 1e-12);
        }
        let (dual, cert) = kantorovich_dual(&mu, &mu, &cost, 1.0).unwrap();
        assert!(dual.abs() < 1e-12);
        assert!(cert.is_feasible(&cost));
    }

    /// The 2×2 transport polytope with these marginals is the segment
    /// π11 ∈ [0.1, 0.4]; its vertices give costs 0.3 (π11 = 0.4) and 0.9.
    #[test]
    fn two_point_discrete_cost() {
        let (mu, nu) = two_point(0.7, 0.4);
        let cost = CostMatrix::discrete(2);
        let vertex_costs = [0.1f64, 0.4].map(|p11| {
            let p12 = 0.7 - p11;
            let p21 = 0.4 - p11;
            p12 + p21
        });
        let oracle = vertex_costs.iter().copied().fold(f64::INFINITY, f64::min);
        assert!((oracle - 0.3).abs() < 1e-15);

        let (w, plan) = wasserstein_lp(&mu, &nu, &cost, 1.0).unwrap();
        assert!((w - oracle).abs() < 1e-12);
        assert!((plan.get(0, 1) - 0.3).abs() < 1e-12);
        let (dual, cert) = kantorovich_dual(&mu, &nu, &cost, 1.0).unwrap();
        assert!((dual - 0.3).abs() < 1e-12);
        assert!(cert.g_values.iter().copied().fold(f64::INFINITY, f64::min).abs() < 1e-15);

        let (tv, tv_plan) = wasserstein_coupling_tv(&mu, &nu).unwrap();
        assert!((tv - 0.3).abs() < 1e-12);
        assert!((tv_plan.get(0, 1) - 0.3).abs() < 1e-12);
        assert_eq!(tv_plan.get(1, 0), 0.0);
    }

    #[test]
    fn diracs_at_distinct_points() {
        let labels = ["a", "b", "c"];
        let mu = DiscreteMeasure::dirac(&labels, "a").unwrap();
        let nu = DiscreteMeasure::dirac(&labels, "b").unwrap();
        let (w, plan) = wasserstein_lp(&mu, &nu, &CostMatrix::discrete(3), 1.0).unwrap();
        assert!((w - 1.0).abs() < 1e-12);
        assert!((plan.get(0, 1) - 1.0).abs() < 1e-12);
        let (tv, _) = wasserstein_coupling_tv(&mu, &nu).unwrap();
        assert_eq!(tv, 1.0);
        // dropped points still receive feasible potentials
        let (dual, cert) = kantorovich_dual(&mu, &nu, &CostMatrix::discrete(3), 2.0).unwrap();
        assert!((dual - 1.0).abs() < 1e-12);
        assert!(cert.is_feasible(&CostMatrix::discrete(3)));
    }

    #[test]
    fn dimension_and_exponent_errors() {
        let (mu, nu) = two_point(0.5, 0.5);
        let cost = CostMatrix::discrete(3);
        assert!(matches!(
            wasserstein_lp(&mu, &nu, &cost, 1.0),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(wasserstein_lp(&mu, &nu, &CostMatrix::discrete(2), 0.5).is_err());
    }

    #[test]
    fn quantile_map_examples() {
        let mu = DiscreteMeasure::on_line(&[0.0, 1.0], vec![0.5, 0.5]).unwrap();
        let nu = DiscreteMeasure::on_line(&[2.0, 3.0], vec![0.5, 0.5]).unwrap();
        // the two bijections: identity-ordered costs 2, crossing costs √5
        let straight = (0.5f64 * 4.0 + 0.5 * 4.0).sqrt();
        let crossing = (0.5f64 * 9.0 + 0.5 * 1.0).sqrt();
        assert!((crossing - 5f64.sqrt()).abs() < 1e-15);
        let (plan, cost2) = monotone_map_1d(&mu, &nu).unwrap();
        assert!((cost2 - straight).abs() < 1e-12);
        assert!((cost2 - 2.0).abs() < 1e-12);
        assert!((plan.get(0, 0) - 0.5).abs() < 1e-15 && (plan.get(1, 1) - 0.5).abs() < 1e-15);

        let third = 1.0 / 3.0;
        let w = vec![third, third, 1.0 - 2.0 * third];
        let a = DiscreteMeasure::on_line(&[0.0, 1.0, 2.0], w.clone()).unwrap();
        let b = DiscreteMeasure::on_line(&[5.0, 6.0, 7.0], w).unwrap();
        let (_, shifted) = monotone_map_1d(&a, &b).unwrap();
        assert!((shifted - 5.0).abs() < 1e-12);
        let (_, same) = monotone_map_1d(&a, &a).unwrap();
        assert_eq!(same, 0.0);
    }

    #[test]
    fn quantile_map_needs_coordinates() {
        let mu = DiscreteMeasure::with_labels(&["a"], vec![1.0]).unwrap();
        assert!(monotone_map_1d(&mu, &mu).is_err());
    }

    #[test]
    fn fkg_examples() {
        let mu = DiscreteMeasure::on_line(&[0.0, 1.0], vec![0.5, 0.5]).unwrap();
        let id = [0.0, 1.0];
        // μ(fg)+ν(fg) = 2·½ ; μ(f)ν(g)+ν(f)μ(g) = 2·¼
        let out = fkg_check(&mu, &mu, &id, &id).unwrap();
        assert_eq!(out.lhs, 1.0);
        assert_eq!(out.rhs, 0.5);
        assert!(out.holds);

        let nu = DiscreteMeasure::on_line(&[0.0, 1.0], vec![0.2, 0.8]).unwrap();
        let out = fkg_check(&mu, &nu, &[3.0, 3.0], &id).unwrap();
        assert_eq!(out.lhs, out.rhs);

        assert!(fkg_check(&mu, &nu, &[1.0, 0.0], &id).is_err());
    }
}
