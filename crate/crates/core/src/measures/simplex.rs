//! Dense two-phase tableau simplex for small equality-form LPs.
//!
//! Solves `min c·x  s.t.  A x = b, x >= 0`. Pivoting follows Bland's rule
//! (lowest eligible index enters, ties in the ratio test go to the lowest basic
//! index), which terminates on degenerate problems and makes the returned
//! vertex and dual vector deterministic.

use crate::error::{Error, Result};

const PIVOT_EPS: f64 = 1e-12;
const FEAS_EPS: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// Multipliers `y` with `c_j - y·A_j >= 0` for every column.
    pub duals: Vec<f64>,
}

struct Tableau {
    rows: usize,
    cols: usize, // structural + artificial, rhs stored separately
    a: Vec<f64>,
    rhs: Vec<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.cols + j]
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let cols = self.cols;
        let p = self.at(row, col);
        for j in 0..cols {
            self.a[row * cols + j] /= p;
        }
        self.rhs[row] /= p;
        for i in 0..self.rows {
            if i == row {
                continue;
            }
            let factor = self.at(i, col);
            if factor == 0.0 {
                continue;
            }
            for j in 0..cols {
                let v = self.a[row * cols + j];
                self.a[i * cols + j] -= factor * v;
            }
            self.rhs[i] -= factor * self.rhs[row];
        }
        self.basis[row] = col;
    }

    fn reduced_costs(&self, cost: &[f64]) -> Vec<f64> {
        let mut d = cost.to_vec();
        for (i, &bi) in self.basis.iter().enumerate() {
            let cb = cost[bi];
            if cb == 0.0 {
                continue;
            }
            for (j, dj) in d.iter_mut().enumerate() {
                *dj -= cb * self.at(i, j);
            }
        }
        d
    }

    /// Runs simplex iterations for `cost` over columns `< allowed`.
    fn optimize(&mut self, cost: &[f64], allowed: usize) -> Result<()> {
        let max_iter = 50_000;
        for _ in 0..max_iter {
            let d = self.reduced_costs(cost);
            let entering = (0..allowed).find(|&j| d[j] < -FEAS_EPS && !self.basis.contains(&j));
            let Some(col) = entering else {
                return Ok(());
            };
            let mut best: Option<(usize, f64)> = None;
            for i in 0..self.rows {
                let aij = self.at(i, col);
                if aij > PIVOT_EPS {
                    let ratio = self.rhs[i] / aij;
                    match best {
                        None => best = Some((i, ratio)),
                        Some((bi, br)) => {
                            if ratio < br - PIVOT_EPS
                                || (ratio <= br + PIVOT_EPS && self.basis[i] < self.basis[bi])
                            {
                                best = Some((i, ratio));
                            }
                        }
                    }
                }
            }
            let Some((row, _)) = best else {
                return Err(Error::Solver("linear program is unbounded".into()));
            };
            self.pivot(row, col);
        }
        Err(Error::Solver("simplex iteration limit reached".into()))
    }
}

/// Minimizes `cost·x` subject to `a x = b`, `x >= 0`; `a` is row-major `m × n`.
pub fn solve(cost: &[f64], a: &[f64], b: &[f64]) -> Result<LpSolution> {
    let n = cost.len();
    let m = b.len();
    if a.len() != n * m {
        return Err(Error::DimensionMismatch {
            expected: n * m,
            found: a.len(),
        });
    }
    let cols = n + m;
    let mut t = Tableau {
        rows: m,
        cols,
        a: vec![0.0; m * cols],
        rhs: vec![0.0; m],
        basis: (n..n + m).collect(),
    };
    let mut sign = vec![1.0; m];
    for i in 0..m {
        if b[i] < 0.0 {
            sign[i] = -1.0;
        }
        for j in 0..n {
            t.a[i * cols + j] = sign[i] * a[i * n + j];
        }
        t.a[i * cols + n + i] = 1.0;
        t.rhs[i] = sign[i] * b[i];
    }

    // phase I
    let mut phase1 = vec![0.0; cols];
    for c in phase1.iter_mut().skip(n) {
        *c = 1.0;
    }
    t.optimize(&phase1, n)?;
    let infeas: f64 = t
        .basis
        .iter()
        .zip(&t.rhs)
        .filter(|(&bi, _)| bi >= n)
        .map(|(_, &r)| r)
        .sum();
    if infeas > FEAS_EPS {
        return Err(Error::Solver(format!(
            "linear program is infeasible (phase I residual {infeas:e})"
        )));
    }
    // drive zero-level artificials out where the row is not redundant
    for i in 0..m {
        if t.basis[i] >= n {
            if let Some(j) = (0..n).find(|&j| t.at(i, j).abs() > 1e-9 && !t.basis.contains(&j)) {
                t.pivot(i, j);
            }
        }
    }

    // phase II
    let mut phase2 = vec![0.0; cols];
    phase2[..n].copy_from_slice(cost);
    t.optimize(&phase2, n)?;

    let mut x = vec![0.0; n];
    for (i, &bi) in t.basis.iter().enumerate() {
        if bi < n {
            x[bi] = t.rhs[i].max(0.0);
        }
    }
    let objective = cost.iter().zip(&x).map(|(c, v)| c * v).sum();
    // y = c_B B^{-1}; the artificial block of the tableau holds B^{-1}
    let mut duals = vec![0.0; m];
    for (k, yk) in duals.iter_mut().enumerate() {
        let mut s = 0.0;
        for (i, &bi) in t.basis.iter().enumerate() {
            s += phase2[bi] * t.at(i, n + k);
        }
        *yk = s * sign[k];
    }
    Ok(LpSolution {
        x,
        objective,
        duals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_lp_with_known_optimum() {
        // min -x - y  s.t. x + s1 = 2, y + s2 = 3
        let cost = [-1.0, -1.0, 0.0, 0.0];
        let a = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        let b = [2.0, 3.0];
        let sol = solve(&cost, &a, &b).unwrap();
        assert!((sol.objective + 5.0).abs() < 1e-12);
        assert!((sol.duals[0] + 1.0).abs() < 1e-12);
        assert!((sol.duals[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_is_reported() {
        // x = 1 and x = 2
        let cost = [1.0];
        let a = [1.0, 1.0];
        let b = [1.0, 2.0];
        assert!(matches!(solve(&cost, &a, &b), Err(Error::Solver(_))));
    }

    #[test]
    fn negative_rhs_rows_are_flipped() {
        // min x s.t. -x = -4
        let sol = solve(&[1.0], &[-1.0], &[-4.0]).unwrap();
        assert!((sol.x[0] - 4.0).abs() < 1e-12);
        // c - y·A = 1 - y·(-1) = 0  =>  y = -1
        assert!((sol.duals[0] + 1.0).abs() < 1e-12);
    }
}
