//! Coupled diffusion pairs started at `(x, y)`.
//!
//! Three constructions share one stepping loop:
//!
//! * synchronous: both components driven by the same Brownian increments;
//! * forced: `Y` gets the extra drift `η_s (X-Y)/|X-Y|` with the schedule
//!   `η_s = |x-y| e^{-Ks} / ∫_0^t e^{-2Kr} dr`, which closes the gap by time
//!   `t` under the drift-only dissipativity bound `K`;
//! * Girsanov: `Y` gets `σ(Y)σ(X)^{-1}(X-Y)/ξ_s` with
//!   `ξ_s = (1 - e^{K(s-t)})/K` for the σ-augmented constant `K`.
//!
//! The forced and Girsanov constructions carry the density `R` that turns
//! the law of `Y` back into the law of the unperturbed diffusion from `y`.
//! `log R` is accumulated with left-point evaluation on the simulation grid
//! and frozen once the pair meets. After the meeting step the `Y` states are
//! overwritten by `X`.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::quadrature;
use crate::rng::{Domain, PathStream};
use crate::sde::{check_flagged, check_start, DiffusionSpec, Record, StepGrid};
use crate::stats::{wilson_interval, MeanSe};

/// Fraction of unmet paths above which a forced run carries a warning.
pub const UNCOUPLED_WARNING_FRACTION: f64 = 0.05;
/// Fraction of paths glued by the detection band (rather than meeting at the
/// last step) above which a run reports that the band was active.
pub const BAND_REPORT_FRACTION: f64 = 0.01;
const K_ZERO: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Construction {
    Synchronous,
    Forced,
    GirsanovTt,
}

impl Construction {
    pub fn name(self) -> &'static str {
        match self {
            Construction::Synchronous => "synchronous",
            Construction::Forced => "forced",
            Construction::GirsanovTt => "girsanov",
        }
    }
}

/// `∫_0^t e^{-2Ks} ds`, with its `K → 0` limit `t`.
fn exp_integral(k: f64, t: f64) -> f64 {
    if k.abs() < K_ZERO {
        t
    } else {
        -(-2.0 * k * t).exp_m1() / (2.0 * k)
    }
}

/// The forcing magnitude `η_s` of the forced coupling.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaSchedule {
    pub k: f64,
    pub horizon: f64,
    pub distance: f64,
    /// `η` at the grid points `0, h, ..., t`.
    pub values: Vec<f64>,
}

impl EtaSchedule {
    pub fn new(k: f64, horizon: f64, distance: f64, grid: Option<StepGrid>) -> Self {
        let mut s = EtaSchedule {
            k,
            horizon,
            distance,
            values: Vec::new(),
        };
        if let Some(g) = grid {
            s.values = (0..=g.steps).map(|i| s.eval(g.time(i))).collect();
        }
        s
    }

    pub fn eval(&self, s: f64) -> f64 {
        let decay = if self.k.abs() < K_ZERO {
            1.0
        } else {
            (-self.k * s).exp()
        };
        self.distance * decay / exp_integral(self.k, self.horizon)
    }

    /// `∫_0^t e^{-Ks} η_s ds`, which must equal the initial distance.
    pub fn closing_integral(&self) -> f64 {
        let k = if self.k.abs() < K_ZERO { 0.0 } else { self.k };
        quadrature::integrate(
            |s| (-k * s).exp() * self.eval(s),
            0.0,
            self.horizon,
            1e-14,
            1e-13,
            200,
        )
        .value
    }

    /// `∫_0^t η_s² ds = |x-y|² / ∫_0^t e^{-2Ks} ds`.
    pub fn energy(&self) -> f64 {
        self.distance * self.distance / exp_integral(self.k, self.horizon)
    }
}

/// `ξ_s = (1 - e^{K(s-t)})/K`, or `t - s` when `K ≈ 0`.
pub fn xi(k: f64, s: f64, t: f64) -> f64 {
    if k.abs() < K_ZERO {
        t - s
    } else {
        -(k * (s - t)).exp_m1() / k
    }
}

#[derive(Debug, Clone)]
pub struct CouplingRun {
    pub construction: Construction,
    pub spec: DiffusionSpec,
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub grid: StepGrid,
    pub n_paths: usize,
    pub seed: u64,
    pub record: Record,
    x_states: Vec<f64>,
    y_states: Vec<f64>,
    /// First grid index at which the pair is glued, if any.
    pub coupling_step: Vec<Option<usize>>,
    /// `log R` per path (0 for measure-preserving couplings).
    pub log_weights: Vec<f64>,
    pub flagged: Vec<bool>,
    /// Paths glued by the detection band before the final step.
    pub band_glued: usize,
    pub eta: Option<EtaSchedule>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailPoint {
    pub t: f64,
    /// `P(T > t)`.
    pub tail: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
}

impl CouplingRun {
    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    fn per_path(&self) -> usize {
        match self.record {
            Record::Terminal => 2,
            Record::Full => self.grid.steps + 1,
        }
    }

    fn slot(&self, path: usize, k: usize) -> std::ops::Range<usize> {
        let d = self.dim();
        let off = (path * self.per_path() + k) * d;
        off..off + d
    }

    pub fn x_state(&self, path: usize, k: usize) -> &[f64] {
        &self.x_states[self.slot(path, k)]
    }

    pub fn y_state(&self, path: usize, k: usize) -> &[f64] {
        &self.y_states[self.slot(path, k)]
    }

    pub fn x_terminal(&self, path: usize) -> &[f64] {
        self.x_state(path, self.per_path() - 1)
    }

    pub fn y_terminal(&self, path: usize) -> &[f64] {
        self.y_state(path, self.per_path() - 1)
    }

    pub fn valid_paths(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_paths).filter(|&i| !self.flagged[i])
    }

    pub fn weight(&self, path: usize) -> f64 {
        self.log_weights[path].exp()
    }

    /// Coupling time of `path` (infinite when the pair never met).
    pub fn coupling_time(&self, path: usize) -> f64 {
        self.coupling_step[path].map_or(f64::INFINITY, |k| self.grid.time(k))
    }

    /// Share of valid paths glued by the horizon.
    pub fn coupling_fraction(&self) -> f64 {
        let valid: Vec<usize> = self.valid_paths().collect();
        let met = valid.iter().filter(|&&i| self.coupling_step[i].is_some()).count();
        met as f64 / valid.len() as f64
    }

    /// Share of the `R`-weighted mass on paths that never met.
    pub fn weighted_uncoupled_fraction(&self) -> f64 {
        let (mut total, mut open) = (0.0, 0.0);
        for i in self.valid_paths() {
            let w = self.weight(i);
            total += w;
            if self.coupling_step[i].is_none() {
                open += w;
            }
        }
        open / total
    }

    pub fn mean_weight(&self) -> MeanSe {
        let w: Vec<f64> = self.valid_paths().map(|i| self.weight(i)).collect();
        MeanSe::of(&w)
    }

    /// Estimate of `E[R log R]`.
    pub fn entropy(&self) -> MeanSe {
        let v: Vec<f64> = self
            .valid_paths()
            .map(|i| self.weight(i) * self.log_weights[i])
            .collect();
        MeanSe::of(&v)
    }

    /// Estimate of `E[R^q]`.
    pub fn weight_moment(&self, q: f64) -> MeanSe {
        let v: Vec<f64> = self
            .valid_paths()
            .map(|i| (q * self.log_weights[i]).exp())
            .collect();
        MeanSe::of(&v)
    }

    /// Checks that recorded `Y` equals `X` from the coupling step on.
    pub fn glue_holds(&self) -> bool {
        (0..self.n_paths).all(|i| match (self.coupling_step[i], self.record) {
            (None, _) => true,
            (Some(_), Record::Terminal) => self.x_terminal(i) == self.y_terminal(i),
            (Some(k), Record::Full) => {
                (k..=self.grid.steps).all(|j| self.x_state(i, j) == self.y_state(i, j))
            }
        })
    }

    /// `path,coupling_step,log_weight` rows; `never` marks unmet paths.
    pub fn weights_csv(&self) -> String {
        let mut s = String::from("path,coupling_step,log_weight\n");
        for i in 0..self.n_paths {
            let step = self.coupling_step[i].map_or("never".to_string(), |k| k.to_string());
            let _ = writeln!(s, "{i},{step},{:e}", self.log_weights[i]);
        }
        s
    }
}

/// Empirical survival function of the coupling time with 3σ Wilson intervals.
pub fn coupling_time_tail(run: &CouplingRun, t_grid: &[f64]) -> Vec<TailPoint> {
    let times: Vec<f64> = run.valid_paths().map(|i| run.coupling_time(i)).collect();
    let n = times.len();
    t_grid
        .iter()
        .map(|&t| {
            // the grid time nearest below t decides whether the pair has met
            let open = times.iter().filter(|&&c| c > t + 1e-12 * t.max(1.0)).count();
            let tail = open as f64 / n as f64;
            let (lower, upper) = wilson_interval(open, n, 3.0);
            TailPoint {
                t,
                tail,
                se: (tail * (1.0 - tail) / n as f64).sqrt(),
                lower,
                upper,
            }
        })
        .collect()
}

pub fn tail_csv(points: &[TailPoint]) -> String {
    let mut s = String::from("t,tail,se,lower,upper\n");
    for p in points {
        let _ = writeln!(s, "{},{:e},{:e},{:e},{:e}", p.t, p.tail, p.se, p.lower, p.upper);
    }
    s
}

#[inline]
fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

struct PathOutput {
    x: Vec<f64>,
    y: Vec<f64>,
    coupling_step: Option<usize>,
    log_weight: f64,
    flagged: bool,
    band_glued: bool,
}

fn run_coupling(
    construction: Construction,
    spec: &DiffusionSpec,
    x0: &[f64],
    y0: &[f64],
    grid: StepGrid,
    n_paths: usize,
    seed: u64,
    record: Record,
) -> Result<CouplingRun> {
    check_start(spec.dim, x0)?;
    check_start(spec.dim, y0)?;
    if n_paths == 0 {
        return invalid("need at least one path");
    }
    let d = spec.dim;
    let distance = norm(&x0.iter().zip(y0).map(|(a, b)| a - b).collect::<Vec<_>>());
    let eta = match construction {
        Construction::Forced => {
            if !spec.diffusion.is_identity() {
                return invalid("forced coupling needs the identity diffusion");
            }
            Some(EtaSchedule::new(spec.k_drift, grid.horizon, distance, Some(grid)))
        }
        _ => None,
    };
    let k_aug = spec.k_augmented;
    let per_path = match record {
        Record::Terminal => 2,
        Record::Full => grid.steps + 1,
    };
    let sq = grid.h.sqrt();
    let h = grid.h;

    let simulate_path = |p: usize| -> PathOutput {
        let mut stream = PathStream::new(seed, Domain::Brownian, p as u64, d);
        let mut xs = vec![0.0; per_path * d];
        let mut ys = vec![0.0; per_path * d];
        let mut x = x0.to_vec();
        let mut y = y0.to_vec();
        let mut dw = vec![0.0; d];
        let mut zx = vec![0.0; d];
        let mut zy = vec![0.0; d];
        let mut diff = vec![0.0; d];
        let mut w = vec![0.0; d];
        let mut tmp = vec![0.0; d];
        let mut x_next = vec![0.0; d];
        let mut y_next = vec![0.0; d];
        let mut log_r = 0.0;
        let mut coupled: Option<usize> = None;
        let mut flagged = false;
        let mut band_glued = false;

        let band = |zx: &[f64], zy: &[f64], force: f64| {
            (10.0 * h * (1.0 + norm(zx).max(norm(zy)) + force)).max(1e-6)
        };

        // step 0
        spec.drift.eval(&x, &mut zx);
        spec.drift.eval(&y, &mut zy);
        let force0 = eta.as_ref().map_or(0.0, |e| e.values[0]);
        let r0 = norm(&x.iter().zip(&y).map(|(a, b)| a - b).collect::<Vec<_>>());
        if r0 < band(&zx, &zy, force0) {
            coupled = Some(0);
            y.copy_from_slice(&x);
        }
        xs[..d].copy_from_slice(&x);
        ys[..d].copy_from_slice(&y);

        for k in 0..grid.steps {
            stream.normals(&mut dw);
            dw.iter_mut().for_each(|v| *v *= sq);
            spec.euler_step(&x, &dw, h, &mut tmp, &mut x_next);
            if coupled.is_some() {
                y_next.copy_from_slice(&x_next);
            } else {
                spec.euler_step(&y, &dw, h, &mut tmp, &mut y_next);
                for i in 0..d {
                    diff[i] = x[i] - y[i];
                }
                let r = norm(&diff);
                match construction {
                    Construction::Synchronous => {}
                    Construction::Forced => {
                        let e = eta.as_ref().expect("forced run has a schedule").values[k];
                        for i in 0..d {
                            let u = diff[i] / r;
                            y_next[i] += e * u * h;
                            log_r -= e * u * dw[i];
                        }
                        log_r -= 0.5 * e * e * h;
                    }
                    Construction::GirsanovTt => {
                        let xi_k = xi(k_aug, grid.time(k), grid.horizon);
                        if !spec.diffusion.solve(&x, &diff, &mut w) {
                            flagged = true;
                            break;
                        }
                        spec.diffusion.apply(&y, &w, &mut tmp);
                        let mut sq_norm = 0.0;
                        for i in 0..d {
                            y_next[i] += tmp[i] / xi_k * h;
                            log_r -= w[i] / xi_k * dw[i];
                            sq_norm += w[i] * w[i];
                        }
                        log_r -= 0.5 * sq_norm / (xi_k * xi_k) * h;
                    }
                }
            }
            std::mem::swap(&mut x, &mut x_next);
            std::mem::swap(&mut y, &mut y_next);
            if x.iter().chain(&y).any(|v| !v.is_finite()) || !log_r.is_finite() {
                flagged = true;
                break;
            }
            if coupled.is_none() {
                spec.drift.eval(&x, &mut zx);
                spec.drift.eval(&y, &mut zy);
                let force = eta.as_ref().map_or(0.0, |e| e.values[k + 1]);
                let gap = norm(&x.iter().zip(&y).map(|(a, b)| a - b).collect::<Vec<_>>());
                if gap < band(&zx, &zy, force) {
                    coupled = Some(k + 1);
                    band_glued = k + 1 < grid.steps;
                    y.copy_from_slice(&x);
                }
            }
            if record == Record::Full {
                xs[(k + 1) * d..(k + 2) * d].copy_from_slice(&x);
                ys[(k + 1) * d..(k + 2) * d].copy_from_slice(&y);
            }
        }
        if flagged {
            xs[d..].fill(f64::NAN);
            ys[d..].fill(f64::NAN);
        } else if record == Record::Terminal {
            xs[d..].copy_from_slice(&x);
            ys[d..].copy_from_slice(&y);
        }
        PathOutput {
            x: xs,
            y: ys,
            coupling_step: if flagged { None } else { coupled },
            log_weight: if flagged { 0.0 } else { log_r },
            flagged,
            band_glued,
        }
    };

    let outputs: Vec<PathOutput> = (0..n_paths).into_par_iter().map(simulate_path).collect();
    let flagged: Vec<bool> = outputs.iter().map(|o| o.flagged).collect();
    check_flagged(flagged.iter().filter(|f| **f).count(), n_paths)?;

    let mut x_states = Vec::with_capacity(n_paths * per_path * d);
    let mut y_states = Vec::with_capacity(n_paths * per_path * d);
    let mut coupling_step = Vec::with_capacity(n_paths);
    let mut log_weights = Vec::with_capacity(n_paths);
    let mut band_glued = 0;
    for o in outputs {
        x_states.extend_from_slice(&o.x);
        y_states.extend_from_slice(&o.y);
        coupling_step.push(o.coupling_step);
        log_weights.push(o.log_weight);
        band_glued += o.band_glued as usize;
    }

    let mut run = CouplingRun {
        construction,
        spec: spec.clone(),
        x0: x0.to_vec(),
        y0: y0.to_vec(),
        grid,
        n_paths,
        seed,
        record,
        x_states,
        y_states,
        coupling_step,
        log_weights,
        flagged,
        band_glued,
        eta,
        warnings: Vec::new(),
    };
    if construction != Construction::Synchronous {
        let open = 1.0 - run.coupling_fraction();
        if open > UNCOUPLED_WARNING_FRACTION {
            run.warnings.push(format!(
                "{:.1}% of paths did not couple by the horizon; the step is too coarse",
                100.0 * open
            ));
        }
    }
    if band_glued as f64 > BAND_REPORT_FRACTION * n_paths as f64 {
        run.warnings.push(format!(
            "detection band glued {band_glued} of {n_paths} paths before the final step"
        ));
    }
    Ok(run)
}

/// Both components driven by the same increments; `R ≡ 1`.
pub fn couple_synchronous(
    spec: &DiffusionSpec,
    x0: &[f64],
    y0: &[f64],
    grid: StepGrid,
    n_paths: usize,
    seed: u64,
    record: Record,
) -> Result<CouplingRun> {
    run_coupling(Construction::Synchronous, spec, x0, y0, grid, n_paths, seed, record)
}

/// Drift-forced coupling; requires `σ = I` and uses the drift-only `K`.
pub fn couple_forced(
    spec: &DiffusionSpec,
    x0: &[f64],
    y0: &[f64],
    grid: StepGrid,
    n_paths: usize,
    seed: u64,
    record: Record,
) -> Result<CouplingRun> {
    run_coupling(Construction::Forced, spec, x0, y0, grid, n_paths, seed, record)
}

/// Girsanov coupling with `ξ_s` built from the σ-augmented `K`.
pub fn couple_girsanov_tt(
    spec: &DiffusionSpec,
    x0: &[f64],
    y0: &[f64],
    grid: StepGrid,
    n_paths: usize,
    seed: u64,
    record: Record,
) -> Result<CouplingRun> {
    run_coupling(Construction::GirsanovTt, spec, x0, y0, grid, n_paths, seed, record)
}

/// Upper bound on `E[R_t log R_t]` for the Girsanov coupling:
/// `K|x-y|² / (2λ(1 - e^{-Kt}))`, with limit `|x-y|²/(2λt)` at `K = 0`.
pub fn entropy_bound(k: f64, lambda: f64, distance: f64, t: f64) -> f64 {
    let factor = if k.abs() < K_ZERO {
        1.0 / t
    } else {
        k / -(-k * t).exp_m1()
    };
    factor * distance * distance / (2.0 * lambda)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eta_closes_the_gap() {
        for k in [-2.0, -1.0, 0.0, 1.0] {
            let s = EtaSchedule::new(k, 1.3, 0.8, None);
            assert!((s.closing_integral() - 0.8).abs() < 1e-8, "K = {k}");
        }
        let s = EtaSchedule::new(0.0, 2.0, 1.0, None);
        assert_eq!(s.eval(0.7), 0.5);
    }

    #[test]
    fn xi_limits() {
        assert!((xi(1e-12, 0.25, 1.0) - 0.75).abs() < 1e-15);
        assert!((xi(-2.0, 1.0, 1.0)).abs() < 1e-15);
        assert!((xi(-2.0, 0.0, 1.0) - (2f64.exp() - 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_bound_constant() {
        let b = entropy_bound(-2.0, 1.0, 1.0, 1.0);
        assert!((b - 1.0 / (2f64.exp() - 1.0)).abs() < 1e-12);
        assert!((entropy_bound(0.0, 1.0, 1.0, 2.0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn identical_starts_couple_at_zero() {
        let spec = DiffusionSpec::ou(2);
        let g = StepGrid::new(0.01, 0.5).unwrap();
        for run in [
            couple_synchronous(&spec, &[0.3, 0.1], &[0.3, 0.1], g, 8, 1, Record::Full).unwrap(),
            couple_forced(&spec, &[0.3, 0.1], &[0.3, 0.1], g, 8, 1, Record::Full).unwrap(),
            couple_girsanov_tt(&spec, &[0.3, 0.1], &[0.3, 0.1], g, 8, 1, Record::Full).unwrap(),
        ] {
            assert!(run.coupling_step.iter().all(|c| *c == Some(0)));
            assert!(run.log_weights.iter().all(|w| *w == 0.0));
            assert!(run.glue_holds());
        }
    }

    #[test]
    fn brownian_synchronous_difference_is_constant() {
        let spec = DiffusionSpec::brownian(1);
        let g = StepGrid::new(0.01, 1.0).unwrap();
        let run = couple_synchronous(&spec, &[0.0], &[1.0], g, 16, 2, Record::Full).unwrap();
        for p in 0..16 {
            for k in 0..=g.steps {
                let gap = run.y_state(p, k)[0] - run.x_state(p, k)[0];
                assert!((gap - 1.0).abs() < 1e-12);
            }
        }
        let tail = coupling_time_tail(&run, &[0.5, 1.0]);
        assert!(tail.iter().all(|p| p.tail == 1.0));
    }

    #[test]
    fn forced_coupling_needs_identity_diffusion() {
        let spec = DiffusionSpec::new(
            1,
            crate::sde::Drift::Zero,
            crate::sde::Diffusion::from_id("diag_sin", 1).unwrap(),
        )
        .unwrap();
        let g = StepGrid::new(0.01, 1.0).unwrap();
        assert!(couple_forced(&spec, &[0.0], &[1.0], g, 4, 1, Record::Terminal).is_err());
    }
}
