//! Lévy-driven O-U processes `dX = AX dt + dL` with a compound Poisson part,
//! the jump-size derivative formula, total-variation decay, and the
//! Bernstein-function integral `α(t)`.
//!
//! Paths are simulated exactly: a Poisson number of jumps, uniform order
//! statistics for the jump times, i.i.d. sizes, and the flow in closed form
//! `X_t = e^{At}x + Σ e^{A(t-τ_i)} ξ_i`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use statrs::function::gamma::gamma;

use crate::error::{invalid, Error, Result};
use crate::estimators::{CheckRow, EstimateReport, FdEstimate, TestFunction, ANALYTIC_TOL};
use crate::quadrature;
use crate::rng::{derive_seed, Domain, PathStream};
use crate::sde::Record;
use crate::stats::{histogram_tv, linear_fit, MeanSe};

/// Drift matrix `A` of the O-U flow.
#[derive(Debug, Clone, PartialEq)]
pub enum Flow {
    Zero,
    /// `A = a I`.
    Scalar(f64),
    General(DMatrix<f64>),
}

impl Flow {
    /// `out = e^{As} v`, or `e^{Aᵀs} v` when `transpose`.
    pub fn apply(&self, s: f64, v: &[f64], transpose: bool, out: &mut [f64]) {
        match self {
            Flow::Zero => out.copy_from_slice(v),
            Flow::Scalar(a) => {
                let e = (a * s).exp();
                for (o, w) in out.iter_mut().zip(v) {
                    *o = e * w;
                }
            }
            Flow::General(a) => {
                let m = (a * s).exp();
                let m = if transpose { m.transpose() } else { m };
                let r = m * DVector::from_column_slice(v);
                out.copy_from_slice(r.as_slice());
            }
        }
    }

    fn matrix(&self, dim: usize) -> DMatrix<f64> {
        match self {
            Flow::Zero => DMatrix::zeros(dim, dim),
            Flow::Scalar(a) => DMatrix::identity(dim, dim) * *a,
            Flow::General(a) => a.clone(),
        }
    }
}

/// Normalized jump-size density `ρ₀/λ₀`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JumpDensity {
    /// `N(0, σ² I)`.
    Gaussian { sigma: f64 },
    /// `Π cos²(π z_i/2)` on `[-1, 1]^d`.
    CosSquared,
}

impl JumpDensity {
    pub fn from_id(id: &str) -> Result<Self> {
        match id.split_once(':') {
            None if id == "gaussian" => Ok(JumpDensity::Gaussian { sigma: 1.0 }),
            None if id == "cos2" => Ok(JumpDensity::CosSquared),
            Some(("gaussian", s)) => {
                let sigma: f64 = s
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("bad jump density `{id}`")))?;
                if !(sigma > 0.0) {
                    return invalid("jump scale must be positive");
                }
                Ok(JumpDensity::Gaussian { sigma })
            }
            _ => invalid(format!("unknown jump density `{id}`")),
        }
    }

    pub fn id(&self) -> String {
        match self {
            JumpDensity::Gaussian { sigma } => format!("gaussian:{sigma}"),
            JumpDensity::CosSquared => "cos2".into(),
        }
    }

    /// One-dimensional marginal density.
    pub fn density_1d(&self, z: f64) -> f64 {
        match self {
            JumpDensity::Gaussian { sigma } => {
                (-0.5 * (z / sigma).powi(2)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
            }
            JumpDensity::CosSquared => {
                if z.abs() < 1.0 {
                    (0.5 * std::f64::consts::PI * z).cos().powi(2)
                } else {
                    0.0
                }
            }
        }
    }

    pub fn density(&self, z: &[f64]) -> f64 {
        z.iter().map(|v| self.density_1d(*v)).product()
    }

    /// `∇ log ρ₀(z)` inside the support.
    pub fn grad_log(&self, z: &[f64], out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(z) {
            *o = match self {
                JumpDensity::Gaussian { sigma } => -v / (sigma * sigma),
                JumpDensity::CosSquared => {
                    -std::f64::consts::PI * (0.5 * std::f64::consts::PI * v).tan()
                }
            };
        }
    }

    /// `(lo, hi)` of the support in each coordinate.
    fn support(&self) -> (f64, f64) {
        match self {
            JumpDensity::Gaussian { .. } => (f64::NEG_INFINITY, f64::INFINITY),
            JumpDensity::CosSquared => (-1.0, 1.0),
        }
    }

    fn sample(&self, stream: &mut PathStream, out: &mut [f64]) {
        match self {
            JumpDensity::Gaussian { sigma } => {
                stream.normals(out);
                out.iter_mut().for_each(|v| *v *= sigma);
            }
            JumpDensity::CosSquared => {
                for o in out.iter_mut() {
                    // uniform proposal, acceptance cos²; rate 1/2
                    loop {
                        let z = 2.0 * stream.uniform() - 1.0;
                        if stream.uniform() < (0.5 * std::f64::consts::PI * z).cos().powi(2) {
                            *o = z;
                            break;
                        }
                    }
                }
            }
        }
    }

    /// `∫_{|z-z₀|<=ε} ρ₀(z)^{-1} dz` in one dimension; infinite when the ball
    /// reaches a zero of the density.
    pub fn inverse_mass(&self, z0: f64, eps: f64) -> f64 {
        let (lo, hi) = self.support();
        if z0 - eps <= lo || z0 + eps >= hi {
            return f64::INFINITY;
        }
        let r = quadrature::integrate(|z| 1.0 / self.density_1d(z), z0 - eps, z0 + eps, 0.0, 1e-10, 500);
        if r.converged {
            r.value
        } else {
            f64::INFINITY
        }
    }
}

/// Symmetric small-jump α-stable component with Lévy density
/// `c|z|^{-1-α}` on `0 < |z| <= 1`, truncated below `κ` so that the
/// neglected variance `2cκ^{2-α} t/(2-α)` stays under `1e-6`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StableSurrogate {
    pub alpha: f64,
    pub c: f64,
}

impl StableSurrogate {
    pub const NEGLECTED_VARIANCE: f64 = 1e-6;
    /// Largest expected number of kept jumps per path.
    pub const MAX_EXPECTED_JUMPS: f64 = 1e5;

    pub fn truncation(&self, t: f64) -> f64 {
        let k = (Self::NEGLECTED_VARIANCE * (2.0 - self.alpha) / (2.0 * self.c * t))
            .powf(1.0 / (2.0 - self.alpha));
        k.min(1.0)
    }

    pub fn neglected_variance(&self, t: f64) -> f64 {
        2.0 * self.c * self.truncation(t).powf(2.0 - self.alpha) * t / (2.0 - self.alpha)
    }

    /// Rate of the kept jumps `κ < |z| <= 1`.
    pub fn kept_rate(&self, t: f64) -> f64 {
        2.0 * self.c * (self.truncation(t).powf(-self.alpha) - 1.0) / self.alpha
    }

    /// Refuses horizons where the truncated series needs more than
    /// `MAX_EXPECTED_JUMPS` jumps per path.
    pub fn check_horizon(&self, t: f64) -> Result<()> {
        let n = self.kept_rate(t) * t;
        if n > Self::MAX_EXPECTED_JUMPS {
            return invalid(format!(
                "α-stable surrogate (α = {}) needs {n:.3e} jumps per path at t = {t}",
                self.alpha
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JumpSpec {
    pub dim: usize,
    pub flow: Flow,
    pub rho0: JumpDensity,
    /// `ν₀(R^d)`.
    pub lambda0: f64,
    pub extra_levy: Option<StableSurrogate>,
}

impl JumpSpec {
    pub fn new(
        dim: usize,
        flow: Flow,
        rho0: JumpDensity,
        lambda0: f64,
        extra_levy: Option<StableSurrogate>,
    ) -> Result<Self> {
        if dim == 0 {
            return invalid("dimension must be at least 1");
        }
        if !(lambda0 > 0.0 && lambda0.is_finite()) {
            return invalid(format!("jump intensity {lambda0} must be positive and finite"));
        }
        if let Flow::General(a) = &flow {
            if a.nrows() != dim || a.ncols() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim * dim,
                    found: a.len(),
                });
            }
        }
        if let Some(s) = extra_levy {
            if !(s.alpha > 0.0 && s.alpha < 2.0 && s.c > 0.0) {
                return invalid("surrogate needs α in (0, 2) and c > 0");
            }
        }
        let spec = JumpSpec {
            dim,
            flow,
            rho0,
            lambda0,
            extra_levy,
        };
        spec.validate_flow()?;
        spec.validate_density()?;
        Ok(spec)
    }

    /// Compound Poisson in dimension 1 with `A = a`.
    pub fn scalar(a: f64, rho0: JumpDensity, lambda0: f64) -> Result<Self> {
        let flow = if a == 0.0 { Flow::Zero } else { Flow::Scalar(a) };
        Self::new(1, flow, rho0, lambda0, None)
    }

    fn validate_flow(&self) -> Result<()> {
        let a = self.flow.matrix(self.dim);
        let mut stream = PathStream::new(0xF10, Domain::Probe, 0, self.dim);
        let mut v = vec![0.0; self.dim];
        for _ in 0..256 {
            stream.normals(&mut v);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let u = DVector::from_iterator(self.dim, v.iter().map(|x| x / n));
            let q = u.dot(&(&a * &u));
            if q > 1e-9 {
                return invalid(format!("<Ax, x> = {q} > 0 on the unit sphere"));
            }
        }
        Ok(())
    }

    fn validate_density(&self) -> Result<()> {
        if self.dim > 2 {
            return Ok(());
        }
        let (lo, hi) = self.rho0.support();
        let one = |g: &dyn Fn(f64) -> f64| {
            if lo.is_finite() {
                quadrature::integrate(g, lo, hi, 1e-12, 1e-12, 500).value
            } else {
                quadrature::integrate_to_infinity(g, 0.0, 1e-12, 1e-12, 500).value
                    + quadrature::integrate_to_infinity(|z| g(-z), 0.0, 1e-12, 1e-12, 500).value
            }
        };
        let mass = if self.dim == 1 {
            one(&|z| self.rho0.density(&[z]))
        } else {
            one(&|z1| one(&|z2| self.rho0.density(&[z1, z2])))
        };
        if (mass - 1.0).abs() > 1e-6 {
            return invalid(format!("jump density integrates to {mass}, not 1"));
        }
        Ok(())
    }
}

/// One exactly simulated path.
struct PathDraw {
    terminal: Vec<f64>,
    count: usize,
    times: Vec<f64>,
    sizes: Vec<f64>,
}

fn draw_path(spec: &JumpSpec, x: &[f64], t: f64, seed: u64, path: u64) -> PathDraw {
    let d = spec.dim;
    let mut skeleton = PathStream::new(seed, Domain::JumpSkeleton, path, 1);
    let mut size_stream = PathStream::new(seed, Domain::JumpSizes, path, d);
    let mean = spec.lambda0 * t;
    let count = Poisson::new(mean)
        .map(|p| p.sample(skeleton.rng_mut()) as usize)
        .unwrap_or(0);
    let mut times: Vec<f64> = (0..count).map(|_| t * skeleton.uniform()).collect();
    times.sort_by(f64::total_cmp);
    let mut sizes = vec![0.0; count * d];
    for chunk in sizes.chunks_mut(d) {
        spec.rho0.sample(&mut size_stream, chunk);
    }
    let mut terminal = vec![0.0; d];
    spec.flow.apply(t, x, false, &mut terminal);
    let mut pushed = vec![0.0; d];
    for (tau, xi) in times.iter().zip(sizes.chunks(d)) {
        spec.flow.apply(t - tau, xi, false, &mut pushed);
        terminal.iter_mut().zip(&pushed).for_each(|(a, b)| *a += b);
    }
    if let Some(s) = spec.extra_levy {
        let mut st = PathStream::new(seed, Domain::Surrogate, path, d);
        let kappa = s.truncation(t);
        let rate = s.kept_rate(t);
        let n = Poisson::new(rate * t)
            .map(|p| p.sample(st.rng_mut()) as usize)
            .unwrap_or(0);
        let mut z = vec![0.0; d];
        for _ in 0..n {
            let tau = t * st.uniform();
            for v in z.iter_mut() {
                // inverse CDF of |z|^{-1-α} on (κ, 1], random sign
                let u = st.uniform();
                let ka = kappa.powf(-s.alpha);
                let mag = (ka - u * (ka - 1.0)).powf(-1.0 / s.alpha);
                *v = if st.uniform() < 0.5 { -mag } else { mag };
            }
            spec.flow.apply(t - tau, &z, false, &mut pushed);
            terminal.iter_mut().zip(&pushed).for_each(|(a, b)| *a += b);
        }
    }
    PathDraw {
        terminal,
        count,
        times,
        sizes,
    }
}

#[derive(Debug, Clone)]
pub struct JumpPathBundle {
    pub spec: JumpSpec,
    pub start: Vec<f64>,
    pub horizon: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub counts: Vec<usize>,
    terminals: Vec<f64>,
    /// Jump times and sizes of every path, kept for `Record::Full`.
    offsets: Vec<usize>,
    times: Vec<f64>,
    sizes: Vec<f64>,
}

impl JumpPathBundle {
    pub fn terminal(&self, path: usize) -> &[f64] {
        &self.terminals[path * self.spec.dim..(path + 1) * self.spec.dim]
    }

    pub fn terminals(&self) -> impl Iterator<Item = &[f64]> {
        self.terminals.chunks(self.spec.dim)
    }

    pub fn has_skeleton(&self) -> bool {
        !self.offsets.is_empty()
    }

    /// Jump times of `path` (empty unless the skeleton was recorded).
    pub fn jump_times(&self, path: usize) -> &[f64] {
        if !self.has_skeleton() {
            return &[];
        }
        &self.times[self.offsets[path]..self.offsets[path + 1]]
    }

    pub fn jump_sizes(&self, path: usize) -> &[f64] {
        if !self.has_skeleton() {
            return &[];
        }
        let d = self.spec.dim;
        &self.sizes[self.offsets[path] * d..self.offsets[path + 1] * d]
    }
}

fn check_point(dim: usize, x: &[f64]) -> Result<()> {
    if x.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return invalid("start point must be finite");
    }
    Ok(())
}

/// Exact simulation of `X_t^x` on `n_paths` paths.
pub fn simulate_jump(
    spec: &JumpSpec,
    x: &[f64],
    t: f64,
    n_paths: usize,
    seed: u64,
    record: Record,
) -> Result<JumpPathBundle> {
    check_point(spec.dim, x)?;
    if !(t > 0.0 && t.is_finite()) {
        return invalid(format!("horizon {t} must be positive"));
    }
    if n_paths == 0 {
        return invalid("need at least one path");
    }
    if let Some(s) = spec.extra_levy {
        s.check_horizon(t)?;
    }
    let draws: Vec<PathDraw> = (0..n_paths as u64)
        .into_par_iter()
        .map(|p| draw_path(spec, x, t, seed, p))
        .collect();
    let mut counts = Vec::with_capacity(n_paths);
    let mut terminals = Vec::with_capacity(n_paths * spec.dim);
    let (mut offsets, mut times, mut sizes) = (Vec::new(), Vec::new(), Vec::new());
    if record == Record::Full {
        offsets.push(0);
    }
    for d in draws {
        counts.push(d.count);
        terminals.extend_from_slice(&d.terminal);
        if record == Record::Full {
            times.extend_from_slice(&d.times);
            sizes.extend_from_slice(&d.sizes);
            offsets.push(times.len());
        }
    }
    Ok(JumpPathBundle {
        spec: spec.clone(),
        start: x.to_vec(),
        horizon: t,
        n_paths,
        seed,
        counts,
        terminals,
        offsets,
        times,
        sizes,
    })
}

fn need_bounded(f: &TestFunction) -> Result<()> {
    if !f.osc().is_finite() {
        return invalid(format!("test function {} must be bounded", f.id()));
    }
    Ok(())
}

/// Estimate of `∇P¹_t f(x)`, `P¹_t f(x) = E[f(X_t^x) 1{N_t >= 1}]`, from
/// `-E[f(X_t^x) 1{N_t >= 1} (1/N_t) Σ e^{Aᵀτ_i} ∇log ρ₀(ξ_i)]`; one report
/// per coordinate.
pub fn jump_derivative(
    spec: &JumpSpec,
    x: &[f64],
    f: &TestFunction,
    t: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<EstimateReport>> {
    check_point(spec.dim, x)?;
    f.validate(spec.dim)?;
    need_bounded(f)?;
    if !(t > 0.0) {
        return invalid(format!("horizon {t} must be positive"));
    }
    let d = spec.dim;
    let samples: Vec<Vec<f64>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|p| {
            let path = draw_path(spec, x, t, seed, p);
            let mut w = vec![0.0; d];
            if path.count == 0 {
                return w;
            }
            let mut g = vec![0.0; d];
            let mut pulled = vec![0.0; d];
            for (tau, xi) in path.times.iter().zip(path.sizes.chunks(d)) {
                spec.rho0.grad_log(xi, &mut g);
                spec.flow.apply(*tau, &g, true, &mut pulled);
                w.iter_mut().zip(&pulled).for_each(|(a, b)| *a += b);
            }
            let fx = f.eval(&path.terminal);
            let n = path.count as f64;
            w.iter_mut().for_each(|a| *a *= -fx / n);
            w
        })
        .collect();
    Ok((0..d)
        .map(|j| {
            let col: Vec<f64> = samples.iter().map(|w| w[j]).collect();
            let reference = matches!(f, TestFunction::Constant(_)).then_some(0.0);
            EstimateReport::new(MeanSe::of(&col), reference)
        })
        .collect())
}

/// Central differences of `P¹_t f` along each coordinate, re-simulating the
/// same skeleton (same seed) from the shifted starts. The bias budget uses
/// `|e^{At}e_j| <= 1`, which follows from `<Ax, x> <= 0`.
pub fn jump_fd_oracle(
    spec: &JumpSpec,
    x: &[f64],
    f: &TestFunction,
    t: f64,
    n_paths: usize,
    seed: u64,
    delta: f64,
) -> Result<Vec<FdEstimate>> {
    check_point(spec.dim, x)?;
    f.validate(spec.dim)?;
    need_bounded(f)?;
    if !(delta > 0.0) {
        return invalid(format!("delta = {delta} must be positive"));
    }
    let d = spec.dim;
    let third = f.third_derivative_bound().unwrap_or(f64::INFINITY);
    (0..d)
        .map(|j| {
            let mut plus = x.to_vec();
            let mut minus = x.to_vec();
            plus[j] += delta;
            minus[j] -= delta;
            let diffs: Vec<f64> = (0..n_paths as u64)
                .into_par_iter()
                .map(|p| {
                    let a = draw_path(spec, &plus, t, seed, p);
                    if a.count == 0 {
                        return 0.0;
                    }
                    let b = draw_path(spec, &minus, t, seed, p);
                    (f.eval(&a.terminal) - f.eval(&b.terminal)) / (2.0 * delta)
                })
                .collect();
            let reference = matches!(f, TestFunction::Constant(_)).then_some(0.0);
            Ok(FdEstimate {
                report: EstimateReport::new(MeanSe::of(&diffs), reference),
                bias_budget: third * delta * delta / 6.0,
            })
        })
        .collect()
}

/// Status of the small-ball hypothesis `∫_{|z-z₀|<=ε} ρ₀^{-1} < ∞`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Hypothesis {
    NotChecked,
    Holds(f64),
    Fails,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayPoint {
    pub t: f64,
    pub tv_hat: f64,
    pub se: f64,
    /// `2e^{-λ₀t}`.
    pub lower_bound: f64,
    pub bin_width: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayReport {
    pub points: Vec<DecayPoint>,
    pub slope: f64,
    pub intercept: f64,
    pub hypothesis: Hypothesis,
    /// Set when the hypothesis fails or the surrogate component is on.
    pub exploratory: bool,
    /// Whether the `t^{-1/2}` window applies to this spec.
    pub sharp_case: bool,
    pub n_paths: usize,
    pub seed: u64,
}

pub const SLOPE_WINDOW: (f64, f64) = (-0.65, -0.35);

impl DecayReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("t,tv_hat,se,lower_bound\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{:e},{:e},{:e}", p.t, p.tv_hat, p.se, p.lower_bound);
        }
        s
    }

    pub fn lower_bound_rows(&self) -> Vec<CheckRow> {
        self.points
            .iter()
            .map(|p| {
                let row = CheckRow::new(format!("tv_jump:lower:t={}", p.t), p.lower_bound, p.tv_hat, p.se)
                    .with_mc(self.n_paths, self.seed);
                if self.exploratory {
                    row.exploratory()
                } else {
                    row
                }
            })
            .collect()
    }

    /// Slope inside the sharpness window, as two exact rows.
    pub fn slope_rows(&self) -> Vec<CheckRow> {
        let mark = |r: CheckRow| {
            let r = r.with_mc(self.n_paths, self.seed).with_slack(0.0);
            if self.exploratory || !self.sharp_case {
                r.exploratory()
            } else {
                r
            }
        };
        vec![
            mark(CheckRow::analytic("tv_jump:slope_upper", self.slope, SLOPE_WINDOW.1)),
            mark(CheckRow::analytic("tv_jump:slope_lower", SLOPE_WINDOW.0, self.slope)),
        ]
    }
}

/// Histogram TV between the laws of `X_t^x` and `X_t^y` along `t_grid`, with
/// a least-squares slope in log-log coordinates.
pub fn tv_decay_experiment(
    spec: &JumpSpec,
    x: f64,
    y: f64,
    t_grid: &[f64],
    n_paths: usize,
    seed: u64,
    small_ball: Option<(f64, f64)>,
) -> Result<DecayReport> {
    if spec.dim != 1 {
        return invalid("TV decay runs in dimension 1");
    }
    if t_grid.len() < 2 || t_grid.iter().any(|t| !(*t > 0.0)) {
        return invalid("t grid needs at least two positive times");
    }
    let lo = t_grid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t_grid.iter().copied().fold(0.0, f64::max);
    if (hi / lo).log10() < 1.5 {
        return invalid(format!("t grid spans {:.2} decades; need 1.5", (hi / lo).log10()));
    }
    if lo < 1.0 + (x - y).powi(2) {
        return invalid(format!("smallest time {lo} is below 1 + |x-y|²"));
    }
    let hypothesis = match small_ball {
        None => Hypothesis::NotChecked,
        Some((z0, eps)) => {
            let m = spec.rho0.inverse_mass(z0, eps);
            if m.is_finite() {
                Hypothesis::Holds(m)
            } else {
                Hypothesis::Fails
            }
        }
    };
    let mut points = Vec::with_capacity(t_grid.len());
    for (k, &t) in t_grid.iter().enumerate() {
        let a = simulate_jump(spec, &[x], t, n_paths, derive_seed(seed, 2 * k as u64), Record::Terminal)?;
        let b = simulate_jump(spec, &[y], t, n_paths, derive_seed(seed, 2 * k as u64 + 1), Record::Terminal)?;
        let xa: Vec<f64> = a.terminals().map(|z| z[0]).collect();
        let xb: Vec<f64> = b.terminals().map(|z| z[0]).collect();
        let h = histogram_tv(&xa, &xb)?;
        points.push(DecayPoint {
            t,
            tv_hat: h.tv,
            se: h.se,
            lower_bound: 2.0 * (-spec.lambda0 * t).exp(),
            bin_width: h.bin_width,
        });
    }
    let lx: Vec<f64> = points.iter().map(|p| p.t.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.tv_hat.max(1e-300).ln()).collect();
    let (slope, intercept) = linear_fit(&lx, &ly);
    let sharp_case = matches!(spec.rho0, JumpDensity::Gaussian { .. })
        && spec.flow == Flow::Zero
        && spec.extra_levy.is_none();
    Ok(DecayReport {
        points,
        slope,
        intercept,
        hypothesis,
        exploratory: hypothesis == Hypothesis::Fails || spec.extra_levy.is_some(),
        sharp_case,
        n_paths,
        seed,
    })
}

/// Bernstein functions of the catalogue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bernstein {
    /// `S(r) = (c r)^{β/2}`.
    PowerLaw { beta: f64, c: f64 },
    /// `S(r) = log(1 + r)`.
    Log1p,
}

impl Bernstein {
    pub fn power_law(beta: f64, c: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 2.0) {
            return invalid(format!("β = {beta} must lie in (0, 2)"));
        }
        if !(c > 0.0) {
            return invalid("c must be positive");
        }
        Ok(Bernstein::PowerLaw { beta, c })
    }

    pub fn from_id(id: &str) -> Result<Self> {
        if id == "log1p" {
            return Ok(Bernstein::Log1p);
        }
        let bad = || Error::InvalidInput(format!("unknown Bernstein function `{id}`"));
        let mut parts = id.split(':');
        if parts.next() != Some("power") {
            return Err(bad());
        }
        let args: Vec<f64> = parts.map(|s| s.parse().map_err(|_| bad())).collect::<Result<_>>()?;
        match args.as_slice() {
            [b] => Self::power_law(*b, 1.0),
            [b, c] => Self::power_law(*b, *c),
            _ => Err(bad()),
        }
    }

    pub fn eval(&self, r: f64) -> f64 {
        match self {
            Bernstein::PowerLaw { beta, c } => (c * r).powf(0.5 * beta),
            Bernstein::Log1p => r.ln_1p(),
        }
    }

    /// Whether `∫ r^{-1/2} e^{-tS(r)} dr` converges: always for power laws,
    /// and for `log(1+r)` iff `t > 1/2` (the integrand decays like
    /// `r^{-1/2-t}`).
    pub fn alpha_finite(&self, t: f64) -> bool {
        match self {
            Bernstein::PowerLaw { .. } => true,
            Bernstein::Log1p => t > 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaValue {
    Finite { value: f64, rel_err: f64 },
    Infinite,
}

impl AlphaValue {
    pub fn value(&self) -> f64 {
        match self {
            AlphaValue::Finite { value, .. } => *value,
            AlphaValue::Infinite => f64::INFINITY,
        }
    }
}

/// `α(t) = ∫₀^∞ r^{-1/2} e^{-tS(r)} dr = 2∫₀^∞ e^{-tS(u²)} du`, integrated
/// on the scale `L` where `tS(L²) = 1`.
pub fn bernstein_alpha(s: &Bernstein, t: f64) -> Result<AlphaValue> {
    if !(t > 0.0 && t.is_finite()) {
        return invalid(format!("t = {t} must be positive"));
    }
    if !s.alpha_finite(t) {
        return Ok(AlphaValue::Infinite);
    }
    // scale with t S(L²) = 1, by bisection in log L
    let (mut lo, mut hi) = (-300.0f64, 300.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if t * s.eval((2.0 * mid).exp()) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let scale = (0.5 * (lo + hi)).exp();
    let r = quadrature::integrate_to_infinity(
        |w| (-t * s.eval((scale * w).powi(2))).exp(),
        0.0,
        0.0,
        1e-12,
        4000,
    );
    let value = 2.0 * scale * r.value;
    let rel_err = r.relative_error();
    if !r.converged || rel_err > 1e-6 {
        return Err(Error::Solver(format!(
            "α({t}) quadrature reached relative error {rel_err:e}"
        )));
    }
    Ok(AlphaValue::Finite { value, rel_err })
}

/// `α(t) t^{1/β}` along `t_grid` for `S(r) = (cr)^{β/2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaRateReport {
    pub beta: f64,
    pub c: f64,
    /// `(t, α(t), quadrature relative error)`.
    pub table: Vec<(f64, f64, f64)>,
    /// Mean of `α(t) t^{1/β}` over the grid.
    pub constant: f64,
    /// Largest relative deviation of `α(t) t^{1/β}` from `constant`.
    pub max_rel_dev: f64,
    /// `2Γ(1+1/β)/√c`.
    pub closed_form: f64,
}

pub const ALPHA_RATE_TOL: f64 = 1e-5;

impl AlphaRateReport {
    pub fn passed(&self) -> bool {
        self.max_rel_dev <= ALPHA_RATE_TOL
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("t,alpha,rel_err\n");
        for (t, a, e) in &self.table {
            let _ = writeln!(s, "{t},{a:e},{e:e}");
        }
        s
    }

    pub fn rows(&self) -> Vec<CheckRow> {
        let id = format!("alpha_rate:beta={}", self.beta);
        vec![
            CheckRow::analytic(format!("{id}:scaling"), self.max_rel_dev, ALPHA_RATE_TOL).with_slack(0.0),
            CheckRow::analytic(
                format!("{id}:closed_form"),
                (self.constant - self.closed_form).abs() / self.closed_form,
                1e-6,
            )
            .with_slack(0.0),
        ]
    }
}

pub fn alpha_rate_check(beta: f64, c: f64, t_grid: &[f64]) -> Result<AlphaRateReport> {
    let s = Bernstein::power_law(beta, c)?;
    if t_grid.is_empty() {
        return invalid("empty t grid");
    }
    let mut table = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        match bernstein_alpha(&s, t)? {
            AlphaValue::Finite { value, rel_err } => table.push((t, value, rel_err)),
            AlphaValue::Infinite => unreachable!("power laws give finite α"),
        }
    }
    let scaled: Vec<f64> = table.iter().map(|(t, a, _)| a * t.powf(1.0 / beta)).collect();
    let constant = scaled.iter().sum::<f64>() / scaled.len() as f64;
    let max_rel_dev = scaled
        .iter()
        .map(|v| (v - constant).abs() / constant)
        .fold(0.0, f64::max);
    Ok(AlphaRateReport {
        beta,
        c,
        table,
        constant,
        max_rel_dev,
        closed_form: 2.0 * gamma(1.0 + 1.0 / beta) / c.sqrt(),
    })
}

/// Derivative formula against the finite-difference oracle, per coordinate.
pub fn jump_agreement_rows(
    check_id: &str,
    formula: &[EstimateReport],
    oracle: &[FdEstimate],
    seed: u64,
) -> Vec<CheckRow> {
    formula
        .iter()
        .zip(oracle)
        .enumerate()
        .map(|(j, (b, o))| {
            CheckRow::new(
                format!("{check_id}:coord{j}"),
                (b.estimate - o.report.estimate).abs(),
                0.0,
                b.std_error.hypot(o.report.std_error),
            )
            .with_slack(o.bias_budget + ANALYTIC_TOL)
            .with_mc(b.n_paths, seed)
        })
        .collect()
}

/// Empirical `P(N_t = 0)` against `e^{-λ₀t}` within 4 SE.
pub fn no_jump_row(bundle: &JumpPathBundle) -> CheckRow {
    let zeros: Vec<f64> = bundle.counts.iter().map(|&n| (n == 0) as u8 as f64).collect();
    let m = MeanSe::of(&zeros);
    let p = (-bundle.spec.lambda0 * bundle.horizon).exp();
    let se = (p * (1.0 - p) / bundle.n_paths as f64).sqrt();
    CheckRow::new("jump:no_jump_probability", (m.mean - p).abs(), 0.0, se)
        .with_sigmas(4.0)
        .with_mc(bundle.n_paths, bundle.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn densities_are_normalized() {
        for rho in [JumpDensity::Gaussian { sigma: 0.7 }, JumpDensity::CosSquared] {
            JumpSpec::new(2, Flow::Zero, rho, 1.0, None).unwrap();
        }
    }

    #[test]
    fn expanding_flow_is_rejected() {
        assert!(JumpSpec::scalar(0.5, JumpDensity::CosSquared, 1.0).is_err());
        let rot = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert!(JumpSpec::new(2, Flow::General(rot), JumpDensity::CosSquared, 1.0, None).is_ok());
    }

    #[test]
    fn flow_matches_general_matrix() {
        let v = [0.3, -1.2];
        let mut a = [0.0; 2];
        let mut b = [0.0; 2];
        Flow::Scalar(-0.7).apply(1.3, &v, false, &mut a);
        Flow::General(DMatrix::identity(2, 2) * -0.7).apply(1.3, &v, false, &mut b);
        assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
    }

    #[test]
    fn power_law_closed_form() {
        let s = Bernstein::power_law(1.0, 1.0).unwrap();
        for t in [0.1, 1.0, 10.0] {
            let a = bernstein_alpha(&s, t).unwrap().value();
            assert!((a * t - 2.0).abs() < 1e-8, "{t}: {a}");
        }
    }

    #[test]
    fn log1p_diverges_for_small_t() {
        assert_eq!(bernstein_alpha(&Bernstein::Log1p, 0.5).unwrap(), AlphaValue::Infinite);
        assert!(bernstein_alpha(&Bernstein::Log1p, 2.0).unwrap().value().is_finite());
    }

    #[test]
    fn surrogate_truncation_meets_variance_target() {
        let s = StableSurrogate { alpha: 1.2, c: 0.5 };
        assert!(s.neglected_variance(3.0) <= StableSurrogate::NEGLECTED_VARIANCE * (1.0 + 1e-9));
    }

    #[test]
    fn inverse_mass_detects_zeros() {
        assert!(JumpDensity::CosSquared.inverse_mass(0.9, 0.2).is_infinite());
        assert!(JumpDensity::CosSquared.inverse_mass(0.0, 0.5).is_finite());
        let g = JumpDensity::Gaussian { sigma: 1.0 }.inverse_mass(0.0, 1.0);
        // ∫_{-1}^{1} √(2π) e^{z²/2} dz
        let exact = quadrature::integrate(
            |z| (2.0 * std::f64::consts::PI).sqrt() * (0.5 * z * z).exp(),
            -1.0,
            1.0,
            0.0,
            1e-13,
            100,
        )
        .value;
        assert!((g - exact).abs() < 1e-9);
    }
}
