//! Monte Carlo and closed-form checks of the derivative formula, gradient
//! bound, Harnack-type inequalities and coupling-time TV bounds.
//!
//! Every check reduces to one inequality `lhs <= rhs + sigmas·se + slack`
//! and is reported as a [`CheckRow`]. Closed-form sides for OU / Brownian
//! specs come from [`GaussianFlow`].

use std::fmt::{self, Write as _};

use rayon::prelude::*;
use statrs::function::erf::erf;

use crate::couplings::{coupling_time_tail, entropy_bound, CouplingRun};
use crate::error::{invalid, Error, Result};
use crate::rng::{derive_seed, Domain, PathStream};
use crate::sde::{
    check_flagged, check_one_sided_k, check_start, simulate, Diffusion, DiffusionSpec, Drift,
    KConvention, Record, StepGrid,
};
use crate::stats::{histogram_tv, MeanSe};

/// Tolerance of closed-form checks.
pub const ANALYTIC_TOL: f64 = 1e-9;
/// Multiple of the combined standard error granted to MC inequality checks.
pub const MC_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub enum TestFunction {
    Constant(f64),
    /// `y ↦ y_coord`.
    Projection { coord: usize },
    /// `exp(-|y-c|²/(2w²))`.
    Bump { centre: Vec<f64>, width: f64 },
    /// `exp(<a, y>)`.
    ExpLinear { a: Vec<f64> },
    /// `½(1 + tanh(y_coord/scale))`.
    SmoothStep { coord: usize, scale: f64 },
    /// `shift + base`.
    Lifted { base: Box<TestFunction>, shift: f64 },
}

/// `sup_z |d³/dz³ e^{-z²/2}|`, attained at `z² = 3 - √6`.
fn gaussian_third_derivative_sup() -> f64 {
    let z2 = 3.0 - 6f64.sqrt();
    let z = z2.sqrt();
    (3.0 * z - z * z2) * (-0.5 * z2).exp()
}

impl TestFunction {
    /// Ids: `constant:c`, `projection[:i]`, `bump[:w[:c]]`,
    /// `exp_linear:a_1[:...:a_d]`, `smooth_step[:i[:s]]`; a `1+` prefix
    /// lifts any of them by one.
    pub fn from_id(id: &str, dim: usize) -> Result<Self> {
        if let Some(rest) = id.strip_prefix("1+") {
            return Ok(TestFunction::Lifted {
                base: Box::new(Self::from_id(rest, dim)?),
                shift: 1.0,
            });
        }
        let bad = || Error::InvalidInput(format!("bad test function `{id}`"));
        let mut parts = id.split(':');
        let name = parts.next().unwrap_or("");
        let args: Vec<f64> = parts
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        let coord = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < dim {
                Ok(v as usize)
            } else {
                Err(bad())
            }
        };
        let f = match (name, args.as_slice()) {
            ("constant", [c]) => TestFunction::Constant(*c),
            ("projection", []) => TestFunction::Projection { coord: 0 },
            ("projection", [i]) => TestFunction::Projection { coord: coord(*i)? },
            ("bump", []) => TestFunction::Bump {
                centre: vec![0.0; dim],
                width: 1.0,
            },
            ("bump", [w]) => TestFunction::Bump {
                centre: vec![0.0; dim],
                width: *w,
            },
            ("bump", [w, c]) => TestFunction::Bump {
                centre: vec![*c; dim],
                width: *w,
            },
            ("exp_linear", [a]) => {
                let mut v = vec![0.0; dim];
                v[0] = *a;
                TestFunction::ExpLinear { a: v }
            }
            ("exp_linear", a) if a.len() == dim => TestFunction::ExpLinear { a: a.to_vec() },
            ("smooth_step", []) => TestFunction::SmoothStep { coord: 0, scale: 1.0 },
            ("smooth_step", [i]) => TestFunction::SmoothStep {
                coord: coord(*i)?,
                scale: 1.0,
            },
            ("smooth_step", [i, s]) => TestFunction::SmoothStep {
                coord: coord(*i)?,
                scale: *s,
            },
            _ => return Err(bad()),
        };
        f.validate(dim)?;
        Ok(f)
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            TestFunction::Constant(c) if !c.is_finite() => invalid("constant must be finite"),
            TestFunction::Projection { coord } | TestFunction::SmoothStep { coord, .. }
                if *coord >= dim =>
            {
                invalid(format!("coordinate {coord} out of range for dimension {dim}"))
            }
            TestFunction::Bump { centre, width } => {
                if centre.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        found: centre.len(),
                    });
                }
                if !(*width > 0.0) {
                    return invalid("bump width must be positive");
                }
                Ok(())
            }
            TestFunction::ExpLinear { a } if a.len() != dim => Err(Error::DimensionMismatch {
                expected: dim,
                found: a.len(),
            }),
            TestFunction::SmoothStep { scale, .. } if !(*scale > 0.0) => {
                invalid("step scale must be positive")
            }
            TestFunction::Lifted { base, .. } => base.validate(dim),
            _ => Ok(()),
        }
    }

    pub fn id(&self) -> String {
        match self {
            TestFunction::Constant(c) => format!("constant:{c}"),
            TestFunction::Projection { coord } => format!("projection:{coord}"),
            TestFunction::Bump { centre, width } => format!("bump:{width}:{}", centre[0]),
            TestFunction::ExpLinear { a } => {
                let parts: Vec<String> = a.iter().map(|v| v.to_string()).collect();
                format!("exp_linear:{}", parts.join(":"))
            }
            TestFunction::SmoothStep { coord, scale } => format!("smooth_step:{coord}:{scale}"),
            TestFunction::Lifted { base, shift } => {
                if *shift == 1.0 {
                    format!("1+{}", base.id())
                } else {
                    format!("{shift}+{}", base.id())
                }
            }
        }
    }

    #[inline]
    pub fn eval(&self, y: &[f64]) -> f64 {
        match self {
            TestFunction::Constant(c) => *c,
            TestFunction::Projection { coord } => y[*coord],
            TestFunction::Bump { centre, width } => {
                let r2: f64 = y.iter().zip(centre).map(|(a, c)| (a - c).powi(2)).sum();
                (-r2 / (2.0 * width * width)).exp()
            }
            TestFunction::ExpLinear { a } => a.iter().zip(y).map(|(a, v)| a * v).sum::<f64>().exp(),
            TestFunction::SmoothStep { coord, scale } => 0.5 * (1.0 + (y[*coord] / scale).tanh()),
            TestFunction::Lifted { base, shift } => shift + base.eval(y),
        }
    }

    pub fn gradient(&self, y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        match self {
            TestFunction::Constant(_) => {}
            TestFunction::Projection { coord } => out[*coord] = 1.0,
            TestFunction::Bump { centre, width } => {
                let f = self.eval(y);
                for i in 0..y.len() {
                    out[i] = -f * (y[i] - centre[i]) / (width * width);
                }
            }
            TestFunction::ExpLinear { a } => {
                let f = self.eval(y);
                for i in 0..y.len() {
                    out[i] = a[i] * f;
                }
            }
            TestFunction::SmoothStep { coord, scale } => {
                let c = (y[*coord] / scale).cosh();
                out[*coord] = 0.5 / (scale * c * c);
            }
            TestFunction::Lifted { base, .. } => base.gradient(y, out),
        }
    }

    /// `sup f - inf f` (infinite for unbounded functions).
    pub fn osc(&self) -> f64 {
        match self {
            TestFunction::Constant(_) => 0.0,
            TestFunction::Projection { .. } => f64::INFINITY,
            TestFunction::Bump { .. } | TestFunction::SmoothStep { .. } => 1.0,
            TestFunction::ExpLinear { a } => {
                if a.iter().all(|v| *v == 0.0) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            TestFunction::Lifted { base, .. } => base.osc(),
        }
    }

    pub fn infimum(&self) -> f64 {
        match self {
            TestFunction::Constant(c) => *c,
            TestFunction::Projection { .. } => f64::NEG_INFINITY,
            TestFunction::Bump { .. } | TestFunction::SmoothStep { .. } => 0.0,
            TestFunction::ExpLinear { a } => {
                if a.iter().all(|v| *v == 0.0) {
                    1.0
                } else {
                    0.0
                }
            }
            TestFunction::Lifted { base, shift } => shift + base.infimum(),
        }
    }

    /// `sup |∇f|`.
    pub fn lipschitz(&self) -> f64 {
        match self {
            TestFunction::Constant(_) => 0.0,
            TestFunction::Projection { .. } => 1.0,
            TestFunction::Bump { width, .. } => (-0.5f64).exp() / width,
            TestFunction::ExpLinear { a } => {
                if a.iter().all(|v| *v == 0.0) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            TestFunction::SmoothStep { scale, .. } => 0.5 / scale,
            TestFunction::Lifted { base, .. } => base.lipschitz(),
        }
    }

    /// `sup` over points and unit directions of `|∂³_u f|`, when finite.
    pub fn third_derivative_bound(&self) -> Option<f64> {
        match self {
            TestFunction::Constant(_) | TestFunction::Projection { .. } => Some(0.0),
            TestFunction::Bump { width, .. } => Some(gaussian_third_derivative_sup() / width.powi(3)),
            TestFunction::SmoothStep { scale, .. } => Some(1.0 / scale.powi(3)),
            TestFunction::ExpLinear { .. } => None,
            TestFunction::Lifted { base, .. } => base.third_derivative_bound(),
        }
    }

    /// `f^p` when it stays inside the catalogue.
    pub fn power(&self, p: f64) -> Option<TestFunction> {
        match self {
            TestFunction::Constant(c) if *c >= 0.0 => Some(TestFunction::Constant(c.powf(p))),
            TestFunction::Bump { centre, width } => Some(TestFunction::Bump {
                centre: centre.clone(),
                width: width / p.sqrt(),
            }),
            TestFunction::ExpLinear { a } => Some(TestFunction::ExpLinear {
                a: a.iter().map(|v| p * v).collect(),
            }),
            _ => None,
        }
    }

    /// Compares the osc and Lipschitz metadata with values seen on a probe
    /// set: probes may not exceed the metadata by more than 1%, and must
    /// reach at least 99% of it. Unbounded metadata is checked for growth.
    pub fn verify_metadata(&self, dim: usize) -> Result<()> {
        self.validate(dim)?;
        let focus: Vec<f64> = match self.base() {
            TestFunction::Bump { centre, .. } => centre.clone(),
            _ => vec![0.0; dim],
        };
        let mut probes = Vec::new();
        for axis in 0..dim {
            for k in -4000..=4000 {
                let mut p = focus.clone();
                p[axis] += k as f64 * 0.005;
                probes.push(p);
            }
        }
        let mut stream = PathStream::new(0x7E57, Domain::Probe, 0, dim);
        for _ in 0..2000 {
            let mut p = vec![0.0; dim];
            stream.normals(&mut p);
            probes.push(p.iter().zip(&focus).map(|(a, c)| 3.0 * a + c).collect());
        }
        let (mut lo, mut hi, mut lip) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
        let mut g = vec![0.0; dim];
        for p in &probes {
            let v = self.eval(p);
            lo = lo.min(v);
            hi = hi.max(v);
            self.gradient(p, &mut g);
            lip = lip.max(g.iter().map(|a| a * a).sum::<f64>().sqrt());
        }
        let within = |seen: f64, claim: f64| {
            if claim.is_infinite() {
                seen > 10.0
            } else if claim == 0.0 {
                seen <= 1e-12
            } else {
                seen <= 1.01 * claim && seen >= 0.99 * claim
            }
        };
        if !within(hi - lo, self.osc()) {
            return invalid(format!("osc metadata {} disagrees with probes ({})", self.osc(), hi - lo));
        }
        if !within(lip, self.lipschitz()) {
            return invalid(format!(
                "Lipschitz metadata {} disagrees with probes ({lip})",
                self.lipschitz()
            ));
        }
        Ok(())
    }

    fn base(&self) -> &TestFunction {
        match self {
            TestFunction::Lifted { base, .. } => base.base(),
            f => f,
        }
    }
}

/// Law of `X_t^x` for `Z(x) = -r x`, `σ = I` (`r = 0` is Brownian motion):
/// `N(e^{-rt} x, v_t I)` with `v_t = (1 - e^{-2rt})/(2r)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianFlow {
    pub rate: f64,
}

impl GaussianFlow {
    pub fn of(spec: &DiffusionSpec) -> Option<Self> {
        if !spec.diffusion.is_identity() {
            return None;
        }
        match &spec.drift {
            Drift::Zero => Some(GaussianFlow { rate: 0.0 }),
            Drift::Linear { a, b } => {
                let d = spec.dim;
                let r = -a[0];
                let scalar = (0..d).all(|i| {
                    (0..d).all(|j| a[i * d + j] == if i == j { -r } else { 0.0 })
                });
                (scalar && b.iter().all(|v| *v == 0.0)).then_some(GaussianFlow { rate: r })
            }
            Drift::SinPerturbed { .. } => None,
        }
    }

    pub fn mean_factor(&self, t: f64) -> f64 {
        (-self.rate * t).exp()
    }

    pub fn variance(&self, t: f64) -> f64 {
        if self.rate.abs() < 1e-12 {
            t
        } else {
            -(-2.0 * self.rate * t).exp_m1() / (2.0 * self.rate)
        }
    }

    /// `P_t f(x)` in closed form, when available.
    pub fn mean(&self, f: &TestFunction, x: &[f64], t: f64) -> Option<f64> {
        let c = self.mean_factor(t);
        let v = self.variance(t);
        match f {
            TestFunction::Constant(k) => Some(*k),
            TestFunction::Projection { coord } => Some(c * x[*coord]),
            TestFunction::ExpLinear { a } => {
                let lin: f64 = a.iter().zip(x).map(|(a, y)| a * c * y).sum();
                let a2: f64 = a.iter().map(|a| a * a).sum();
                Some((lin + 0.5 * a2 * v).exp())
            }
            TestFunction::Bump { centre, width } => {
                let s = width * width + v;
                let r2: f64 = x.iter().zip(centre).map(|(y, m)| (c * y - m).powi(2)).sum();
                Some((width * width / s).powf(0.5 * x.len() as f64) * (-r2 / (2.0 * s)).exp())
            }
            TestFunction::SmoothStep { .. } => None,
            TestFunction::Lifted { base, shift } => self.mean(base, x, t).map(|m| m + shift),
        }
    }

    /// `∇_v P_t f(x)` in closed form, when available.
    pub fn gradient(&self, f: &TestFunction, x: &[f64], v: &[f64], t: f64) -> Option<f64> {
        let c = self.mean_factor(t);
        let var = self.variance(t);
        match f {
            TestFunction::Constant(_) => Some(0.0),
            TestFunction::Projection { coord } => Some(c * v[*coord]),
            TestFunction::ExpLinear { a } => {
                let av: f64 = a.iter().zip(v).map(|(a, w)| a * w).sum();
                Some(c * av * self.mean(f, x, t)?)
            }
            TestFunction::Bump { centre, width } => {
                let s = width * width + var;
                let dot: f64 = (0..x.len()).map(|i| (c * x[i] - centre[i]) * c * v[i]).sum();
                Some(-self.mean(f, x, t)? * dot / s)
            }
            TestFunction::SmoothStep { .. } => None,
            TestFunction::Lifted { base, .. } => self.gradient(base, x, v, t),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    Error,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Error => "error",
        })
    }
}

/// One verified inequality `lhs <= rhs + sigmas·se + slack`.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub check_id: String,
    pub lhs: f64,
    pub rhs: f64,
    /// Combined standard error of `rhs - lhs`; 0 for exact checks.
    pub se: f64,
    pub sigmas: f64,
    /// Deterministic allowance (bias budgets, analytic tolerance).
    pub slack: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub exploratory: bool,
    pub error: Option<String>,
}

pub const CHECK_HEADER: &str = "check_id,lhs,rhs,margin_se,verdict,n_paths,seed";

impl CheckRow {
    pub fn new(check_id: impl Into<String>, lhs: f64, rhs: f64, se: f64) -> Self {
        CheckRow {
            check_id: check_id.into(),
            lhs,
            rhs,
            se,
            sigmas: MC_SIGMAS,
            slack: 0.0,
            n_paths: 0,
            seed: 0,
            exploratory: false,
            error: None,
        }
    }

    /// Exact comparison with the analytic tolerance.
    pub fn analytic(check_id: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        CheckRow {
            slack: ANALYTIC_TOL,
            ..Self::new(check_id, lhs, rhs, 0.0)
        }
    }

    pub fn failed(check_id: impl Into<String>, err: &Error) -> Self {
        CheckRow {
            error: Some(err.to_string()),
            ..Self::new(check_id, f64::NAN, f64::NAN, f64::NAN)
        }
    }

    pub fn with_mc(mut self, n_paths: usize, seed: u64) -> Self {
        self.n_paths = n_paths;
        self.seed = seed;
        self
    }

    pub fn with_slack(mut self, slack: f64) -> Self {
        self.slack = slack;
        self
    }

    pub fn with_sigmas(mut self, sigmas: f64) -> Self {
        self.sigmas = sigmas;
        self
    }

    pub fn exploratory(mut self) -> Self {
        self.exploratory = true;
        self
    }

    pub fn verdict(&self) -> Verdict {
        if self.error.is_some() || self.lhs.is_nan() || self.rhs.is_nan() {
            return Verdict::Error;
        }
        if self.lhs <= self.rhs + self.sigmas * self.se + self.slack {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn passed(&self) -> bool {
        self.verdict() == Verdict::Pass
    }

    /// `(rhs + slack - lhs)/se`; the check passes iff this is `>= -sigmas`.
    pub fn margin_se(&self) -> f64 {
        let m = self.rhs + self.slack - self.lhs;
        if self.se > 0.0 {
            m / self.se
        } else if m > 0.0 {
            f64::INFINITY
        } else if m < 0.0 {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    }

    pub fn csv_line(&self) -> String {
        let verdict = if self.exploratory {
            format!("exploratory-{}", self.verdict())
        } else {
            self.verdict().to_string()
        };
        format!(
            "{},{:e},{:e},{:e},{},{},{}",
            self.check_id,
            self.lhs,
            self.rhs,
            self.margin_se(),
            verdict,
            self.n_paths,
            self.seed
        )
    }
}

pub fn rows_csv(rows: &[CheckRow]) -> String {
    let mut s = String::from(CHECK_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub estimate: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub reference: Option<f64>,
    /// `(pass, |estimate - reference|/se)` against the reference at 4 SE.
    pub verdict: Option<(bool, f64)>,
}

impl EstimateReport {
    pub fn new(m: MeanSe, reference: Option<f64>) -> Self {
        let verdict = reference.map(|r| {
            let z = if m.se > 0.0 {
                (m.mean - r).abs() / m.se
            } else if m.mean == r {
                0.0
            } else {
                f64::INFINITY
            };
            (z <= 4.0 || (m.mean - r).abs() <= ANALYTIC_TOL, z)
        });
        EstimateReport {
            estimate: m.mean,
            std_error: m.se,
            n_paths: m.n,
            reference,
            verdict,
        }
    }

    /// `|estimate - reference| <= 4 SE` as a check row.
    pub fn reference_row(&self, check_id: &str, seed: u64) -> Option<CheckRow> {
        self.reference.map(|r| {
            CheckRow::new(check_id, (self.estimate - r).abs(), 0.0, self.std_error)
                .with_sigmas(4.0)
                .with_slack(ANALYTIC_TOL)
                .with_mc(self.n_paths, seed)
        })
    }
}

fn need_identity(spec: &DiffusionSpec, what: &str) -> Result<()> {
    if spec.diffusion != Diffusion::Identity {
        return invalid(format!("{what} needs the identity diffusion"));
    }
    Ok(())
}

fn check_direction(dim: usize, v: &[f64]) -> Result<()> {
    if v.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: v.len(),
        });
    }
    Ok(())
}

/// Terminal states and derivative-formula weights
/// `(1/t) Σ <(t - s_k)∇_v Z(X_{s_k}) + v, ΔB_k>`, one pair per path.
fn bismut_ensemble(
    spec: &DiffusionSpec,
    x: &[f64],
    v: &[f64],
    grid: StepGrid,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<(Vec<f64>, f64)>> {
    let d = spec.dim;
    let sq = grid.h.sqrt();
    let out: Vec<Option<(Vec<f64>, f64)>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut stream = PathStream::new(seed, Domain::Brownian, p as u64, d);
            let mut state = x.to_vec();
            let mut next = vec![0.0; d];
            let mut dw = vec![0.0; d];
            let mut scratch = vec![0.0; d];
            let mut jv = vec![0.0; d];
            let mut integral = 0.0;
            for k in 0..grid.steps {
                stream.normals(&mut dw);
                dw.iter_mut().for_each(|a| *a *= sq);
                let lag = grid.horizon - grid.time(k);
                spec.drift.jacobian_apply(&state, v, &mut jv);
                for i in 0..d {
                    integral += (lag * jv[i] + v[i]) * dw[i];
                }
                spec.euler_step(&state, &dw, grid.h, &mut scratch, &mut next);
                std::mem::swap(&mut state, &mut next);
            }
            (state.iter().all(|a| a.is_finite()) && integral.is_finite())
                .then(|| (state, integral / grid.horizon))
        })
        .collect();
    check_flagged(out.iter().filter(|o| o.is_none()).count(), n_paths)?;
    Ok(out.into_iter().flatten().collect())
}

/// Derivative-formula estimates of `∇_v P_t f(x)` for several `f` sharing one
/// ensemble. References are filled from [`GaussianFlow`] when available.
pub fn bismut_batch(
    spec: &DiffusionSpec,
    x: &[f64],
    v: &[f64],
    fs: &[TestFunction],
    grid: StepGrid,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<EstimateReport>> {
    need_identity(spec, "the derivative formula")?;
    check_start(spec.dim, x)?;
    check_direction(spec.dim, v)?;
    for f in fs {
        f.validate(spec.dim)?;
    }
    let ens = bismut_ensemble(spec, x, v, grid, n_paths, seed)?;
    let flow = GaussianFlow::of(spec);
    Ok(fs
        .iter()
        .map(|f| {
            let vals: Vec<f64> = ens.iter().map(|(y, w)| f.eval(y) * w).collect();
            let reference = flow.and_then(|fl| fl.gradient(f, x, v, grid.horizon));
            EstimateReport::new(MeanSe::of(&vals), reference)
        })
        .collect())
}

pub fn bismut_gradient(
    spec: &DiffusionSpec,
    x: &[f64],
    v: &[f64],
    f: &TestFunction,
    grid: StepGrid,
    n_paths: usize,
    seed: u64,
) -> Result<EstimateReport> {
    Ok(bismut_batch(spec, x, v, std::slice::from_ref(f), grid, n_paths, seed)?.remove(0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdEstimate {
    pub report: EstimateReport,
    /// Bound on the `δ²` bias of the central difference.
    pub bias_budget: f64,
}

/// Central differences `(P_t f(x+δv) - P_t f(x-δv))/(2δ)` with common random
/// numbers for both starts.
///
/// The bias budget `sup|∂³ P_t f|·δ²/6` uses `|∂_v X_t| <= e^{Kt}|v|`, which
/// holds path by path for additive noise; for exp-linear `f` the sup of
/// `P_t f` over the segment is taken at its ends (convexity) from the MC means.
pub fn finite_difference_batch(
    spec: &DiffusionSpec,
    x: &[f64],
    v: &[f64],
    fs: &[TestFunction],
    grid: StepGrid,
    n_paths: usize,
    seed: u64,
    delta: f64,
) -> Result<Vec<FdEstimate>> {
    if !(delta > 0.0) {
        return invalid(format!("delta = {delta} must be positive"));
    }
    check_start(spec.dim, x)?;
    check_direction(spec.dim, v)?;
    for f in fs {
        f.validate(spec.dim)?;
    }
    let plus: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + delta * b).collect();
    let minus: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - delta * b).collect();
    let bp = simulate(spec, &plus, grid, n_paths, seed, Record::Terminal)?;
    let bm = simulate(spec, &minus, grid, n_paths, seed, Record::Terminal)?;
    let valid: Vec<usize> = (0..n_paths)
        .filter(|&i| !bp.is_flagged(i) && !bm.is_flagged(i))
        .collect();
    let flow = GaussianFlow::of(spec);
    let vnorm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let stretch = (spec.k_drift.max(0.0) * grid.horizon).exp() * vnorm;
    Ok(fs
        .iter()
        .map(|f| {
            let diffs: Vec<f64> = valid
                .iter()
                .map(|&i| (f.eval(bp.terminal(i)) - f.eval(bm.terminal(i))) / (2.0 * delta))
                .collect();
            let third = match (f.third_derivative_bound(), f) {
                (Some(b), _) => b * stretch.powi(3),
                (None, TestFunction::ExpLinear { a }) => {
                    let an = a.iter().map(|c| c * c).sum::<f64>().sqrt();
                    let end = |b: &crate::sde::PathBundle| {
                        let m = MeanSe::of(&valid.iter().map(|&i| f.eval(b.terminal(i))).collect::<Vec<_>>());
                        m.mean + 3.0 * m.se
                    };
                    (an * stretch).powi(3) * end(&bp).max(end(&bm))
                }
                (None, _) => f64::INFINITY,
            };
            let reference = flow.and_then(|fl| fl.gradient(f, x, v, grid.horizon));
            FdEstimate {
                report: EstimateReport::new(MeanSe::of(&diffs), reference),
                bias_budget: third * delta * delta / 6.0,
            }
        })
        .collect())
}

pub fn finite_difference_oracle(
    spec: &DiffusionSpec,
    x: &[f64],
    v: &[f64],
    f: &TestFunction,
    grid: StepGrid,
    n_paths: usize,
    seed: u64,
    delta: f64,
) -> Result<FdEstimate> {
    Ok(finite_difference_batch(spec, x, v, std::slice::from_ref(f), grid, n_paths, seed, delta)?
        .remove(0))
}

/// Derivative formula against the oracle: `|B - F| <= 3 SE + δ² budget`.
/// The two ensembles use independent seeds, so their SEs combine in
/// quadrature.
pub fn bismut_agreement_row(
    check_id: &str,
    bismut: &EstimateReport,
    fd: &FdEstimate,
    seed: u64,
) -> CheckRow {
    let se = bismut.std_error.hypot(fd.report.std_error);
    CheckRow::new(check_id, (bismut.estimate - fd.report.estimate).abs(), 0.0, se)
        .with_slack(fd.bias_budget)
        .with_mc(bismut.n_paths, seed)
}

/// `pK|x-y|²/(2(p-1)(1 - e^{-Kt}))`, with the `K → 0` limit `p|x-y|²/(2(p-1)t)`.
pub fn harnack_exponent(p: f64, k: f64, distance: f64, t: f64) -> f64 {
    let factor = if k.abs() < 1e-8 {
        1.0 / t
    } else {
        k / -(-k * t).exp_m1()
    };
    p * factor * distance * distance / (2.0 * (p - 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarnackReport {
    pub mc: CheckRow,
    /// Closed-form sides on Gaussian specs (`None` otherwise).
    pub analytic: Option<CheckRow>,
    /// `log rhs - log lhs` of the closed form.
    pub analytic_log_margin: Option<f64>,
}

fn distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

fn ensemble_mean(
    spec: &DiffusionSpec,
    start: &[f64],
    grid: StepGrid,
    n_paths: usize,
    seed: u64,
    g: impl Fn(&[f64]) -> f64 + Sync,
) -> Result<MeanSe> {
    let b = simulate(spec, start, grid, n_paths, seed, Record::Terminal)?;
    let vals: Vec<f64> = (0..n_paths)
        .filter(|&i| !b.is_flagged(i))
        .map(|i| g(b.terminal(i)))
        .collect();
    Ok(MeanSe::of(&vals))
}

/// Terminal states of the valid paths of an ensemble from `start`.
fn terminals(
    spec: &DiffusionSpec,
    start: &[f64],
    grid: StepGrid,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let b = simulate(spec, start, grid, n_paths, seed, Record::Terminal)?;
    Ok((0..n_paths)
        .filter(|&i| !b.is_flagged(i))
        .map(|i| b.terminal(i).to_vec())
        .collect())
}

fn mean_over(states: &[Vec<f64>], g: impl Fn(&[f64]) -> f64) -> MeanSe {
    MeanSe::of(&states.iter().map(|z| g(z)).collect::<Vec<_>>())
}

/// `(P_t f(x))^p <= P_t f^p(y) · exp(harnack_exponent)` with the drift-form
/// `K`, for several `f` sharing the two ensembles.
pub fn harnack_batch(
    spec: &DiffusionSpec,
    x: &[f64],
    y: &[f64],
    fs: &[TestFunction],
    p: f64,
    grid: StepGrid,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<HarnackReport>> {
    if !(p > 1.0) {
        return invalid(format!("Harnack exponent p = {p} must exceed 1"));
    }
    check_start(spec.dim, x)?;
    check_start(spec.dim, y)?;
    for f in fs {
        f.validate(spec.dim)?;
        if f.infimum() < 0.0 {
            return invalid(format!("test function {} must be nonnegative", f.id()));
        }
    }
    need_identity(spec, "the Harnack check")?;
    if !check_one_sided_k(spec, KConvention::Drift, 256, 3.0, seed)?.pass {
        return invalid("claimed dissipativity constant is violated on probes");
    }
    let t = grid.horizon;
    let e = harnack_exponent(p, spec.k_drift, distance(x, y), t);
    let ex = terminals(spec, x, grid, n_paths, derive_seed(seed, 0))?;
    let ey = terminals(spec, y, grid, n_paths, derive_seed(seed, 1))?;
    let flow = GaussianFlow::of(spec);
    Ok(fs
        .iter()
        .map(|f| {
            let mx = mean_over(&ex, |z| f.eval(z));
            let my = mean_over(&ey, |z| f.eval(z).powf(p));
            let lhs = mx.mean.powf(p);
            let rhs = my.mean * e.exp();
            let se = (p * mx.mean.powf(p - 1.0) * mx.se).hypot(e.exp() * my.se);
            let mc = CheckRow::new(format!("harnack:mc:{}", f.id()), lhs, rhs, se)
                .with_mc(n_paths, seed);
            let closed = flow.zip(f.power(p)).and_then(|(fl, fp)| {
                let px = fl.mean(f, x, t)?;
                let py = fl.mean(&fp, y, t)?;
                let log_margin = harnack_log_margin(fl, f, x, y, p, t, e)
                    .unwrap_or_else(|| py.ln() + e - p * px.ln());
                let row = CheckRow::analytic(
                    format!("harnack:analytic:{}", f.id()),
                    px.powf(p),
                    py * e.exp(),
                );
                Some((row, log_margin))
            });
            HarnackReport {
                mc,
                analytic: closed.as_ref().map(|c| c.0.clone()),
                analytic_log_margin: closed.map(|c| c.1),
            }
        })
        .collect())
}

pub fn harnack_verify(
    spec: &DiffusionSpec,
    x: &[f64],
    y: &[f64],
    f: &TestFunction,
    p: f64,
    grid: StepGrid,
    n_paths: usize,
    seed: u64,
) -> Result<HarnackReport> {
    Ok(harnack_batch(spec, x, y, std::slice::from_ref(f), p, grid, n_paths, seed)?.remove(0))
}

/// For exp-linear `f` the log margin is a quadratic in `a` with no
/// cancellation-prone exponentials:
/// `p<a, m_y - m_x> + ½p(p-1)|a|²v + E`.
fn harnack_log_margin(
    flow: GaussianFlow,
    f: &TestFunction,
    x: &[f64],
    y: &[f64],
    p: f64,
    t: f64,
    e: f64,
) -> Option<f64> {
    match f {
        TestFunction::ExpLinear { a } => {
            let c = flow.mean_factor(t);
            let shift: f64 = (0..x.len()).map(|i| a[i] * c * (y[i] - x[i])).sum();
            let a2: f64 = a.iter().map(|v| v * v).sum();
            Some(p * shift + 0.5 * p * (p - 1.0) * a2 * flow.variance(t) + e)
        }
        _ => None,
    }
}

/// Additive constant of the log-Harnack inequality, `K|x-y|²/(2λ(1-e^{-Kt}))`
/// with the σ-augmented `K`.
pub fn log_harnack_constant(spec: &DiffusionSpec, x: &[f64], y: &[f64], t: f64) -> f64 {
    entropy_bound(spec.k_augmented, spec.lambda, distance(x, y), t)
}

/// `P_t log f(x) <= log P_t f(y) + C` by Monte Carlo, for `f >= 1`, with
/// several `f` sharing the two ensembles.
pub fn log_harnack_batch(
    spec: &DiffusionSpec,
    x: &[f64],
    y: &[f64],
    fs: &[TestFunction],
    grid: StepGrid,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<CheckRow>> {
    check_start(spec.dim, x)?;
    check_start(spec.dim, y)?;
    for f in fs {
        f.validate(spec.dim)?;
        if f.infimum() < 1.0 {
            return invalid(format!("test function {} must be at least 1", f.id()));
        }
    }
    if !check_one_sided_k(spec, KConvention::Augmented, 256, 3.0, seed)?.pass {
        return invalid("claimed σ-augmented constant is violated on probes");
    }
    let c = log_harnack_constant(spec, x, y, grid.horizon);
    let ex = terminals(spec, x, grid, n_paths, derive_seed(seed, 0))?;
    let ey = terminals(spec, y, grid, n_paths, derive_seed(seed, 1))?;
    Ok(fs
        .iter()
        .map(|f| {
            let lx = mean_over(&ex, |z| f.eval(z).ln());
            let my = mean_over(&ey, |z| f.eval(z));
            let rhs = my.mean.ln() + c;
            let se = lx.se.hypot(my.se / my.mean);
            CheckRow::new(format!("log_harnack:mc:{}", f.id()), lx.mean, rhs, se)
                .with_mc(n_paths, seed)
        })
        .collect())
}

pub fn log_harnack_verify(
    spec: &DiffusionSpec,
    x: &[f64],
    y: &[f64],
    f: &TestFunction,
    grid: StepGrid,
    n_paths: usize,
    seed: u64,
) -> Result<CheckRow> {
    Ok(log_harnack_batch(spec, x, y, std::slice::from_ref(f), grid, n_paths, seed)?.remove(0))
}

/// Closed-form log-Harnack check for `f = e^{<a,·>}` on a Gaussian spec:
/// `<a, m_x> <= <a, m_y> + ½|a|²v_t + C`. The inequality is invariant under
/// `f → cf`, so the positivity of `f` is all that matters here.
pub fn log_harnack_analytic(
    spec: &DiffusionSpec,
    x: &[f64],
    y: &[f64],
    a: &[f64],
    t: f64,
) -> Result<CheckRow> {
    let flow = GaussianFlow::of(spec)
        .ok_or_else(|| Error::InvalidInput("closed form needs an OU or Brownian spec".into()))?;
    check_start(spec.dim, x)?;
    check_start(spec.dim, y)?;
    check_direction(spec.dim, a)?;
    let c = flow.mean_factor(t);
    let lhs: f64 = a.iter().zip(x).map(|(a, v)| a * c * v).sum();
    let a2: f64 = a.iter().map(|v| v * v).sum();
    let rhs = a.iter().zip(y).map(|(a, v)| a * c * v).sum::<f64>()
        + 0.5 * a2 * flow.variance(t)
        + log_harnack_constant(spec, x, y, t);
    let f = TestFunction::ExpLinear { a: a.to_vec() };
    Ok(CheckRow::analytic(format!("log_harnack:analytic:{}", f.id()), lhs, rhs))
}

/// `|∇P_t f(x)|² <= e^{Kt} P_t|∇f|²(x)` with the σ-augmented `K`, the left
/// side from coordinate-wise central differences with common random numbers.
pub fn gradient_bound_check(
    spec: &DiffusionSpec,
    x: &[f64],
    f: &TestFunction,
    grid: StepGrid,
    n_paths: usize,
    seed: u64,
    delta: f64,
) -> Result<CheckRow> {
    let d = spec.dim;
    check_start(d, x)?;
    f.validate(d)?;
    let mut g2 = 0.0;
    let mut var = 0.0;
    let mut budget = 0.0;
    for i in 0..d {
        let mut e = vec![0.0; d];
        e[i] = 1.0;
        let fd = finite_difference_oracle(spec, x, &e, f, grid, n_paths, derive_seed(seed, i as u64), delta)?;
        let g = fd.report.estimate;
        g2 += g * g;
        var += (2.0 * g * fd.report.std_error).powi(2);
        // |g² - ĝ²| <= (2|ĝ| + b) b for a bias b
        budget += (2.0 * g.abs() + fd.bias_budget) * fd.bias_budget;
    }
    let grad_sq = ensemble_mean(spec, x, grid, n_paths, derive_seed(seed, d as u64), |z| {
        let mut g = vec![0.0; z.len()];
        f.gradient(z, &mut g);
        g.iter().map(|a| a * a).sum()
    })?;
    let factor = (spec.k_augmented * grid.horizon).exp();
    Ok(CheckRow::new(
        format!("gradient_bound:{}", f.id()),
        g2,
        factor * grad_sq.mean,
        var.sqrt().hypot(factor * grad_sq.se),
    )
    .with_slack(budget + ANALYTIC_TOL)
    .with_mc(n_paths, seed))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TvBoundPoint {
    pub t: f64,
    /// `2·P(T > t)`.
    pub bound: f64,
    pub se: f64,
}

/// Coupling bound `‖law X_t - law Y_t‖_var <= 2 P(T > t)` along `t_grid`.
pub fn tv_from_tail(run: &CouplingRun, t_grid: &[f64], pi_mass: f64) -> Vec<TvBoundPoint> {
    coupling_time_tail(run, t_grid)
        .into_iter()
        .map(|p| TvBoundPoint {
            t: p.t,
            bound: 2.0 * pi_mass * p.tail,
            se: 2.0 * pi_mass * p.se,
        })
        .collect()
}

/// `‖N(0,t) - N(s,t)‖_var = 2 erf(s/(2√(2t)))`.
pub fn gaussian_shift_tv(shift: f64, variance: f64) -> f64 {
    2.0 * erf(shift.abs() / (2.0 * (2.0 * variance).sqrt()))
}

/// `sup |φ' - φ'(·-s)|` bound for two Gaussian densities of equal variance:
/// twice `sup|φ'| = 1/(v√(2πe))`.
pub fn gaussian_difference_lipschitz(variance: f64) -> f64 {
    2.0 / (variance * (2.0 * std::f64::consts::PI * std::f64::consts::E).sqrt())
}

/// Histogram TV of the run's terminal first coordinates against the coupling
/// bound at the horizon: `TV_hist <= 2·tail + 3 SE + L·w`.
pub fn tv_chain_row(run: &CouplingRun, lipschitz: f64) -> Result<CheckRow> {
    let xs: Vec<f64> = run.valid_paths().map(|i| run.x_terminal(i)[0]).collect();
    let ys: Vec<f64> = run.valid_paths().map(|i| run.y_terminal(i)[0]).collect();
    let h = histogram_tv(&xs, &ys)?;
    let b = tv_from_tail(run, &[run.grid.horizon], 1.0)[0];
    Ok(CheckRow::new(
        format!("tv_chain:{}", run.construction.name()),
        h.tv,
        b.bound,
        h.se.hypot(b.se),
    )
    .with_slack(lipschitz * h.bin_width)
    .with_mc(run.n_paths, run.seed))
}

/// Two-sided comparison of the run's histogram TV with an exact value.
pub fn tv_exact_row(run: &CouplingRun, exact: f64, lipschitz: f64) -> Result<CheckRow> {
    let xs: Vec<f64> = run.valid_paths().map(|i| run.x_terminal(i)[0]).collect();
    let ys: Vec<f64> = run.valid_paths().map(|i| run.y_terminal(i)[0]).collect();
    let h = histogram_tv(&xs, &ys)?;
    Ok(
        CheckRow::new(format!("tv_exact:{}", run.construction.name()), (h.tv - exact).abs(), 0.0, h.se)
            .with_slack(lipschitz * h.bin_width)
            .with_mc(run.n_paths, run.seed),
    )
}

/// Dumps rows as `name = value` pairs for debugging output.
pub fn describe(rows: &[CheckRow]) -> String {
    let mut s = String::new();
    for r in rows {
        let _ = writeln!(
            s,
            "{}: lhs {:.6e} rhs {:.6e} se {:.2e} slack {:.2e} -> {}",
            r.check_id,
            r.lhs,
            r.rhs,
            r.se,
            r.slack,
            r.verdict()
        );
    }
    s
}
