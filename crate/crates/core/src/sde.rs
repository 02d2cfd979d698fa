//! Euler–Maruyama simulation of `dX = Z(X) dt + σ(X) dB` in `R^d`.
//!
//! Drifts and diffusion coefficients come from a closed catalogue addressed by
//! string ids (`zero`, `ou`, `ou:<rate>`, `sin_perturbed[:<rate>:<amp>]`;
//! `identity`, `diag_sin[:<base>:<amp>]`, `constant:<row-major entries>`), so
//! run configs stay plain data. Each path draws its Brownian increments from
//! its own counter-based stream, which makes a bundle a pure function of its
//! inputs.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::kv::KeyValues;
use crate::rng::{Domain, PathStream};

/// Share of non-finite paths above which a simulation is rejected.
pub const MAX_FLAGGED_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub enum Drift {
    Zero,
    /// `Z(x) = A x + b`, `A` row-major.
    Linear { a: Vec<f64>, b: Vec<f64> },
    /// `Z_i(x) = -rate·x_i + amplitude·sin(x_i)`.
    SinPerturbed { rate: f64, amplitude: f64 },
}

impl Drift {
    pub fn ou(dim: usize, rate: f64) -> Self {
        let mut a = vec![0.0; dim * dim];
        for i in 0..dim {
            a[i * dim + i] = -rate;
        }
        Drift::Linear {
            a,
            b: vec![0.0; dim],
        }
    }

    /// `Z = -∇(½ xᵀQx) = -Q x` for symmetric `Q`.
    pub fn gradient_of_quadratic(dim: usize, q: &[f64]) -> Result<Self> {
        if q.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                found: q.len(),
            });
        }
        for i in 0..dim {
            for j in 0..dim {
                if (q[i * dim + j] - q[j * dim + i]).abs() > 1e-12 {
                    return invalid("quadratic form must be symmetric");
                }
            }
        }
        Ok(Drift::Linear {
            a: q.iter().map(|v| -v).collect(),
            b: vec![0.0; dim],
        })
    }

    pub fn from_id(id: &str, dim: usize) -> Result<Self> {
        let mut parts = id.split(':');
        let name = parts.next().unwrap_or("");
        let args: Vec<f64> = parts
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidInput(format!("bad drift arguments in `{id}`")))?;
        match (name, args.as_slice()) {
            ("zero", []) => Ok(Drift::Zero),
            ("ou", []) => Ok(Drift::ou(dim, 1.0)),
            ("ou", [r]) => Ok(Drift::ou(dim, *r)),
            ("sin_perturbed", []) => Ok(Drift::SinPerturbed {
                rate: 1.0,
                amplitude: 0.5,
            }),
            ("sin_perturbed", [r, a]) => Ok(Drift::SinPerturbed {
                rate: *r,
                amplitude: *a,
            }),
            _ => invalid(format!("unknown drift id `{id}`")),
        }
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        if let Drift::Linear { a, b } = self {
            if a.len() != dim * dim || b.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim * dim,
                    found: a.len(),
                });
            }
        }
        Ok(())
    }

    #[inline]
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Drift::Zero => out.fill(0.0),
            Drift::Linear { a, b } => {
                let d = x.len();
                for i in 0..d {
                    let row = &a[i * d..(i + 1) * d];
                    out[i] = b[i] + row.iter().zip(x).map(|(r, v)| r * v).sum::<f64>();
                }
            }
            Drift::SinPerturbed { rate, amplitude } => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = -rate * v + amplitude * v.sin();
                }
            }
        }
    }

    /// Directional derivative `∇_v Z(x)`.
    #[inline]
    pub fn jacobian_apply(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        match self {
            Drift::Zero => out.fill(0.0),
            Drift::Linear { a, .. } => {
                let d = x.len();
                for i in 0..d {
                    out[i] = a[i * d..(i + 1) * d].iter().zip(v).map(|(r, w)| r * w).sum();
                }
            }
            Drift::SinPerturbed { rate, amplitude } => {
                for i in 0..x.len() {
                    out[i] = (-rate + amplitude * x[i].cos()) * v[i];
                }
            }
        }
    }

    /// Smallest `K` with `<Z(x)-Z(y), x-y> <= K|x-y|²` for every pair.
    pub fn one_sided_constant(&self, dim: usize) -> f64 {
        match self {
            Drift::Zero => 0.0,
            Drift::Linear { a, .. } => {
                let m = DMatrix::from_row_slice(dim, dim, a);
                let sym = (&m + m.transpose()) * 0.5;
                SymmetricEigen::new(sym).eigenvalues.max()
            }
            Drift::SinPerturbed { rate, amplitude } => -rate + amplitude.abs(),
        }
    }

    pub fn id(&self) -> String {
        match self {
            Drift::Zero => "zero".into(),
            Drift::Linear { a, b } => format!("linear{a:?}+{b:?}"),
            Drift::SinPerturbed { rate, amplitude } => format!("sin_perturbed:{rate}:{amplitude}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Diffusion {
    Identity,
    /// Constant invertible matrix with its inverse, both row-major.
    Constant { sigma: Vec<f64>, inverse: Vec<f64> },
    /// `σ(x) = diag(base + amplitude·sin(x_i))`.
    DiagSin { base: f64, amplitude: f64 },
}

impl Diffusion {
    pub fn constant(dim: usize, sigma: Vec<f64>) -> Result<Self> {
        if sigma.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                found: sigma.len(),
            });
        }
        let m = DMatrix::from_row_slice(dim, dim, &sigma);
        let inv = m
            .try_inverse()
            .ok_or_else(|| Error::InvalidInput("constant diffusion matrix is singular".into()))?;
        let inverse = (0..dim * dim).map(|k| inv[(k / dim, k % dim)]).collect();
        Ok(Diffusion::Constant { sigma, inverse })
    }

    pub fn from_id(id: &str, dim: usize) -> Result<Self> {
        let mut parts = id.split(':');
        let name = parts.next().unwrap_or("");
        let rest: Vec<&str> = parts.collect();
        match (name, rest.as_slice()) {
            ("identity", []) => Ok(Diffusion::Identity),
            ("diag_sin", []) => Ok(Diffusion::DiagSin {
                base: 1.0,
                amplitude: 0.5,
            }),
            ("diag_sin", [b, a]) => {
                let base = b.parse().map_err(|_| Error::InvalidInput(format!("bad `{id}`")))?;
                let amplitude = a.parse().map_err(|_| Error::InvalidInput(format!("bad `{id}`")))?;
                if base <= f64::abs(amplitude) {
                    return invalid("diag_sin needs base > |amplitude| for ellipticity");
                }
                Ok(Diffusion::DiagSin { base, amplitude })
            }
            ("constant", [entries]) => {
                let v: Vec<f64> = entries
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::InvalidInput(format!("bad `{id}`")))?;
                Diffusion::constant(dim, v)
            }
            _ => invalid(format!("unknown diffusion id `{id}`")),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Diffusion::Identity)
    }

    /// `out = σ(x) w`.
    #[inline]
    pub fn apply(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        match self {
            Diffusion::Identity => out.copy_from_slice(w),
            Diffusion::Constant { sigma, .. } => {
                let d = w.len();
                for i in 0..d {
                    out[i] = sigma[i * d..(i + 1) * d].iter().zip(w).map(|(s, v)| s * v).sum();
                }
            }
            Diffusion::DiagSin { base, amplitude } => {
                for i in 0..w.len() {
                    out[i] = (base + amplitude * x[i].sin()) * w[i];
                }
            }
        }
    }

    /// `out = σ(x)^{-1} w`; `false` when σ(x) is not invertible.
    #[inline]
    pub fn solve(&self, x: &[f64], w: &[f64], out: &mut [f64]) -> bool {
        match self {
            Diffusion::Identity => {
                out.copy_from_slice(w);
                true
            }
            Diffusion::Constant { inverse, .. } => {
                let d = w.len();
                for i in 0..d {
                    out[i] = inverse[i * d..(i + 1) * d].iter().zip(w).map(|(s, v)| s * v).sum();
                }
                true
            }
            Diffusion::DiagSin { base, amplitude } => {
                for i in 0..w.len() {
                    let s = base + amplitude * x[i].sin();
                    if s.abs() < 1e-300 {
                        return false;
                    }
                    out[i] = w[i] / s;
                }
                true
            }
        }
    }

    pub fn matrix(&self, x: &[f64]) -> DMatrix<f64> {
        let d = x.len();
        match self {
            Diffusion::Identity => DMatrix::identity(d, d),
            Diffusion::Constant { sigma, .. } => DMatrix::from_row_slice(d, d, sigma),
            Diffusion::DiagSin { base, amplitude } => {
                DMatrix::from_fn(d, d, |i, j| if i == j { base + amplitude * x[i].sin() } else { 0.0 })
            }
        }
    }

    /// Lower bound on the spectrum of `σᵀσ` over all of `R^d`.
    pub fn ellipticity(&self, dim: usize) -> f64 {
        match self {
            Diffusion::Identity => 1.0,
            Diffusion::Constant { sigma, .. } => {
                let m = DMatrix::from_row_slice(dim, dim, sigma);
                SymmetricEigen::new(m.transpose() * m).eigenvalues.min()
            }
            Diffusion::DiagSin { base, amplitude } => (base - amplitude.abs()).powi(2),
        }
    }

    /// Smallest `L` with `‖σ(x)-σ(y)‖²_HS <= L|x-y|²`.
    pub fn hs_lipschitz_sq(&self) -> f64 {
        match self {
            Diffusion::Identity | Diffusion::Constant { .. } => 0.0,
            Diffusion::DiagSin { amplitude, .. } => amplitude * amplitude,
        }
    }
}

/// Which one-sided dissipativity form a constant refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KConvention {
    /// `<Z(x)-Z(y), x-y> <= K|x-y|²`.
    Drift,
    /// `‖σ(x)-σ(y)‖²_HS + 2<x-y, Z(x)-Z(y)> <= K|x-y|²`.
    Augmented,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSpec {
    pub dim: usize,
    pub drift: Drift,
    pub diffusion: Diffusion,
    /// Claimed constant in the drift-only form.
    pub k_drift: f64,
    /// Claimed constant in the σ-augmented form.
    pub k_augmented: f64,
    /// Claimed ellipticity floor: `σᵀσ >= λ I`.
    pub lambda: f64,
}

impl DiffusionSpec {
    /// Spec whose claimed constants are the catalogue's exact ones.
    pub fn new(dim: usize, drift: Drift, diffusion: Diffusion) -> Result<Self> {
        let k_drift = drift.one_sided_constant(dim);
        let k_augmented = diffusion.hs_lipschitz_sq() + 2.0 * k_drift;
        let lambda = diffusion.ellipticity(dim);
        Self::with_claims(dim, drift, diffusion, k_drift, k_augmented, lambda)
    }

    pub fn with_claims(
        dim: usize,
        drift: Drift,
        diffusion: Diffusion,
        k_drift: f64,
        k_augmented: f64,
        lambda: f64,
    ) -> Result<Self> {
        if dim == 0 {
            return invalid("dimension must be at least 1");
        }
        drift.check_dim(dim)?;
        if let Diffusion::Constant { sigma, .. } = &diffusion {
            if sigma.len() != dim * dim {
                return Err(Error::DimensionMismatch {
                    expected: dim * dim,
                    found: sigma.len(),
                });
            }
        }
        if !(lambda > 0.0) {
            return invalid(format!("ellipticity floor {lambda} must be positive"));
        }
        if !(k_drift.is_finite() && k_augmented.is_finite()) {
            return invalid("dissipativity claims must be finite");
        }
        let spec = DiffusionSpec {
            dim,
            drift,
            diffusion,
            k_drift,
            k_augmented,
            lambda,
        };
        spec.validate_ellipticity()?;
        Ok(spec)
    }

    pub fn brownian(dim: usize) -> Self {
        Self::new(dim, Drift::Zero, Diffusion::Identity).expect("Brownian motion spec is valid")
    }

    /// `Z(x) = -x`, `σ = I`.
    pub fn ou(dim: usize) -> Self {
        Self::new(dim, Drift::ou(dim, 1.0), Diffusion::Identity).expect("OU spec is valid")
    }

    pub fn k(&self, convention: KConvention) -> f64 {
        match convention {
            KConvention::Drift => self.k_drift,
            KConvention::Augmented => self.k_augmented,
        }
    }

    fn validate_ellipticity(&self) -> Result<()> {
        let mut stream = PathStream::new(0xE11, Domain::Probe, 0, self.dim);
        let mut x = vec![0.0; self.dim];
        for _ in 0..64 {
            stream.normals(&mut x);
            x.iter_mut().for_each(|v| *v *= 3.0);
            let s = self.diffusion.matrix(&x);
            let min_eig = SymmetricEigen::new(s.transpose() * &s).eigenvalues.min();
            if min_eig < self.lambda - 1e-9 {
                return invalid(format!(
                    "σᵀσ has eigenvalue {min_eig} below the claimed floor {}",
                    self.lambda
                ));
            }
        }
        Ok(())
    }

    /// One Euler–Maruyama step: `out = x + Z(x) h + σ(x) dw`.
    #[inline]
    pub fn euler_step(&self, x: &[f64], dw: &[f64], h: f64, scratch: &mut [f64], out: &mut [f64]) {
        self.drift.eval(x, scratch);
        for i in 0..x.len() {
            out[i] = x[i] + scratch[i] * h;
        }
        self.diffusion.apply(x, dw, scratch);
        for i in 0..x.len() {
            out[i] += scratch[i];
        }
    }
}

/// Uniform time grid `0 = s_0 < ... < s_n = t` with `n·h = t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepGrid {
    pub h: f64,
    pub steps: usize,
    pub horizon: f64,
}

impl StepGrid {
    pub fn new(h: f64, horizon: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return invalid(format!("step h = {h} must be positive"));
        }
        if !(horizon >= h) {
            return invalid(format!("horizon {horizon} must be at least one step {h}"));
        }
        let steps = (horizon / h).round() as usize;
        if (steps as f64 * h - horizon).abs() > 1e-12 * horizon.max(1.0) {
            return invalid(format!("horizon {horizon} is not a multiple of step {h}"));
        }
        Ok(StepGrid { h, steps, horizon })
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.h
    }
}

/// What a bundle keeps in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Record {
    /// Start and terminal state only.
    Terminal,
    /// Every grid point.
    Full,
}

#[derive(Debug, Clone)]
pub struct PathBundle {
    pub spec: DiffusionSpec,
    pub start: Vec<f64>,
    pub grid: StepGrid,
    pub n_paths: usize,
    pub seed: u64,
    pub record: Record,
    /// `n_paths × recorded points × dim`.
    states: Vec<f64>,
    flagged: Vec<bool>,
}

impl PathBundle {
    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    fn points_per_path(&self) -> usize {
        match self.record {
            Record::Terminal => 2,
            Record::Full => self.grid.steps + 1,
        }
    }

    /// State of `path` at recorded point `k` (`k` indexes grid steps for
    /// [`Record::Full`], or `0`/`1` for start/terminal).
    pub fn state(&self, path: usize, k: usize) -> &[f64] {
        let d = self.dim();
        let off = (path * self.points_per_path() + k) * d;
        &self.states[off..off + d]
    }

    pub fn terminal(&self, path: usize) -> &[f64] {
        self.state(path, self.points_per_path() - 1)
    }

    pub fn is_flagged(&self, path: usize) -> bool {
        self.flagged[path]
    }

    pub fn flagged_count(&self) -> usize {
        self.flagged.iter().filter(|f| **f).count()
    }

    /// Terminal states of the non-flagged paths.
    pub fn terminals(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.n_paths)
            .filter(|&i| !self.flagged[i])
            .map(|i| self.terminal(i))
    }

    /// Regenerates the Brownian increments of `path` (`steps × dim`).
    pub fn increments(&self, path: usize) -> Vec<f64> {
        brownian_increments(self.seed, path, self.dim(), self.grid)
    }

    /// `path,step,coord,value` rows (full recordings only).
    pub fn to_csv(&self) -> Result<String> {
        if self.record != Record::Full {
            return invalid("CSV export needs a full recording");
        }
        let mut s = String::from("path,step,coord,value\n");
        for p in 0..self.n_paths {
            for k in 0..=self.grid.steps {
                for (c, v) in self.state(p, k).iter().enumerate() {
                    let _ = writeln!(s, "{p},{k},{c},{v:e}");
                }
            }
        }
        Ok(s)
    }
}

/// Increments of one path, regenerated step by step from the counter stream.
pub fn brownian_increments(seed: u64, path: usize, dim: usize, grid: StepGrid) -> Vec<f64> {
    let mut stream = PathStream::new(seed, Domain::Brownian, path as u64, dim);
    let sq = grid.h.sqrt();
    let mut out = vec![0.0; grid.steps * dim];
    for chunk in out.chunks_mut(dim) {
        stream.normals(chunk);
        chunk.iter_mut().for_each(|v| *v *= sq);
    }
    out
}

pub(crate) fn check_start(dim: usize, start: &[f64]) -> Result<()> {
    if start.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: start.len(),
        });
    }
    if start.iter().any(|v| !v.is_finite()) {
        return invalid("start point must be finite");
    }
    Ok(())
}

pub(crate) fn check_flagged(flagged: usize, total: usize) -> Result<()> {
    if flagged as f64 > MAX_FLAGGED_FRACTION * total as f64 {
        return Err(Error::Diverged { flagged, total });
    }
    Ok(())
}

/// Euler–Maruyama ensemble from `start`.
pub fn simulate(
    spec: &DiffusionSpec,
    start: &[f64],
    grid: StepGrid,
    n_paths: usize,
    seed: u64,
    record: Record,
) -> Result<PathBundle> {
    check_start(spec.dim, start)?;
    if n_paths == 0 {
        return invalid("need at least one path");
    }
    let d = spec.dim;
    let per_path = match record {
        Record::Terminal => 2,
        Record::Full => grid.steps + 1,
    };
    let sq = grid.h.sqrt();
    let paths: Vec<(Vec<f64>, bool)> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut stream = PathStream::new(seed, Domain::Brownian, p as u64, d);
            let mut buf = vec![0.0; per_path * d];
            buf[..d].copy_from_slice(start);
            let mut x = start.to_vec();
            let mut next = vec![0.0; d];
            let mut dw = vec![0.0; d];
            let mut scratch = vec![0.0; d];
            let mut bad = false;
            for k in 0..grid.steps {
                stream.normals(&mut dw);
                dw.iter_mut().for_each(|v| *v *= sq);
                spec.euler_step(&x, &dw, grid.h, &mut scratch, &mut next);
                std::mem::swap(&mut x, &mut next);
                if x.iter().any(|v| !v.is_finite()) {
                    bad = true;
                    break;
                }
                if record == Record::Full {
                    buf[(k + 1) * d..(k + 2) * d].copy_from_slice(&x);
                }
            }
            if bad {
                buf[d..].fill(f64::NAN);
            } else if record == Record::Terminal {
                buf[d..].copy_from_slice(&x);
            }
            (buf, bad)
        })
        .collect();
    let flagged: Vec<bool> = paths.iter().map(|(_, b)| *b).collect();
    check_flagged(flagged.iter().filter(|f| **f).count(), n_paths)?;
    let mut states = Vec::with_capacity(n_paths * per_path * d);
    for (buf, _) in paths {
        states.extend_from_slice(&buf);
    }
    Ok(PathBundle {
        spec: spec.clone(),
        start: start.to_vec(),
        grid,
        n_paths,
        seed,
        record,
        states,
        flagged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KProbe {
    pub k_hat: f64,
    pub pass: bool,
}

/// Largest observed ratio of the chosen dissipativity form over `|x-y|²`
/// for pairs drawn in the ball of `radius`; half of the pairs are close
/// neighbours, where local expansion is largest.
pub fn check_one_sided_k(
    spec: &DiffusionSpec,
    convention: KConvention,
    n_probes: usize,
    radius: f64,
    seed: u64,
) -> Result<KProbe> {
    if n_probes == 0 {
        return invalid("need at least one probe");
    }
    let d = spec.dim;
    let mut stream = PathStream::new(seed, Domain::Probe, 0, d);
    let ball_point = |stream: &mut PathStream| {
        let mut v = vec![0.0; d];
        stream.normals(&mut v);
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-300);
        let r = radius * stream.uniform().powf(1.0 / d as f64);
        v.iter_mut().for_each(|a| *a *= r / norm);
        v
    };
    let mut k_hat = f64::NEG_INFINITY;
    for i in 0..n_probes {
        let x = ball_point(&mut stream);
        let y = if i % 2 == 0 {
            ball_point(&mut stream)
        } else {
            let mut off = ball_point(&mut stream);
            off.iter_mut().for_each(|a| *a *= 1e-3);
            x.iter().zip(&off).map(|(a, b)| a + b).collect()
        };
        if let Some(r) = dissipativity_ratio(spec, convention, &x, &y) {
            k_hat = k_hat.max(r);
        }
    }
    Ok(KProbe {
        k_hat,
        pass: k_hat <= spec.k(convention) + 1e-6,
    })
}

/// The dissipativity form at `(x, y)` divided by `|x-y|²`.
pub fn dissipativity_ratio(
    spec: &DiffusionSpec,
    convention: KConvention,
    x: &[f64],
    y: &[f64],
) -> Option<f64> {
    let d = spec.dim;
    let dist2: f64 = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
    if dist2 == 0.0 {
        return None;
    }
    let mut zx = vec![0.0; d];
    let mut zy = vec![0.0; d];
    spec.drift.eval(x, &mut zx);
    spec.drift.eval(y, &mut zy);
    let inner: f64 = (0..d).map(|i| (x[i] - y[i]) * (zx[i] - zy[i])).sum();
    Some(match convention {
        KConvention::Drift => inner / dist2,
        KConvention::Augmented => {
            let hs = (spec.diffusion.matrix(x) - spec.diffusion.matrix(y)).norm_squared();
            (hs + 2.0 * inner) / dist2
        }
    })
}

/// Flat run config: `drift`, `diffusion`, `dim`, `start`, `h`, `t`,
/// `n_paths`, `seed`, optional `export` (CSV path, off when absent).
#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub spec: DiffusionSpec,
    pub start: Vec<f64>,
    pub grid: StepGrid,
    pub n_paths: usize,
    pub seed: u64,
    pub export: Option<String>,
}

impl SimulationConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let dim: usize = kv.take_required("dim")?;
        let drift = Drift::from_id(&kv.take_str("drift").unwrap_or_else(|| "zero".into()), dim)?;
        let diffusion =
            Diffusion::from_id(&kv.take_str("diffusion").unwrap_or_else(|| "identity".into()), dim)?;
        let spec = DiffusionSpec::new(dim, drift, diffusion)?;
        let start = kv.take_vector("start")?.unwrap_or_else(|| vec![0.0; dim]);
        let h: f64 = kv.take_required("h")?;
        let t: f64 = kv.take_required("t")?;
        let n_paths = kv.take_required("n_paths")?;
        let seed = kv.take_required("seed")?;
        let export = kv.take_str("export");
        kv.finish()?;
        check_start(dim, &start)?;
        Ok(SimulationConfig {
            spec,
            start,
            grid: StepGrid::new(h, t)?,
            n_paths,
            seed,
            export,
        })
    }

    pub fn run(&self) -> Result<PathBundle> {
        let record = if self.export.is_some() {
            Record::Full
        } else {
            Record::Terminal
        };
        simulate(&self.spec, &self.start, self.grid, self.n_paths, self.seed, record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_validation() {
        assert!(StepGrid::new(0.0, 1.0).is_err());
        assert!(StepGrid::new(0.1, 0.05).is_err());
        assert!(StepGrid::new(0.3, 1.0).is_err());
        let g = StepGrid::new(1e-3, 1.0).unwrap();
        assert_eq!(g.steps, 1000);
    }

    #[test]
    fn catalogue_constants() {
        let ou = DiffusionSpec::ou(2);
        assert_eq!(ou.k_drift, -1.0);
        assert_eq!(ou.k_augmented, -2.0);
        assert_eq!(ou.lambda, 1.0);
        let sp = DiffusionSpec::new(1, Drift::from_id("sin_perturbed", 1).unwrap(), Diffusion::Identity)
            .unwrap();
        assert_eq!(sp.k_drift, -0.5);
        let ds = Diffusion::from_id("diag_sin:2:0.5", 1).unwrap();
        assert_eq!(ds.ellipticity(1), 2.25);
        assert!(Drift::from_id("cubic", 1).is_err());
        assert!(Diffusion::from_id("diag_sin:0.5:1", 1).is_err());
    }

    #[test]
    fn overclaimed_ellipticity_is_rejected() {
        let r = DiffusionSpec::with_claims(
            1,
            Drift::Zero,
            Diffusion::DiagSin {
                base: 1.0,
                amplitude: 0.5,
            },
            0.0,
            0.25,
            0.9,
        );
        assert!(r.is_err());
    }

    #[test]
    fn bit_identical_reruns() {
        let spec = DiffusionSpec::new(2, Drift::from_id("sin_perturbed", 2).unwrap(), Diffusion::from_id("diag_sin", 2).unwrap()).unwrap();
        let g = StepGrid::new(0.01, 0.5).unwrap();
        let a = simulate(&spec, &[0.1, -0.2], g, 16, 3, Record::Full).unwrap();
        let b = simulate(&spec, &[0.1, -0.2], g, 16, 3, Record::Full).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.state(5, 0), &[0.1, -0.2]);
    }

    #[test]
    fn stored_increments_reproduce_the_path() {
        let spec = DiffusionSpec::ou(1);
        let g = StepGrid::new(0.01, 0.2).unwrap();
        let b = simulate(&spec, &[1.0], g, 4, 9, Record::Full).unwrap();
        let inc = b.increments(2);
        let mut x = 1.0;
        for k in 0..g.steps {
            x = x - x * g.h + inc[k];
            assert_eq!(x, b.state(2, k + 1)[0]);
        }
    }

    #[test]
    fn divergence_is_flagged() {
        // explicit Euler on Z = -x is unstable for h > 2
        let spec = DiffusionSpec::new(1, Drift::ou(1, 1000.0), Diffusion::Identity).unwrap();
        let g = StepGrid::new(0.5, 500.0).unwrap();
        let r = simulate(&spec, &[1.0], g, 8, 1, Record::Terminal);
        assert!(matches!(r, Err(Error::Diverged { flagged: 8, total: 8 })));
    }

    #[test]
    fn parses_run_config() {
        let cfg = SimulationConfig::parse(
            "dim = 1\ndrift = ou\nstart = 0.5\nh = 0.01\nt = 1\nn_paths = 10\nseed = 4\n",
        )
        .unwrap();
        assert_eq!(cfg.grid.steps, 100);
        let bundle = cfg.run().unwrap();
        assert_eq!(bundle.record, Record::Terminal);
        assert!(SimulationConfig::parse("dim = 1\nh = 0.1\nt = 1\nn_paths = 1\nseed = 1\nbogus = 2").is_err());
        assert!(SimulationConfig::parse("dim = 1\nh = 0.1\nt = 1\nn_paths = 1\n").is_err());
    }
}
