//! Experiment runner: flat `key = value` configs, a closed registry of
//! checks grouped into suites, and a deterministic `manifest.csv`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::beta::beta;

use crate::couplings::{
    couple_forced, couple_girsanov_tt, couple_synchronous, coupling_time_tail, entropy_bound, tail_csv,
    CouplingRun, EtaSchedule,
};
use crate::error::{Error, Result};
use crate::estimators::{
    bismut_agreement_row, bismut_batch, finite_difference_batch, gaussian_difference_lipschitz,
    gaussian_shift_tv, gradient_bound_check, harnack_batch, log_harnack_analytic, log_harnack_batch,
    log_harnack_constant, tv_chain_row, tv_exact_row, CheckRow, GaussianFlow, TestFunction, Verdict,
    ANALYTIC_TOL, CHECK_HEADER,
};
use crate::jumps::{
    alpha_rate_check, bernstein_alpha, jump_agreement_rows, jump_derivative, jump_fd_oracle, no_jump_row,
    simulate_jump, tv_decay_experiment, AlphaValue, Bernstein, JumpDensity, JumpSpec,
};
use crate::kv::KeyValues;
use crate::measures::{
    fkg_check, io::{evaluate, results_csv}, io::TransportInstance, monotone_map_1d, solve_transport,
    wasserstein_coupling_tv, wasserstein_lp, CostMatrix, DiscreteMeasure,
};
use crate::rng::derive_seed;
use crate::sde::{DiffusionSpec, Record, StepGrid};
use crate::stats::MeanSe;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Suite {
    Transport,
    Bismut,
    Harnack,
    LogHarnack,
    TvDiffusion,
    TvJump,
    JumpDerivative,
    AlphaRate,
    Full,
}

impl Suite {
    pub const ALL: [Suite; 8] = [
        Suite::Transport,
        Suite::Bismut,
        Suite::Harnack,
        Suite::LogHarnack,
        Suite::TvDiffusion,
        Suite::TvJump,
        Suite::JumpDerivative,
        Suite::AlphaRate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Transport => "transport",
            Suite::Bismut => "bismut",
            Suite::Harnack => "harnack",
            Suite::LogHarnack => "log_harnack",
            Suite::TvDiffusion => "tv_diffusion",
            Suite::TvJump => "tv_jump",
            Suite::JumpDerivative => "jump_derivative",
            Suite::AlphaRate => "alpha_rate",
            Suite::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .chain([Suite::Full])
            .find(|x| x.name() == s)
    }

    fn contains(self, other: Suite) -> bool {
        self == Suite::Full || self == other
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Smoke,
    Standard,
    Deep,
}

impl Tier {
    pub fn paths(self) -> usize {
        match self {
            Tier::Smoke => 10_000,
            Tier::Standard => 100_000,
            Tier::Deep => 1_000_000,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tier::Smoke => "smoke",
            Tier::Standard => "standard",
            Tier::Deep => "deep",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [Tier::Smoke, Tier::Standard, Tier::Deep].into_iter().find(|t| t.name() == s)
    }
}

/// Parameters a config may override; defaults reproduce the acceptance runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub paths: usize,
    pub h: f64,
    pub horizon: f64,
    pub delta: f64,
    pub forced_h: f64,
    pub forced_paths: usize,
    pub transport_instances: usize,
    pub jump_times: Vec<f64>,
    pub z0: f64,
    pub eps: f64,
    pub jump_delta: f64,
}

impl Params {
    fn defaults(tier: Tier) -> Self {
        Params {
            paths: tier.paths(),
            h: 1e-3,
            horizon: 1.0,
            delta: 0.05,
            forced_h: 1e-4,
            forced_paths: 10_000,
            transport_instances: 200,
            jump_times: vec![2.0, 4.0, 8.0, 16.0, 32.0, 64.0],
            z0: 0.0,
            eps: 1.0,
            jump_delta: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub suite: Suite,
    pub seed: u64,
    pub tier: Tier,
    pub output_dir: PathBuf,
    pub params: Params,
    /// Normalized `key = value` lines, in a fixed order, for the manifest.
    echo: Vec<(String, String)>,
}

fn usage(key: &str, msg: impl std::fmt::Display) -> Error {
    Error::InvalidInput(format!("config key `{key}`: {msg}"))
}

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let suite_s = kv.take_str("suite").ok_or_else(|| usage("suite", "missing"))?;
        let suite = Suite::parse(&suite_s).ok_or_else(|| usage("suite", format!("unknown suite `{suite_s}`")))?;
        let seed: u64 = kv
            .take_parsed("seed")
            .map_err(|_| usage("seed", "expected an unsigned 64-bit integer"))?
            .ok_or_else(|| usage("seed", "missing; there is no default seed"))?;
        let tier = match kv.take_str("tier") {
            None => Tier::Smoke,
            Some(t) => Tier::parse(&t).ok_or_else(|| usage("tier", format!("unknown tier `{t}`")))?,
        };
        let out = kv.take_str("output_dir").unwrap_or_else(|| "out".into());
        let output_dir = base_dir.join(&out);

        let mut p = Params::defaults(tier);
        macro_rules! real {
            ($key:literal, $field:expr, $ok:expr) => {
                if let Some(v) = kv.take_parsed::<f64>($key).map_err(|_| usage($key, "expected a number"))? {
                    if !$ok(v) {
                        return Err(usage($key, format!("value {v} out of range")));
                    }
                    $field = v;
                }
            };
        }
        macro_rules! count {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.take_parsed::<usize>($key).map_err(|_| usage($key, "expected a count"))? {
                    if v < 2 {
                        return Err(usage($key, "need at least 2"));
                    }
                    $field = v;
                }
            };
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        count!("paths", p.paths);
        count!("forced_paths", p.forced_paths);
        count!("transport_instances", p.transport_instances);
        real!("h", p.h, positive);
        real!("t", p.horizon, positive);
        real!("delta", p.delta, positive);
        real!("forced_h", p.forced_h, positive);
        real!("z0", p.z0, f64::is_finite);
        real!("eps", p.eps, positive);
        real!("jump_delta", p.jump_delta, positive);
        if let Some(v) = kv.take_vector("jump_times").map_err(|_| usage("jump_times", "expected numbers"))? {
            if v.len() < 2 || v.iter().any(|t| !positive(*t)) {
                return Err(usage("jump_times", "need at least two positive times"));
            }
            p.jump_times = v;
        }
        if let Some((key, _)) = kv.remaining().next() {
            return Err(usage(key, "unknown key"));
        }

        let mut echo = vec![
            ("suite".to_string(), suite.name().to_string()),
            ("seed".into(), seed.to_string()),
            ("tier".into(), tier.name().into()),
            ("output_dir".into(), out),
            ("paths".into(), p.paths.to_string()),
            ("h".into(), format!("{:e}", p.h)),
            ("t".into(), format!("{:e}", p.horizon)),
            ("delta".into(), format!("{:e}", p.delta)),
            ("forced_h".into(), format!("{:e}", p.forced_h)),
            ("forced_paths".into(), p.forced_paths.to_string()),
            ("transport_instances".into(), p.transport_instances.to_string()),
        ];
        let times: Vec<String> = p.jump_times.iter().map(|t| format!("{t:e}")).collect();
        echo.push(("jump_times".into(), times.join(",")));
        echo.push(("z0".into(), format!("{:e}", p.z0)));
        echo.push(("eps".into(), format!("{:e}", p.eps)));
        echo.push(("jump_delta".into(), format!("{:e}", p.jump_delta)));
        Ok(ExperimentConfig {
            suite,
            seed,
            tier,
            output_dir,
            params: p,
            echo,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

/// Side outputs of a check, written next to the manifest.
type Artifacts = Vec<(String, String)>;

struct Ctx<'a> {
    p: &'a Params,
    seed: u64,
    artifacts: Artifacts,
}

type CheckFn = fn(&mut Ctx) -> Result<Vec<CheckRow>>;

pub struct CheckEntry {
    pub id: &'static str,
    pub suite: Suite,
    pub display: &'static str,
    pub summary: &'static str,
    run: CheckFn,
}

/// The closed registry; its order fixes check indices and seeds.
pub fn registry() -> &'static [CheckEntry] {
    const REG: &[CheckEntry] = &[
        CheckEntry {
            id: "transport:duality",
            suite: Suite::Transport,
            display: "(W) + Kantorovich dual",
            summary: "primal LP value^p equals dual value; discrete cost equals tv_half",
            run: transport_duality,
        },
        CheckEntry {
            id: "transport:monotone_map",
            suite: Suite::Transport,
            display: "(W) 1-D optimal map",
            summary: "quantile coupling cost equals LP cost, p = 2",
            run: transport_monotone,
        },
        CheckEntry {
            id: "transport:fkg",
            suite: Suite::Transport,
            display: "FKG example",
            summary: "FKG inequality on random monotone instances",
            run: transport_fkg,
        },
        CheckEntry {
            id: "bismut:agreement",
            suite: Suite::Bismut,
            display: "derivative formula",
            summary: "Bismut estimate vs common-random-number finite differences on BM/OU",
            run: bismut_agreement,
        },
        CheckEntry {
            id: "bismut:exact",
            suite: Suite::Bismut,
            display: "derivative formula",
            summary: "Bismut estimate of the projection gradient vs 1 and e^{-t}",
            run: bismut_exact,
        },
        CheckEntry {
            id: "bismut:gradient_bound",
            suite: Suite::Bismut,
            display: "gradient estimate",
            summary: "|∇P_t f|² <= e^{Kt} P_t|∇f|² on OU",
            run: bismut_gradient_bound,
        },
        CheckEntry {
            id: "harnack:analytic",
            suite: Suite::Harnack,
            display: "(H)",
            summary: "closed-form Gaussian sides for OU with exp-linear f, p = 2",
            run: harnack_analytic,
        },
        CheckEntry {
            id: "harnack:mc",
            suite: Suite::Harnack,
            display: "(H)",
            summary: "Monte Carlo sides on BM and OU",
            run: harnack_mc,
        },
        CheckEntry {
            id: "log_harnack:analytic",
            suite: Suite::LogHarnack,
            display: "log-Harnack",
            summary: "closed-form sides for OU with exp-linear f, tight at the optimum",
            run: log_harnack_closed_form,
        },
        CheckEntry {
            id: "log_harnack:mc",
            suite: Suite::LogHarnack,
            display: "log-Harnack",
            summary: "Monte Carlo sides on OU, f >= 1",
            run: log_harnack_mc,
        },
        CheckEntry {
            id: "log_harnack:entropy",
            suite: Suite::LogHarnack,
            display: "(RR)",
            summary: "E[R log R] of the Girsanov coupling vs K|x-y|²/(2λ(1-e^{-Kt}))",
            run: log_harnack_entropy,
        },
        CheckEntry {
            id: "tv_diffusion:forced",
            suite: Suite::TvDiffusion,
            display: "η_s forcing",
            summary: "forced coupling of BM and OU: coupling fraction, η identity, mean weight",
            run: tv_forced,
        },
        CheckEntry {
            id: "tv_diffusion:chain",
            suite: Suite::TvDiffusion,
            display: "(CC) + (ii)",
            summary: "histogram TV <= 2 tail on every coupling run; exact Gaussian TV",
            run: tv_chain,
        },
        CheckEntry {
            id: "tv_jump:simulation",
            suite: Suite::TvJump,
            display: "compound Poisson",
            summary: "Poisson count and jump-size laws",
            run: tv_jump_simulation,
        },
        CheckEntry {
            id: "tv_jump:decay",
            suite: Suite::TvJump,
            display: "jump TV rate",
            summary: "TV slope in [-0.65, -0.35] and TV >= 2e^{-λ₀t}",
            run: tv_jump_decay,
        },
        CheckEntry {
            id: "jump_derivative:agreement",
            suite: Suite::JumpDerivative,
            display: "jump derivative formula",
            summary: "formula vs same-skeleton finite differences on the catalogue",
            run: jump_agreement,
        },
        CheckEntry {
            id: "jump_derivative:constant",
            suite: Suite::JumpDerivative,
            display: "jump derivative formula",
            summary: "constant f gives zero",
            run: jump_constant,
        },
        CheckEntry {
            id: "alpha_rate:scaling",
            suite: Suite::AlphaRate,
            display: "α(t)",
            summary: "α(t) t^{1/β} constant for power laws; β = 1 constant is 2",
            run: alpha_scaling,
        },
        CheckEntry {
            id: "alpha_rate:log1p",
            suite: Suite::AlphaRate,
            display: "α(t)",
            summary: "log(1+r): Beta closed form for t > 1/2, infinite otherwise",
            run: alpha_log1p,
        },
    ];
    REG
}

/// One line per check: `suite  check_id  display  summary`.
pub fn list_suites() -> String {
    let mut s = String::new();
    for suite in Suite::ALL {
        for c in registry().iter().filter(|c| c.suite == suite) {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", suite.name(), c.id, c.display, c.summary);
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub version: String,
    pub config: Vec<(String, String)>,
    pub rows: Vec<CheckRow>,
    /// `(check id, seconds)`; kept out of `to_csv`.
    pub timings: Vec<(String, f64)>,
    pub warnings: Vec<String>,
}

impl RunManifest {
    /// All non-exploratory rows pass.
    pub fn passed(&self) -> bool {
        self.rows
            .iter()
            .filter(|r| !r.exploratory)
            .all(|r| r.verdict() == Verdict::Pass)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# couplab {}", self.version);
        for (k, v) in &self.config {
            let _ = writeln!(s, "# {k} = {v}");
        }
        s.push_str(CHECK_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        let _ = writeln!(s, "# overall = {}", if self.passed() { "pass" } else { "fail" });
        s
    }

    pub fn timings_csv(&self) -> String {
        let mut s = String::from("check_id,wall_seconds\n");
        for (id, t) in &self.timings {
            let _ = writeln!(s, "{id},{t:.3}");
        }
        s
    }
}

/// Runs every check of the suite, in registry order, and writes
/// `manifest.csv`, `timings.csv` and the per-check CSVs.
pub fn run(config: &ExperimentConfig) -> Result<RunManifest> {
    std::fs::create_dir_all(&config.output_dir)?;
    let manifest = execute(config);
    write_outputs(config, &manifest.0, &manifest.1)?;
    Ok(manifest.0)
}

/// Runs the checks without touching the filesystem.
pub fn execute(config: &ExperimentConfig) -> (RunManifest, Artifacts) {
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    let mut artifacts = Vec::new();
    let mut warnings = Vec::new();
    for (index, entry) in registry().iter().enumerate() {
        if !config.suite.contains(entry.suite) {
            continue;
        }
        let mut ctx = Ctx {
            p: &config.params,
            seed: derive_seed(config.seed, index as u64),
            artifacts: Vec::new(),
        };
        let start = Instant::now();
        let out = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| (entry.run)(&mut ctx)));
        let result = match out {
            Ok(r) => r,
            Err(_) => Err(Error::Solver(format!("check {} panicked", entry.id))),
        };
        timings.push((entry.id.to_string(), start.elapsed().as_secs_f64()));
        match result {
            Ok(rs) => rows.extend(rs.into_iter().map(|mut r| {
                r.check_id = format!("{}/{}", entry.id, r.check_id);
                r
            })),
            Err(e) => {
                warnings.push(format!("{}: {e}", entry.id));
                let mut r = CheckRow::failed(entry.id, &e);
                r.seed = ctx.seed;
                rows.push(r);
            }
        }
        artifacts.extend(ctx.artifacts);
    }
    let manifest = RunManifest {
        version: VERSION.to_string(),
        config: config.echo.clone(),
        rows,
        timings,
        warnings,
    };
    (manifest, artifacts)
}

fn write_outputs(config: &ExperimentConfig, m: &RunManifest, artifacts: &Artifacts) -> Result<()> {
    let dir = &config.output_dir;
    std::fs::write(dir.join("manifest.csv"), m.to_csv())?;
    std::fs::write(dir.join("timings.csv"), m.timings_csv())?;
    for (name, body) in artifacts {
        std::fs::write(dir.join(name), body)?;
    }
    Ok(())
}

fn exact(id: impl Into<String>, lhs: f64, rhs: f64, seed: u64) -> CheckRow {
    CheckRow::analytic(id, lhs, rhs).with_slack(0.0).with_mc(0, seed)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_weights(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| r.random::<f64>() + 1e-3).collect();
    let s: f64 = raw.iter().sum();
    let mut w: Vec<f64> = raw.iter().map(|x| x / s).collect();
    let err = 1.0 - w.iter().sum::<f64>();
    let k = (0..n).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap_or(0);
    w[k] += err;
    w
}

fn labelled(n: usize, w: Vec<f64>) -> Result<DiscreteMeasure> {
    let labels: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
    let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
    DiscreteMeasure::with_labels(&refs, w)
}

fn transport_duality(c: &mut Ctx) -> Result<Vec<CheckRow>> {
    let mut r = rng(c.seed);
    let mut instances = Vec::with_capacity(c.p.transport_instances);
    for k in 0..c.p.transport_instances {
        let n = r.random_range(1..=6);
        let m = r.random_range(1..=6);
        let mu = labelled(n, random_weights(n, &mut r))?;
        let nu = labelled(m, random_weights(m, &mut r))?;
        let cost = CostMatrix::new(n, m, (0..n * m).map(|_| r.random_range(0.0..3.0)).collect())?;
        let p = if r.random::<bool>() { 1.0 } else { 2.0 };
        instances.push(TransportInstance {
            id: format!("random{k}"),
            mu,
            nu,
            cost,
            p,
        });
    }
    let mut gap: f64 = 0.0;
    let mut tv_gap: f64 = 0.0;
    let mut table = Vec::with_capacity(instances.len());
    for inst in &instances {
        let row = evaluate(inst)?;
        gap = gap.max(row.gap);
        table.push(row);
        // discrete cost on a common ground set
        let n = inst.mu.len();
        let nu = labelled(n, random_weights(n, &mut r))?;
        let sol = solve_transport(&inst.mu, &nu, &CostMatrix::discrete(n), inst.p)?;
        let (tv_half, _) = wasserstein_coupling_tv(&inst.mu, &nu)?;
        tv_gap = tv_gap.max((sol.cost_p - tv_half).abs());
    }
    c.artifacts.push(("transport_results.csv".into(), results_csv(&table)));
    Ok(vec![
        exact("primal_dual_gap", gap, 1e-8, c.seed),
        exact("discrete_cost_tv_gap", tv_gap, 1e-10, c.seed),
    ])
}

fn transport_monotone(c: &mut Ctx) -> Result<Vec<CheckRow>> {
    let mut r = rng(c.seed);
    let mut worst: f64 = 0.0;
    for _ in 0..c.p.transport_instances / 2 {
        let n = r.random_range(1..=8);
        let m = r.random_range(1..=8);
        let xs: Vec<f64> = (0..n).map(|i| i as f64 + r.random_range(0.0..0.9)).collect();
        let ys: Vec<f64> = (0..m).map(|i| 2.0 * i as f64 - 3.0 + r.random::<f64>()).collect();
        let mu = DiscreteMeasure::on_line(&xs, random_weights(n, &mut r))?;
        let nu = DiscreteMeasure::on_line(&ys, random_weights(m, &mut r))?;
        let (_, cost2) = monotone_map_1d(&mu, &nu)?;
        let (w2, _) = wasserstein_lp(&mu, &nu, &CostMatrix::euclidean(&mu, &nu)?, 2.0)?;
        worst = worst.max((cost2 * cost2 - w2 * w2).abs());
    }
    Ok(vec![exact("quantile_lp_gap", worst, 1e-8, c.seed)])
}

fn transport_fkg(c: &mut Ctx) -> Result<Vec<CheckRow>> {
    let mut r = rng(c.seed);
    let mut violations = 0usize;
    for _ in 0..c.p.transport_instances / 2 {
        let n = r.random_range(1..=8);
        let xs: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let mu = DiscreteMeasure::on_line(&xs, random_weights(n, &mut r))?;
        let nu = DiscreteMeasure::on_line(&xs, random_weights(n, &mut r))?;
        let mut increasing = || {
            let mut acc = r.random_range(-2.0..2.0);
            (0..n)
                .map(|_| {
                    acc += r.random_range(0.0..1.0);
                    acc
                })
                .collect::<Vec<f64>>()
        };
        let f = increasing();
        let g = increasing();
        if !fkg_check(&mu, &nu, &f, &g)?.holds {
            violations += 1;
        }
    }
    Ok(vec![exact("violations", violations as f64, 0.0, c.seed)])
}

const BISMUT_FUNCTIONS: [&str; 4] = ["bump:1:0.5", "exp_linear:0.5", "smooth_step:0:0.5", "constant:2"];
const BISMUT_START: f64 = 0.3;

fn diffusion_battery() -> [(&'static str, DiffusionSpec); 2] {
    [("bm", DiffusionSpec::brownian(1)), ("ou", DiffusionSpec::ou(1))]
}

fn bismut_agreement(c: &mut Ctx) -> Result<Vec<CheckRow>> {
    let grid = StepGrid::new(c.p.h, c.p.horizon)?;
    let fs: Vec<TestFunction> = BISMUT_FUNCTIONS
        .iter()
        .map(|id| TestFunction::from_id(id, 1))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (k, (name, spec)) in diffusion_battery().iter().enumerate() {
        let s1 = derive_seed(c.seed, 2 * k as u64);
        let s2 = derive_seed(c.seed, 2 * k as u64 + 1);
        let b = bismut_batch(spec, &[BISMUT_START], &[1.0], &fs, grid, c.p.paths, s1)?;
        let d = finite_difference_batch(spec, &[BISMUT_START], &[1.0], &fs, grid, c.p.paths, s2, c.p.delta)?;
        for ((f, b), d) in fs.iter().zip(&b).zip(&d) {
            rows.push(bismut_agreement_row(&format!("{name}:{}", f.id()), b, d, s1));
            if let Some(r) = b.reference_row(&format!("{name}:{}:zero", f.id()), s1) {
                rows.push(r);
            }
        }
    }
    Ok(rows)
}

fn bismut_exact(c: &mut Ctx) -> Result<Vec<CheckRow>> {
    let grid = StepGrid::new(c.p.h, c.p.horizon)?;
    let f = TestFunction::from_id("projection:0", 1)?;
    let mut rows = Vec::new();
    for (k, (name, spec)) in diffusion_battery().iter().enumerate() {
        let s = derive_seed(c.seed, k as u64);
        let b = &bismut_batch(spec, &[BISMUT_START], &[1.0], std::slice::from_ref(&f), grid, c.p.paths, s)?[0];
        let want = GaussianFlow::of(spec)
            .map(|g| g.mean_factor(c.p.horizon))
            .ok_or_else(|| Error::InvalidInput("battery spec is not Gaussian".into()))?;
        rows.push(
            CheckRow::new(format!("{name}:projection"), (b.estimate - want).abs(), 0.0, b.std_error)
                .with_sigmas(4.0)
                .with_slack(ANALYTIC_TOL)
                .with_mc(b.n_paths, s),
        );
    }
    Ok(rows)
}

fn bismut_gradient_bound(c: &mut Ctx) -> Result<Vec<CheckRow>> {
    let grid = StepGrid::new(c.p.h, c.p.horizon)?;
    let spec = DiffusionSpec::ou(1);
    let f = TestFunction::from_id("bump:1:0", 1)?;
    let mut row = gradient_bound_check(&spec, &[0.5], &f, grid, c.p.paths, c.seed, c.p.delta)?;
    row.check_id = "ou:bump".into();
    Ok(vec![row])
}

fn harnack_analytic(c: &mut Ctx) -> Result<Vec<CheckRow>> {
    let spec = DiffusionSpec::ou(1);
    // a short grid: only the closed-form sides are used
    let grid = StepGrid::new(c.p.horizon / 4.0, c.p.horizon)?;
    let mut rows = Vec::new();
    for a in [-1.0, 0.5, 1.0, 2.0] {
        let f = TestFunction::ExpLinear { a: vec![a] };
        let r = harnack_batch(&spec, &[0.0], &[1.0], std::slice::from_ref(&f), 2.0, grid, 2, c.seed)?;
        let r = &r[0];
        let analytic = r
            .analytic
            .clone()
            .ok_or_else(|| Error::Solver("no closed form for OU".into()))?;
        let margin = r.analytic_log_margin.unwrap_or(f64::NAN);
        rows.push(CheckRow { check_id: format!("a={a}:sides"), ..analytic });
        // the margin must be strictly positive: 0 < margin
        rows.push(exact(format!("a={a}:positive_margin"), ANALYTIC_TOL, margin, c.seed));
    }
    Ok(rows)
}

const HARNACK_FUNCTIONS: [&str; 3] = ["bump:1:0.5", "smooth_step:0:0.5", "exp_linear:1"];

fn harnack_mc(c: &mut Ctx) -> Result<Vec<CheckRow>> {
    let grid = StepGrid::new(c.p.h, c.p.horizon)?;
    let fs: Vec<TestFunction> = HARNACK_FUNCTIONS
        .iter()
        .map(|id| TestFunction::from_id(id, 1))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (k, (name, spec)) in diffusion_battery().iter().enumerate() {
        let s = derive_seed(c.seed, k as u64);
        for (f, r) in fs.iter().zip(harnack_batch(spec, &[0.0], &[1.0], &fs, 2.0, grid, c.p.paths, s)?) {
            rows.push(CheckRow { check_id: format!("{name}:{}", f.id()), ..r.mc });
        }
    }
    Ok(rows)
}

fn log_harnack_closed_form(c: &mut Ctx) -> Result<Vec<CheckRow>> {
    let spec = DiffusionSpec::ou(1);
    let t = c.p.horizon;
    let g = GaussianFlow::of(&spec).ok_or_else(|| Error::Solver("OU is Gaussian".into()))?;
    // a* = (m_x - m_y)/v makes the inequality an equality
    let a_star = (0.0 - g.mean_factor(t)) / g.variance(t);
    let mut rows = Vec::new();
    for a in [-2.0, -0.5, 0.5, 1.0, a_star] {
        let r = log_harnack_analytic(&spec, &[0.0], &[1.0], &[a], t)?;
        rows.push(CheckRow { check_id: format!("a={a:.6}"), ..r });
    }
    let tight = log_harnack_analytic(&spec, &[0.0], &[1.0], &[a_star], t)?;
    rows.push(exact("tightness", (tight.rhs - tight.lhs).abs(), 1e-9, c.seed));
    let constant = log_harnack_constant(&spec, &[0.0], &[1.0], t);
    let want = 1.0 / (2f64.exp() - 1.0);
    rows.push(exact("constant", (constant - want).abs(), 1e-12, c.seed));
    Ok(rows)
}

fn log_harnack_mc(c: &mut Ctx) -> Result<Vec<CheckRow>> {
    let grid = StepGrid::new(c.p.h, c.p.horizon)?;
    let spec = DiffusionSpec::ou(1);
    let fs: Vec<TestFunction> = ["1+bump:1:0.5", "1+smooth_step:0:0.5"]
        .iter()
        .map(|id| TestFunction::from_id(id, 1))
        .collect::<Result<_>>()?;
    let rows = log_harnack_batch(&spec, &[0.0], &[1.0], &fs, grid, c.p.paths, c.seed)?;
    Ok(fs
        .iter()
        .zip(rows)
        .map(|(f, r)| CheckRow { check_id: format!("ou:{}", f.id()), ..r })
        .collect())
}

fn log_harnack_entropy(c: &mut Ctx) -> Result<Vec<CheckRow>> {
    let grid = StepGrid::new(c.p.h, c.p.horizon)?;
    let spec = DiffusionSpec::ou(1);
    let run = couple_girsanov_tt(&spec, &[0.0], &[1.0], grid, c.p.paths, c.seed, Record::Terminal)?;
    let e = run.entropy();
    let bound = entropy_bound(spec.k_augmented, spec.lambda, 1.0, c.p.horizon);
    let w = run.mean_weight();
    c.artifacts.push(("girsanov_tail.csv".into(), tail_csv(&coupling_time_tail(&run, &[c.p.horizon]))));
    Ok(vec![
        CheckRow::new("ou:entropy", e.mean, bound, e.se).with_mc(e.n, c.seed),
        CheckRow::new("ou:weighted_uncoupled", run.weighted_uncoupled_fraction(), 0.01, 0.0)
            .with_mc(e.n, c.seed),
        CheckRow::new("ou:mean_weight", (w.mean - 1.0).abs(), 0.0, w.se)
            .with_sigmas(4.0)
            .with_mc(w.n, c.seed),
    ])
}

/// Lipschitz constant of the difference of the two terminal densities, from
/// the Gaussian law of the uncoupled process.
fn density_lipschitz(spec: &DiffusionSpec, t: f64) -> Result<f64> {
    GaussianFlow::of(spec)
        .map(|g| gaussian_difference_lipschitz(g.variance(t)))
        .ok_or_else(|| Error::InvalidInput("TV chain needs a Gaussian reference spec".into()))
}

fn coupling_rows(name: &str, run: &CouplingRun, lipschitz: f64) -> Result<Vec<CheckRow>> {
    let mut row = tv_chain_row(run, lipschitz)?;
    row.check_id = format!("{name}:chain");
    Ok(vec![row])
}

fn tv_forced(c: &mut Ctx) -> Result<Vec<CheckRow>> {
    let grid = StepGrid::new(c.p.forced_h, c.p.horizon)?;
    let mut rows = Vec::new();
    for (k, (name, spec)) in diffusion_battery().iter().enumerate() {
        let s = derive_seed(c.seed, k as u64);
        let run = couple_forced(spec, &[0.0], &[1.0], grid, c.p.forced_paths, s, Record::Terminal)?;
        let eta = EtaSchedule::new(spec.k_drift, c.p.horizon, 1.0, None);
        let w = run.mean_weight();
        rows.push(exact(format!("{name}:coupled_fraction"), 0.99, run.coupling_fraction(), s).with_mc(run.n_paths, s));
        rows.push(exact(format!("{name}:eta_identity"), (eta.closing_integral() - 1.0).abs(), 1e-8, s));
        rows.push(
            CheckRow::new(format!("{name}:mean_weight"), (w.mean - 1.0).abs(), 0.0, w.se)
                .with_sigmas(4.0)
                .with_mc(w.n, s),
        );
        rows.extend(coupling_rows(&format!("{name}:forced"), &run, density_lipschitz(spec, c.p.horizon)?)?);
        c.artifacts.push((
            format!("forced_{name}_tail.csv"),
            tail_csv(&coupling_time_tail(&run, &[0.25 * c.p.horizon, 0.5 * c.p.horizon, c.p.horizon])),
        ));
    }
    Ok(rows)
}

fn tv_chain(c: &mut Ctx) -> Result<Vec<CheckRow>> {
    let grid = StepGrid::new(c.p.h, c.p.horizon)?;
    let t = c.p.horizon;
    let bm = DiffusionSpec::brownian(1);
    let ou = DiffusionSpec::ou(1);
    let n = c.p.paths;
    let s = |k: u64| derive_seed(c.seed, k);
    let runs = [
        ("ou:forced", couple_forced(&ou, &[0.0], &[1.0], grid, n, s(0), Record::Terminal)?, &ou),
        ("ou:girsanov", couple_girsanov_tt(&ou, &[0.0], &[1.0], grid, n, s(1), Record::Terminal)?, &ou),
        ("bm:forced", couple_forced(&bm, &[0.0], &[1.0], grid, n, s(2), Record::Terminal)?, &bm),
        ("ou:synchronous", couple_synchronous(&ou, &[0.0], &[1.0], grid, n, s(3), Record::Terminal)?, &ou),
        ("bm:synchronous", couple_synchronous(&bm, &[0.0], &[1.0], grid, n, s(4), Record::Terminal)?, &bm),
    ];
    let mut rows = Vec::new();
    for (name, run, spec) in &runs {
        rows.extend(coupling_rows(name, run, density_lipschitz(spec, t)?)?);
    }
    // synchronous BM never couples: TV is the exact Gaussian shift value
    let (_, bm_sync, _) = &runs[4];
    let mut row = tv_exact_row(bm_sync, gaussian_shift_tv(1.0, t), density_lipschitz(&bm, t)?)?;
    row.check_id = "bm:synchronous:exact".into();
    rows.push(row);
    Ok(rows)
}

fn jump_gaussian_spec() -> Result<JumpSpec> {
    JumpSpec::scalar(0.0, JumpDensity::Gaussian { sigma: 1.0 }, 1.0)
}

fn tv_jump_simulation(c: &mut Ctx) -> Result<Vec<CheckRow>> {
    let spec = jump_gaussian_spec()?;
    let t = 2.0;
    let b = simulate_jump(&spec, &[0.0], t, c.p.paths, c.seed, Record::Full)?;
    let counts: Vec<f64> = b.counts.iter().map(|&k| k as f64).collect();
    let m = MeanSe::of(&counts);
    let sizes: Vec<f64> = (0..b.n_paths).flat_map(|p| b.jump_sizes(p).to_vec()).collect();
    let sm = MeanSe::of(&sizes);
    let sq: Vec<f64> = sizes.iter().map(|z| z * z).collect();
    let sv = MeanSe::of(&sq);
    let n = b.n_paths;
    let mut rows = vec![CheckRow { check_id: "no_jump_probability".into(), ..no_jump_row(&b) }];
    rows.push(
        CheckRow::new("mean_count", (m.mean - spec.lambda0 * t).abs(), 0.0, m.se)
            .with_sigmas(4.0)
            .with_mc(n, c.seed),
    );
    rows.push(CheckRow::new("size_mean", sm.mean.abs(), 0.0, sm.se).with_sigmas(4.0).with_mc(n, c.seed));
    rows.push(
        CheckRow::new("size_second_moment", (sv.mean - 1.0).abs(), 0.0, sv.se)
            .with_sigmas(4.0)
            .with_mc(n, c.seed),
    );
    Ok(rows)
}

fn tv_jump_decay(c: &mut Ctx) -> Result<Vec<CheckRow>> {
    let spec = jump_gaussian_spec()?;
    let r = tv_decay_experiment(&spec, 0.0, 1.0, &c.p.jump_times, c.p.paths, c.seed, Some((c.p.z0, c.p.eps)))?;
    c.artifacts.push(("tv_jump_decay.csv".into(), r.csv()));
    let strip = |mut r: CheckRow| {
        if let Some(s) = r.check_id.strip_prefix("tv_jump:") {
            r.check_id = s.to_string();
        }
        r
    };
    let mut rows: Vec<CheckRow> = r.slope_rows().into_iter().map(strip).collect();
    rows.extend(r.lower_bound_rows().into_iter().map(strip));
    Ok(rows)
}

const JUMP_FUNCTIONS: [&str; 2] = ["bump:0.8", "smooth_step:0:0.5"];
const JUMP_START: f64 = 0.3;

fn jump_catalogue() -> Result<Vec<(String, JumpSpec)>> {
    let mut out = Vec::new();
    for rho in [JumpDensity::Gaussian { sigma: 1.0 }, JumpDensity::CosSquared] {
        for a in [0.0, -1.0] {
            out.push((format!("{}:a={a}", rho.id()), JumpSpec::scalar(a, rho, 1.0)?));
        }
    }
    Ok(out)
}

fn jump_agreement(c: &mut Ctx) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let mut k = 0u64;
    for (name, spec) in jump_catalogue()? {
        for id in JUMP_FUNCTIONS {
            let f = TestFunction::from_id(id, 1)?;
            let s1 = derive_seed(c.seed, 2 * k);
            let s2 = derive_seed(c.seed, 2 * k + 1);
            k += 1;
            let est = jump_derivative(&spec, &[JUMP_START], &f, c.p.horizon, c.p.paths, s1)?;
            let fd = jump_fd_oracle(&spec, &[JUMP_START], &f, c.p.horizon, c.p.paths, s2, c.p.jump_delta)?;
            rows.extend(jump_agreement_rows(&format!("{name}:{}", f.id()), &est, &fd, s1));
        }
    }
    Ok(rows)
}

fn jump_constant(c: &mut Ctx) -> Result<Vec<CheckRow>> {
    let f = TestFunction::Constant(2.0);
    let mut rows = Vec::new();
    for (k, (name, spec)) in jump_catalogue()?.into_iter().enumerate() {
        let s = derive_seed(c.seed, k as u64);
        let est = &jump_derivative(&spec, &[JUMP_START], &f, c.p.horizon, c.p.paths, s)?[0];
        if let Some(r) = est.reference_row(&name, s) {
            rows.push(r);
        }
    }
    Ok(rows)
}

fn alpha_scaling(c: &mut Ctx) -> Result<Vec<CheckRow>> {
    let grid = [0.1, 1.0, 10.0];
    let mut rows = Vec::new();
    for beta_ in [0.5, 1.0, 1.5] {
        let r = alpha_rate_check(beta_, 1.0, &grid)?;
        c.artifacts.push((format!("alpha_rate_beta={beta_}.csv"), r.csv()));
        rows.extend(r.rows().into_iter().map(|mut row| {
            row.check_id = row.check_id.trim_start_matches("alpha_rate:").to_string();
            row.seed = c.seed;
            row
        }));
        if beta_ == 1.0 {
            rows.push(exact("beta=1:constant_is_2", (r.constant - 2.0).abs(), 1e-6, c.seed));
        }
    }
    Ok(rows)
}

fn alpha_log1p(c: &mut Ctx) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for t in [0.75, 1.0, 3.0] {
        let a = bernstein_alpha(&Bernstein::Log1p, t)?.value();
        let want = beta(0.5, t - 0.5);
        rows.push(exact(format!("t={t}"), (a - want).abs() / want, 1e-8, c.seed));
    }
    for t in [0.25, 0.5] {
        let inf = bernstein_alpha(&Bernstein::Log1p, t)? == AlphaValue::Infinite;
        rows.push(exact(format!("t={t}:infinite"), if inf { 0.0 } else { 1.0 }, 0.0, c.seed));
    }
    Ok(rows)
}

/// Process exit code for a finished run: 0 iff every non-exploratory row passed.
pub fn exit_code(m: &RunManifest) -> i32 {
    if m.passed() {
        0
    } else {
        1
    }
}

/// Human summary printed after a run.
pub fn summary(m: &RunManifest) -> String {
    let mut s = String::new();
    let failing: Vec<&CheckRow> = m
        .rows
        .iter()
        .filter(|r| !r.exploratory && r.verdict() != Verdict::Pass)
        .collect();
    let _ = writeln!(
        s,
        "{} rows, {} failing, overall {}",
        m.rows.len(),
        failing.len(),
        if m.passed() { "pass" } else { "fail" }
    );
    for r in failing {
        let _ = writeln!(s, "  {}", r.csv_line());
    }
    for w in &m.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

pub fn usage_error(e: &Error) -> bool {
    matches!(e, Error::InvalidInput(_) | Error::Parse { .. } | Error::UnknownKey(_))
}
