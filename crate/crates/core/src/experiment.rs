//! Experiment configurations and runners shared by the command-line driver
//! and the acceptance tests. Every kind returns numeric tables plus a list of
//! pass/fail checks with their thresholds.

use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adjoint::{
    duality_suite, solve_adjoint_closed_form, solve_adjoint_regression, AdjointSolution, DualityReport, RegressionSpec,
};
use crate::benchmarks::{benchmark, BenchmarkInstance};
use crate::calculus::{
    bracket_of_jump_integral, compensated_jump_integral, compensator, ito_integral, jump_integral_n, jump_of_integral,
    time_integral, GridIntegrand, MarkedIntegrand,
};
use crate::driver::MarkSpace;
use crate::error::{Error, Result};
use crate::forward::{lp_estimate_check, picard_ensemble, Ensemble};
use crate::maximum_principle::{mp_deficiency, MpReport, MpSample, MpSampling};
use crate::problem::{validate, ControlSet, Dynamics, FeedbackControl, Jet, LatticeSpec, ProblemDef};
use crate::rng::{splitmix64, SeedSpec};
use crate::stats::Estimate;
use crate::variation::{dyadic_ladder, fit_order, ladder_experiment, LadderSpec, SpikeKind, SpikeSpec, SpikeValue};

/// Bounds on the fitted order of E[sup|X^ε − X|^p] per unit of p
/// (1.8 and 1.2 at p = 4).
pub const GRAPH_EXCLUDING_ORDER_PER_P: f64 = 0.45;
pub const NAIVE_ORDER_PER_P: f64 = 0.3;
/// Smallest admissible fraction of spike windows that contain a jump.
pub const MIN_JUMP_FRACTION: f64 = 0.3;
pub const X_HAT_SLOPE: (f64, f64) = (0.8, 1.2);
pub const Y_HAT_SLOPE: (f64, f64) = (1.7, 2.3);
/// Required decay of a normalized residual from the largest to the smallest ε.
pub const RESIDUAL_DECAY: f64 = 0.2;
pub const SE_MULTIPLIER: f64 = 3.0;
/// Relative tolerance for identities that hold pathwise in exact arithmetic.
pub const PATHWISE_TOL: f64 = 1e-12;
pub const PICARD_GAP_TOL: f64 = 1e-10;
/// Largest admissible max/min ratio of the L^p estimate across magnitudes.
pub const LP_SPREAD: f64 = 10.0;
/// Picard distances below this are at round-off and excluded from ratios.
pub const PICARD_FLOOR: f64 = 1e-12;

const FIT_SALT: u64 = 0x6669_7420_7061_7468;
const INTEGRAND_SALT: u64 = 0x696e_7465_6772_616e;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Calculus,
    Orders,
    Lemmas,
    Duality,
    MpCheck,
    Picard,
    LpEstimate,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::Calculus,
        ExperimentKind::Orders,
        ExperimentKind::Lemmas,
        ExperimentKind::Duality,
        ExperimentKind::MpCheck,
        ExperimentKind::Picard,
        ExperimentKind::LpEstimate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Calculus => "calculus",
            ExperimentKind::Orders => "orders",
            ExperimentKind::Lemmas => "lemmas",
            ExperimentKind::Duality => "duality",
            ExperimentKind::MpCheck => "mp-check",
            ExperimentKind::Picard => "picard",
            ExperimentKind::LpEstimate => "lp-estimate",
        }
    }

    pub fn default_benchmark(self) -> &'static str {
        match self {
            ExperimentKind::Lemmas | ExperimentKind::LpEstimate => "nonlinear_jump",
            ExperimentKind::MpCheck => "lq_jump_mp",
            _ => "lq_jump",
        }
    }

    fn default_steps(self) -> usize {
        match self {
            ExperimentKind::Orders | ExperimentKind::Lemmas => 1024,
            _ => 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpikeSection {
    pub t_bar: f64,
    /// Spike value v; ignored when `shift` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    /// Spike value u(t̄) + shift.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<f64>,
}

impl Default for SpikeSection {
    fn default() -> Self {
        Self { t_bar: 0.25, value: None, shift: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualitySection {
    pub epsilon: f64,
    /// C in the C·Δt allowance added to three standard errors.
    pub allowance: f64,
}

impl Default for DualitySection {
    fn default() -> Self {
        Self { epsilon: 0.125, allowance: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpSection {
    /// Relative gain change of the detuned linear policy.
    pub detune: f64,
    /// Candidate values are restricted to [−v_range, v_range] on interval control sets.
    pub v_range: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_stride: Option<usize>,
    /// C in the C·Δt allowance.
    pub allowance: f64,
    /// Paths on which the inequality is inspected; the adjoint is fitted on `paths`.
    pub eval_paths: usize,
    pub degree: usize,
}

impl Default for MpSection {
    fn default() -> Self {
        Self { detune: 0.25, v_range: 10.0, time_stride: None, allowance: 0.0, eval_paths: 2000, degree: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PicardSection {
    pub iterations: usize,
}

impl Default for PicardSection {
    fn default() -> Self {
        Self { iterations: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LpSection {
    /// Sizes δ of the perturbation x0 + δ, b + δ, σ + δ, c + δ.
    pub magnitudes: Vec<f64>,
}

impl Default for LpSection {
    fn default() -> Self {
        Self { magnitudes: (0..6).map(|k| 1e-3 * 2f64.powi(k)).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalculusSection {
    /// Random integrands for the pathwise identities.
    pub integrands: usize,
}

impl Default for CalculusSection {
    fn default() -> Self {
        Self { integrands: 1000 }
    }
}

/// One experiment. Unset optional fields take kind-specific defaults in
/// [`ExperimentConfig::resolved`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<String>,
    /// Overrides the benchmark horizon.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    /// Replaces the benchmark's single mark by one of this rate; 0 removes jumps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jump_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_steps: Option<usize>,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilons: Option<Vec<f64>>,
    #[serde(default = "default_powers")]
    pub powers: Vec<u32>,
    #[serde(default = "default_v_grid")]
    pub v_grid_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub spike: SpikeSection,
    #[serde(default)]
    pub duality: DualitySection,
    #[serde(default)]
    pub mp: MpSection,
    #[serde(default)]
    pub picard: PicardSection,
    #[serde(default)]
    pub lp: LpSection,
    #[serde(default)]
    pub calculus: CalculusSection,
}

fn default_paths() -> usize {
    10_000
}

fn default_seed() -> u64 {
    11
}

fn default_powers() -> Vec<u32> {
    vec![2, 4]
}

fn default_v_grid() -> usize {
    401
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            benchmark: None,
            horizon: None,
            jump_rate: None,
            base_steps: None,
            paths: default_paths(),
            seed: default_seed(),
            epsilons: None,
            powers: default_powers(),
            v_grid_size: default_v_grid(),
            out: None,
            spike: SpikeSection::default(),
            duality: DualitySection::default(),
            mp: MpSection::default(),
            picard: PicardSection::default(),
            lp: LpSection::default(),
            calculus: CalculusSection::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn benchmark_name(&self) -> &str {
        self.benchmark.as_deref().unwrap_or(self.kind.default_benchmark())
    }

    pub fn steps(&self) -> usize {
        self.base_steps.unwrap_or(self.kind.default_steps())
    }

    /// Benchmark with the horizon and jump-rate overrides applied.
    pub fn instance(&self) -> Result<BenchmarkInstance> {
        let mut b = benchmark(self.benchmark_name())?;
        if let Some(h) = self.horizon {
            b.problem.horizon = h;
        }
        if let Some(rate) = self.jump_rate {
            if b.problem.marks.len() > 1 {
                return Err(Error::Config("jump_rate applies to single-mark benchmarks only".into()));
            }
            b.problem.marks = if rate == 0.0 { MarkSpace::empty() } else { MarkSpace::single(rate)? };
        }
        Ok(b)
    }

    /// Copy with every defaulted field made explicit.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        let horizon = match c.horizon {
            Some(h) => h,
            None => c.instance()?.problem.horizon,
        };
        c.benchmark = Some(c.benchmark_name().to_string());
        c.base_steps = Some(c.steps());
        if c.epsilons.is_none() {
            c.epsilons = Some(dyadic_ladder(horizon, 3, 6));
        }
        if c.mp.time_stride.is_none() {
            c.mp.time_stride = Some((c.steps() / 32).max(1));
        }
        if c.spike.value.is_none() && c.spike.shift.is_none() {
            if c.kind == ExperimentKind::Orders {
                c.spike.shift = Some(1.0);
            } else {
                c.spike.value = Some(1.0);
            }
        }
        Ok(c)
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.paths == 0 || self.steps() == 0 || self.v_grid_size == 0 {
            return bad("paths, base_steps and v_grid_size must be positive");
        }
        if self.powers.is_empty() || self.powers.contains(&0) {
            return bad("powers must be non-empty and positive");
        }
        if let Some(h) = self.horizon {
            if !(h > 0.0 && h.is_finite()) {
                return bad("horizon must be positive");
            }
        }
        if let Some(r) = self.jump_rate {
            if !(r >= 0.0 && r.is_finite()) {
                return bad("jump_rate must be non-negative");
            }
        }
        if let Some(eps) = &self.epsilons {
            if eps.is_empty() || eps.iter().any(|&e| !(e > 0.0)) || eps.windows(2).any(|w| w[1] >= w[0]) {
                return bad("epsilons must be positive and strictly decreasing");
            }
        }
        match self.kind {
            ExperimentKind::Orders | ExperimentKind::Lemmas => {
                if self.epsilons.as_ref().is_some_and(|e| e.len() < 2) {
                    return bad("an order fit needs at least two epsilons");
                }
            }
            ExperimentKind::LpEstimate => {
                if self.powers.iter().any(|p| p % 2 != 0) {
                    return bad("lp-estimate needs even powers");
                }
                if self.lp.magnitudes.len() < 2 || self.lp.magnitudes.iter().any(|&d| !(d > 0.0)) {
                    return bad("lp-estimate needs at least two positive magnitudes");
                }
            }
            ExperimentKind::Picard if self.picard.iterations < 2 => return bad("picard needs at least two iterations"),
            ExperimentKind::MpCheck if self.mp.eval_paths == 0 || self.mp.time_stride == Some(0) => {
                return bad("mp eval_paths and time_stride must be positive")
            }
            ExperimentKind::Calculus if self.calculus.integrands == 0 => return bad("calculus integrands must be positive"),
            _ => {}
        }
        Ok(())
    }

    /// SHA-256 of the resolved config without the output directory.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.resolved()?;
        c.out = None;
        let bytes = serde_json::to_vec(&c).map_err(|e| Error::Config(e.to_string()))?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    fn spike_value(&self) -> SpikeValue {
        match (self.spike.shift, self.spike.value) {
            (Some(d), _) => SpikeValue::Shift(d),
            (None, Some(v)) => SpikeValue::Constant(v),
            (None, None) => SpikeValue::Constant(1.0),
        }
    }

    fn ensemble(&self) -> Ensemble {
        Ensemble::new(self.seed, self.paths, self.steps())
    }

    /// Independent paths for regression fits.
    fn fit_ensemble(&self) -> Ensemble {
        Ensemble::new(splitmix64(self.seed ^ FIT_SALT), self.paths, self.steps())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Num(f64),
    Int(u64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Num(x) => format!("{x:e}"),
            Cell::Int(n) => n.to_string(),
            Cell::Text(s) if s.contains([',', '"', '\n']) => format!("\"{}\"", s.replace('"', "\"\"")),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}

impl From<usize> for Cell {
    fn from(n: usize) -> Self {
        Cell::Int(n as u64)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<bool> for Cell {
    fn from(b: bool) -> Self {
        Cell::Int(b as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    fn new(name: &str, columns: &[&str]) -> Self {
        Self { name: name.into(), columns: columns.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// Comma-separated with a header row; floats in Rust's round-trip exponent form.
    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.iter().map(Cell::render).collect::<Vec<_>>().join(","));
            s.push('\n');
        }
        s
    }
}

/// One pass/fail decision. `value` is compared against `bound` in the
/// direction stated by `relation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub relation: String,
    pub bound: f64,
}

impl Check {
    fn at_least(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self { name: name.into(), pass: value >= bound, value, relation: ">=".into(), bound }
    }

    fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self { name: name.into(), pass: value <= bound, value, relation: "<=".into(), bound }
    }

    fn below(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self { name: name.into(), pass: value < bound, value, relation: "<".into(), bound }
    }

    fn within(name: impl Into<String>, value: f64, (lo, hi): (f64, f64)) -> Self {
        Self { name: name.into(), pass: value >= lo && value <= hi, value, relation: format!("in [{lo}, {hi}]"), bound: hi }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub tables: Vec<Table>,
    pub checks: Vec<Check>,
}

impl ExperimentOutput {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Runs the experiment described by `config` on the current rayon pool.
pub fn run(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let cfg = config.resolved()?;
    cfg.check()?;
    let inst = cfg.instance()?;
    match cfg.kind {
        ExperimentKind::Calculus => run_calculus(&cfg, &inst.problem),
        ExperimentKind::Orders => run_orders(&cfg, &inst),
        ExperimentKind::Lemmas => run_lemmas(&cfg, &inst),
        ExperimentKind::Duality => run_duality(&cfg, &inst),
        ExperimentKind::MpCheck => run_mp(&cfg, &inst),
        ExperimentKind::Picard => run_picard(&cfg, &inst),
        ExperimentKind::LpEstimate => run_lp(&cfg, &inst),
    }
}

fn est_cells(e: &Estimate) -> [Cell; 2] {
    [e.mean.into(), e.se.into()]
}

fn mean_within_se(name: &str, e: &Estimate, table: &mut Table) -> Check {
    let bound = SE_MULTIPLIER * e.se;
    table.push(vec![name.into(), e.mean.into(), e.se.into(), bound.into()]);
    Check::at_most(name, e.mean.abs(), bound)
}

fn run_calculus(cfg: &ExperimentConfig, problem: &ProblemDef) -> Result<ExperimentOutput> {
    let marks = &problem.marks;
    let m = marks.len();
    let pathwise = Ensemble::new(cfg.seed, cfg.calculus.integrands, cfg.steps()).map(problem, |k, noise| {
        let grid = &noise.grid;
        let mut rng = SeedSpec::new(splitmix64(cfg.seed ^ INTEGRAND_SALT), k as u64).rng();
        let h = MarkedIntegrand::from_fn(grid, m, |_, _| rng.random_range(-2.0..2.0));
        let bracket = bracket_of_jump_integral(&h, noise)?;
        let squares = jump_integral_n(&h.map(|v| v * v), noise)?;
        let scale = 1.0 + squares.terminal().abs();
        let bracket_err =
            bracket.values.iter().zip(&squares.values).fold(0.0f64, |a, (x, y)| a.max((x - y).abs())) / scale;

        let n = jump_integral_n(&h, noise)?;
        let mut jump_err = 0.0f64;
        let mut off_graph = 0.0f64;
        for i in 1..grid.len() {
            let j = jump_of_integral(&h, noise, grid.time(i))?;
            if grid.is_jump(i) {
                jump_err = jump_err.max((j - (n.values[i] - n.values[i - 1])).abs() / (1.0 + j.abs()));
            } else {
                off_graph = off_graph.max(j.abs());
            }
        }

        let vanishing = MarkedIntegrand::from_fn(grid, m, |i, _| if grid.is_jump(i) { 0.0 } else { rng.random_range(-2.0..2.0) });
        let zero = MarkedIntegrand::constant(grid, m, 0.0);
        let z = compensated_jump_integral(&vanishing, &zero, noise, marks)?;
        let vanish = z.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        Ok([bracket_err, jump_err, off_graph, vanish])
    })?;
    let worst = |k: usize| pathwise.iter().fold(0.0f64, |a, r| a.max(r[k]));

    let stat = cfg.ensemble().map(problem, |_, noise| {
        let grid = &noise.grid;
        // H = 1 + N_{t−} scaled per mark: predictable, with H_pred on (t_i, t_{i+1}] = 1 + N_{t_i}.
        let mut counts = vec![0.0; grid.len()];
        let mut c = 0.0;
        for (i, slot) in counts.iter_mut().enumerate() {
            if grid.is_jump(i) {
                c += 1.0;
            }
            *slot = c;
        }
        let h = MarkedIntegrand::from_fn(grid, m, |i, e| {
            let before = if grid.is_jump(i) { counts[i] - 1.0 } else { counts[i] };
            (1.0 + before) * (e + 1) as f64
        });
        let h_pred = MarkedIntegrand::from_fn(grid, m, |i, e| (1.0 + counts[i]) * (e + 1) as f64);
        let n = jump_integral_n(&h, noise)?.terminal();
        let a = compensator(&h_pred, marks, grid)?.terminal();
        let ones = MarkedIntegrand::constant(grid, m, 1.0);
        let counting = compensated_jump_integral(&ones, &ones, noise, marks)?.terminal();
        let sq = h_pred.map(|v| v * v);
        let jump_iso = (n - a).powi(2) - compensator(&sq, marks, grid)?.terminal();

        let b = noise.brownian_path();
        let hb = GridIntegrand::new((0..grid.len()).map(|i| b[i].sin() + grid.time(i)).collect());
        let ito = ito_integral(&hb, noise)?.terminal();
        let ito_iso = ito * ito - time_integral(&GridIntegrand::new(hb.values.iter().map(|v| v * v).collect()), grid);
        Ok([n - a, counting, jump_iso, ito_iso])
    })?;
    let col = |k: usize| Estimate::from_samples(&stat.iter().map(|r| r[k]).collect::<Vec<_>>());

    let mut pw = Table::new("calculus_pathwise", &["identity", "worst_error", "bound"]);
    let mut checks = Vec::new();
    for (name, value, bound) in [
        ("bracket equals jump integral of the square", worst(0), PATHWISE_TOL),
        ("jump of integral equals increment at jump nodes", worst(1), PATHWISE_TOL),
        ("jump of integral vanishes off the jump graph", worst(2), 0.0),
        ("integrand vanishing on the jump graph has zero compensated integral", worst(3), 0.0),
    ] {
        pw.push(vec![name.into(), value.into(), bound.into()]);
        checks.push(Check::at_most(name, value, bound));
    }
    let mut st = Table::new("calculus_statistical", &["identity", "mean", "se", "bound"]);
    checks.push(mean_within_se("compensator of a predictable integrand", &col(0), &mut st));
    checks.push(mean_within_se("compensated counting process has zero mean", &col(1), &mut st));
    checks.push(mean_within_se("isometry of the compensated jump integral", &col(2), &mut st));
    checks.push(mean_within_se("Ito isometry", &col(3), &mut st));
    Ok(ExperimentOutput { tables: vec![pw, st], checks })
}

fn run_orders(cfg: &ExperimentConfig, inst: &BenchmarkInstance) -> Result<ExperimentOutput> {
    let eps = cfg.epsilons.clone().unwrap_or_default();
    let ens = cfg.ensemble();
    let kinds = [("graph_excluding", SpikeKind::GraphExcluding), ("naive", SpikeKind::Naive)];
    let mut columns = vec!["epsilon".to_string(), "jump_fraction".to_string()];
    let mut ladders = Vec::new();
    for (label, kind) in kinds {
        let spec = LadderSpec {
            t_bar: cfg.spike.t_bar,
            v: cfg.spike_value(),
            epsilons: eps.clone(),
            powers: cfg.powers.clone(),
            kind,
            with_variations: false,
        };
        ladders.push(ladder_experiment(&inst.problem, &inst.reference_control, &spec, &ens)?);
        for p in &cfg.powers {
            columns.push(format!("{label}_p{p}_mean"));
            columns.push(format!("{label}_p{p}_se"));
        }
    }
    let mut moments = Table { name: "orders".into(), columns, rows: Vec::new() };
    for (k, &e) in eps.iter().enumerate() {
        let mut row = vec![e.into(), ladders[0][k].jump_fraction.into()];
        for l in &ladders {
            for m in &l[k].state_moments {
                row.extend(est_cells(m));
            }
        }
        moments.push(row);
    }
    let mut slopes = Table::new("order_slopes", &["variation", "p", "slope", "r2"]);
    let mut fitted = Vec::new();
    for ((label, _), l) in kinds.iter().zip(&ladders) {
        for (j, &p) in cfg.powers.iter().enumerate() {
            let f = fit_order(&eps, &l.iter().map(|pt| pt.state_moments[j].mean).collect::<Vec<_>>())?;
            slopes.push(vec![(*label).into(), (p as usize).into(), f.slope.into(), f.r2.into()]);
            fitted.push((*label, p, f.slope));
        }
    }
    let p_max = *cfg.powers.iter().max().unwrap();
    let slope_of = |label: &str| fitted.iter().find(|f| f.0 == label && f.1 == p_max).unwrap().2;
    let pf = p_max as f64;
    let checks = vec![
        Check::at_least("spike windows containing a jump", ladders[0][0].jump_fraction, MIN_JUMP_FRACTION),
        Check::at_least(format!("graph-excluding order of E sup|X^eps - X|^{p_max}"), slope_of("graph_excluding"), GRAPH_EXCLUDING_ORDER_PER_P * pf),
        Check::at_most(format!("naive order of E sup|X^eps - X|^{p_max}"), slope_of("naive"), NAIVE_ORDER_PER_P * pf),
    ];
    Ok(ExperimentOutput { tables: vec![moments, slopes], checks })
}

fn run_lemmas(cfg: &ExperimentConfig, inst: &BenchmarkInstance) -> Result<ExperimentOutput> {
    let eps = cfg.epsilons.clone().unwrap_or_default();
    let spec = LadderSpec {
        t_bar: cfg.spike.t_bar,
        v: cfg.spike_value(),
        epsilons: eps.clone(),
        powers: cfg.powers.clone(),
        kind: SpikeKind::GraphExcluding,
        with_variations: true,
    };
    let pts = ladder_experiment(&inst.problem, &inst.reference_control, &spec, &cfg.ensemble())?;
    let mut t = Table::new(
        "expansion",
        &[
            "epsilon",
            "x_hat_sq_mean",
            "x_hat_sq_se",
            "y_hat_sq_mean",
            "y_hat_sq_se",
            "expansion_ratio_mean",
            "expansion_ratio_se",
            "cost_difference_mean",
            "cost_difference_se",
            "j_hat_mean",
            "j_hat_se",
            "cost_residual",
            "cost_residual_se",
            "jump_fraction",
        ],
    );
    for p in &pts {
        let mut row = vec![p.epsilon.into()];
        for e in [&p.x_hat_sq, &p.y_hat_sq, &p.expansion_ratio, &p.cost_difference, &p.j_hat] {
            row.extend(est_cells(e));
        }
        row.extend([p.cost_residual.into(), p.cost_residual_se.into(), p.jump_fraction.into()]);
        t.push(row);
    }
    let xs = fit_order(&eps, &pts.iter().map(|p| p.x_hat_sq.mean).collect::<Vec<_>>())?;
    let ys = fit_order(&eps, &pts.iter().map(|p| p.y_hat_sq.mean).collect::<Vec<_>>())?;
    let (first, last) = (&pts[0], &pts[pts.len() - 1]);
    let expansion_decay = last.expansion_ratio.mean / first.expansion_ratio.mean;
    let cost_decay = last.cost_residual / first.cost_residual;
    let mut s = Table::new("expansion_summary", &["quantity", "value"]);
    s.push(vec!["x_hat_sq_slope".into(), xs.slope.into()]);
    s.push(vec!["y_hat_sq_slope".into(), ys.slope.into()]);
    s.push(vec!["expansion_ratio_decay".into(), expansion_decay.into()]);
    s.push(vec!["cost_residual_decay".into(), cost_decay.into()]);
    let checks = vec![
        Check::within("order of E sup|X_hat|^2", xs.slope, X_HAT_SLOPE),
        Check::within("order of E sup|Y_hat|^2", ys.slope, Y_HAT_SLOPE),
        Check::at_most("decay of E sup|X^eps - X - X_hat - Y_hat|^2 / eps^2", expansion_decay, RESIDUAL_DECAY),
        Check::at_most("decay of |J(u^eps) - J(u) - J_hat| / eps", cost_decay, RESIDUAL_DECAY),
    ];
    Ok(ExperimentOutput { tables: vec![t, s], checks })
}

/// Closed-form adjoint when the problem admits one, least-squares Monte Carlo otherwise.
fn adjoint_for(cfg: &ExperimentConfig, problem: &ProblemDef, rule: &FeedbackControl) -> Result<(AdjointSolution, &'static str)> {
    match solve_adjoint_closed_form(problem, rule, cfg.steps()) {
        Ok(c) => Ok((AdjointSolution::ClosedForm(c), "closed_form")),
        Err(Error::Unsupported(_)) => {
            let spec = RegressionSpec { degree: cfg.mp.degree, ..RegressionSpec::default() };
            Ok((AdjointSolution::Regression(solve_adjoint_regression(problem, rule, &cfg.fit_ensemble(), spec)?), "regression"))
        }
        Err(e) => Err(e),
    }
}

fn run_duality(cfg: &ExperimentConfig, inst: &BenchmarkInstance) -> Result<ExperimentOutput> {
    let rule = &inst.reference_control;
    let (adjoint, method) = adjoint_for(cfg, &inst.problem, rule)?;
    let spec = SpikeSpec { t_bar: cfg.spike.t_bar, epsilon: cfg.duality.epsilon, v: cfg.spike_value() };
    let ens = cfg.ensemble();
    let c_dt = cfg.duality.allowance * ens.dt(&inst.problem);
    let suite = duality_suite(&inst.problem, rule, &adjoint, &spec, &ens, c_dt)?;
    let mut t = Table::new(
        "duality",
        &["identity", "lhs_mean", "lhs_se", "rhs_mean", "rhs_se", "difference_mean", "difference_se", "tolerance", "pass"],
    );
    let mut checks = Vec::new();
    for (name, r) in [("p_xhat", &suite.px), ("p_yhat", &suite.py), ("P_xhat_sq", &suite.pxx)] {
        let DualityReport { lhs, rhs, difference, tolerance, pass } = *r;
        let mut row = vec![name.into()];
        row.extend(est_cells(&lhs));
        row.extend(est_cells(&rhs));
        row.extend(est_cells(&difference));
        row.extend([tolerance.into(), pass.into()]);
        t.push(row);
        checks.push(Check::at_most(format!("duality {name} ({method} adjoint)"), difference.mean.abs(), tolerance));
    }
    let mut g = Table::new("reduced_gap", &["epsilon", "gap_mean", "gap_se"]);
    g.push(vec![spec.epsilon.into(), suite.reduced_gap.mean.into(), suite.reduced_gap.se.into()]);
    Ok(ExperimentOutput { tables: vec![t, g], checks })
}

/// A policy that should fail the inequality: a scaled gain for linear
/// feedback, swapped outputs for a threshold rule.
pub fn detuned_policy(rule: &FeedbackControl, detune: f64) -> Option<FeedbackControl> {
    match *rule {
        FeedbackControl::Linear { gain, offset } => Some(FeedbackControl::Linear { gain: gain * (1.0 + detune), offset }),
        FeedbackControl::Threshold { theta, below, above } => Some(FeedbackControl::Threshold { theta, below: above, above: below }),
        _ => None,
    }
}

fn v_grid(cfg: &ExperimentConfig, set: &ControlSet) -> Vec<f64> {
    match set {
        ControlSet::Finite(v) => v.clone(),
        ControlSet::Interval { lo, hi, .. } => {
            let (a, b) = (lo.max(-cfg.mp.v_range), hi.min(cfg.mp.v_range));
            let n = cfg.v_grid_size;
            if n == 1 {
                return vec![0.5 * (a + b)];
            }
            (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect()
        }
    }
}

fn run_mp(cfg: &ExperimentConfig, inst: &BenchmarkInstance) -> Result<ExperimentOutput> {
    let problem = &inst.problem;
    let grid = v_grid(cfg, &problem.control_set);
    let eval = Ensemble::new(cfg.seed, cfg.mp.eval_paths, cfg.steps());
    let sampling = MpSampling {
        time_stride: cfg.mp.time_stride.unwrap_or(1),
        allowance: cfg.mp.allowance * eval.dt(problem),
    };
    let mut policies = vec![("reference", inst.reference_control.clone())];
    if let Some(d) = detuned_policy(&inst.reference_control, cfg.mp.detune) {
        policies.push(("detuned", d));
    }
    let mut summary = Table::new(
        "mp_summary",
        &[
            "policy",
            "adjoint",
            "samples",
            "global_minimum",
            "tolerance",
            "violating_fraction",
            "worst_margin",
            "jump_samples",
            "jump_global_minimum",
            "jump_violating_fraction",
        ],
    );
    let mut worst = Table::new("mp_worst", &["policy", "path", "t", "x", "u", "argmin", "minimum", "se", "tolerance"]);
    let mut checks = Vec::new();
    for (label, rule) in &policies {
        let (adjoint, method) = adjoint_for(cfg, problem, rule)?;
        let MpReport { samples, summary: s, jump_summary: js, .. } = mp_deficiency(problem, rule, &adjoint, &grid, &eval, sampling)?;
        summary.push(vec![
            (*label).into(),
            method.into(),
            s.samples.into(),
            s.global_minimum.into(),
            s.tolerance.into(),
            s.violating_fraction.into(),
            s.worst_margin.into(),
            js.samples.into(),
            js.global_minimum.into(),
            js.violating_fraction.into(),
        ]);
        let mut ranked: Vec<&MpSample> = samples.iter().collect();
        ranked.sort_by(|a, b| (a.minimum + a.tolerance).total_cmp(&(b.minimum + b.tolerance)).then(a.path.cmp(&b.path)));
        for m in ranked.iter().take(10) {
            worst.push(vec![
                (*label).into(),
                m.path.into(),
                m.t.into(),
                m.x.into(),
                m.u.into(),
                m.argmin.into(),
                m.minimum.into(),
                m.se.into(),
                m.tolerance.into(),
            ]);
        }
        if *label == "reference" {
            checks.push(Check::at_least("reference policy: min over samples of (deficiency + tol)", s.worst_margin, 0.0));
        } else {
            checks.push(Check::below("detuned policy: min over samples of (deficiency + tol)", s.worst_margin, 0.0));
        }
    }
    Ok(ExperimentOutput { tables: vec![summary, worst], checks })
}

fn run_picard(cfg: &ExperimentConfig, inst: &BenchmarkInstance) -> Result<ExperimentOutput> {
    let problem = &inst.problem;
    let audit = validate(problem, &LatticeSpec::default());
    let lc: Vec<f64> = (0..problem.marks.len()).map(|e| audit.max_derivative(&format!("c[{e}]_x"))).collect();
    let lip = (audit.max_derivative("b_x"), audit.max_derivative("sigma_x"), lc.as_slice());
    let r = picard_ensemble(problem, &inst.reference_control, &cfg.ensemble(), cfg.picard.iterations, lip)?;
    let mut t = Table::new("picard", &["iteration", "distance", "ratio"]);
    let mut worst_ratio = 0.0f64;
    for (k, &d) in r.distances.iter().enumerate() {
        let ratio = if k == 0 { f64::NAN } else { d / r.distances[k - 1] };
        if k > 0 && r.distances[k - 1] > PICARD_FLOOR {
            worst_ratio = worst_ratio.max(ratio);
        }
        t.push(vec![(k + 1).into(), d.into(), ratio.into()]);
    }
    let mut s = Table::new("picard_summary", &["quantity", "value"]);
    s.push(vec!["lipschitz_b".into(), lip.0.into()]);
    s.push(vec!["lipschitz_sigma".into(), lip.1.into()]);
    for (e, l) in lc.iter().enumerate() {
        s.push(vec![format!("lipschitz_c{e}").as_str().into(), (*l).into()]);
    }
    s.push(vec!["contraction_bound".into(), r.contraction_bound.into()]);
    s.push(vec!["fixed_point_gap".into(), r.fixed_point_gap.into()]);
    let checks = vec![
        Check::below("contraction constant of the fixed-point map", r.contraction_bound, 1.0),
        Check::below("largest ratio of consecutive Picard distances", worst_ratio, 1.0),
        Check::at_most("distance from the last iterate to the Euler solution", r.fixed_point_gap, PICARD_GAP_TOL),
    ];
    Ok(ExperimentOutput { tables: vec![t, s], checks })
}

/// b, σ and c shifted by a constant; costs unchanged.
struct Shifted {
    base: Arc<dyn Dynamics>,
    delta: f64,
}

impl Shifted {
    fn shift(&self, j: Jet) -> Jet {
        Jet { value: j.value + self.delta, ..j }
    }
}

impl Dynamics for Shifted {
    fn drift(&self, t: f64, x: f64, u: f64) -> Jet {
        self.shift(self.base.drift(t, x, u))
    }
    fn diffusion(&self, t: f64, x: f64, u: f64) -> Jet {
        self.shift(self.base.diffusion(t, x, u))
    }
    fn jump(&self, t: f64, x: f64, u: f64, mark: usize) -> Jet {
        self.shift(self.base.jump(t, x, u, mark))
    }
    fn running_cost(&self, t: f64, x: f64, u: f64) -> Jet {
        self.base.running_cost(t, x, u)
    }
    fn terminal_cost(&self, x: f64) -> Jet {
        self.base.terminal_cost(x)
    }
}

fn run_lp(cfg: &ExperimentConfig, inst: &BenchmarkInstance) -> Result<ExperimentOutput> {
    let problem = &inst.problem;
    let ens = cfg.ensemble();
    let mut t = Table::new("lp_estimate", &["p", "delta", "lhs_mean", "lhs_se", "rhs_mean", "rhs_se", "ratio"]);
    let mut checks = Vec::new();
    for &p in &cfg.powers {
        let mut ratios = Vec::new();
        for &delta in &cfg.lp.magnitudes {
            let mut other = problem.with_model(Arc::new(Shifted { base: problem.model.clone(), delta }));
            other.x0 += delta;
            let r = lp_estimate_check(problem, &other, &inst.reference_control, p, &ens)?;
            let mut row = vec![(p as usize).into(), delta.into()];
            row.extend(est_cells(&r.lhs));
            row.extend(est_cells(&r.rhs));
            row.push(r.ratio.into());
            t.push(row);
            ratios.push(r.ratio);
        }
        let (lo, hi) = ratios.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &r| (a.min(r), b.max(r)));
        let spread = if lo > 0.0 && hi.is_finite() { hi / lo } else { f64::INFINITY };
        checks.push(Check::at_most(format!("spread of E sup|dX|^{p} / rhs across magnitudes"), spread, LP_SPREAD));
    }
    Ok(ExperimentOutput { tables: vec![t], checks })
}
