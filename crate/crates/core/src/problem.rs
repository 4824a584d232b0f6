//! Control problem instances: coefficients with their state derivatives,
//! control sets, control paths, and a sampled audit of the standing
//! regularity assumptions.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::driver::{MarkSpace, TimeGrid};
use crate::error::{invalid, Result};
use crate::rng::SeedSpec;

/// A coefficient value with its first and second derivative in the state.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Jet {
    pub value: f64,
    pub dx: f64,
    pub dxx: f64,
}

impl Jet {
    pub const fn new(value: f64, dx: f64, dxx: f64) -> Self {
        Self { value, dx, dxx }
    }
}

/// Deterministic coefficients b, σ, c, f, g of the controlled system.
pub trait Dynamics: Send + Sync {
    fn drift(&self, t: f64, x: f64, u: f64) -> Jet;
    fn diffusion(&self, t: f64, x: f64, u: f64) -> Jet;
    fn jump(&self, t: f64, x: f64, u: f64, mark: usize) -> Jet;
    fn running_cost(&self, t: f64, x: f64, u: f64) -> Jet;
    fn terminal_cost(&self, x: f64) -> Jet;

    /// Coefficients of the linear-quadratic family, when the model belongs to it.
    fn affine_form(&self) -> Option<AffineForm> {
        None
    }
}

/// Jump coefficient γ·x + η·u + c0 for one mark.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AffineJump {
    pub gamma: f64,
    pub eta: f64,
    pub c0: f64,
}

/// b = a·x + bu·u + b0, σ = c·x + d·u + s0, c_e = γ_e·x + η_e·u + c0_e,
/// f = qf·x² + r·u² + f1·x, g = gt·x² + g1·x.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AffineForm {
    pub a: f64,
    pub bu: f64,
    pub b0: f64,
    pub c: f64,
    pub d: f64,
    pub s0: f64,
    pub jumps: Vec<AffineJump>,
    pub qf: f64,
    pub r: f64,
    pub f1: f64,
    pub gt: f64,
    pub g1: f64,
}

impl Dynamics for AffineForm {
    fn drift(&self, _t: f64, x: f64, u: f64) -> Jet {
        Jet::new(self.a * x + self.bu * u + self.b0, self.a, 0.0)
    }
    fn diffusion(&self, _t: f64, x: f64, u: f64) -> Jet {
        Jet::new(self.c * x + self.d * u + self.s0, self.c, 0.0)
    }
    fn jump(&self, _t: f64, x: f64, u: f64, mark: usize) -> Jet {
        let j = self.jumps[mark];
        Jet::new(j.gamma * x + j.eta * u + j.c0, j.gamma, 0.0)
    }
    fn running_cost(&self, _t: f64, x: f64, u: f64) -> Jet {
        Jet::new(
            self.qf * x * x + self.r * u * u + self.f1 * x,
            2.0 * self.qf * x + self.f1,
            2.0 * self.qf,
        )
    }
    fn terminal_cost(&self, x: f64) -> Jet {
        Jet::new(self.gt * x * x + self.g1 * x, 2.0 * self.gt * x + self.g1, 2.0 * self.gt)
    }
    fn affine_form(&self) -> Option<AffineForm> {
        Some(self.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ControlSet {
    Finite(Vec<f64>),
    /// Closed interval scanned on `points` equally spaced values.
    Interval { lo: f64, hi: f64, points: usize },
}

impl ControlSet {
    pub fn contains(&self, v: f64) -> bool {
        const SLACK: f64 = 1e-12;
        match self {
            ControlSet::Finite(vals) => vals.iter().any(|&w| (w - v).abs() <= SLACK),
            ControlSet::Interval { lo, hi, .. } => v >= lo - SLACK && v <= hi + SLACK,
        }
    }

    /// Evaluation grid used wherever "for every v in U" must be tested.
    pub fn scan_grid(&self) -> Vec<f64> {
        match self {
            ControlSet::Finite(vals) => vals.clone(),
            ControlSet::Interval { lo, hi, points } => {
                let n = (*points).max(2);
                (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
            }
        }
    }
}

/// Feedback rule (t, x) ↦ u.
#[derive(Clone)]
pub enum FeedbackControl {
    Constant(f64),
    /// u = offset − gain·x
    Linear { gain: f64, offset: f64 },
    /// u = below when x < theta, otherwise above.
    Threshold { theta: f64, below: f64, above: f64 },
    Custom(Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for FeedbackControl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeedbackControl::Constant(v) => write!(f, "Constant({v})"),
            FeedbackControl::Linear { gain, offset } => write!(f, "Linear {{ gain: {gain}, offset: {offset} }}"),
            FeedbackControl::Threshold { theta, below, above } => {
                write!(f, "Threshold {{ theta: {theta}, below: {below}, above: {above} }}")
            }
            FeedbackControl::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl FeedbackControl {
    pub fn linear(gain: f64) -> Self {
        FeedbackControl::Linear { gain, offset: 0.0 }
    }

    pub fn eval(&self, t: f64, x: f64) -> f64 {
        match self {
            FeedbackControl::Constant(v) => *v,
            FeedbackControl::Linear { gain, offset } => offset - gain * x,
            FeedbackControl::Threshold { theta, below, above } => {
                if x < *theta {
                    *below
                } else {
                    *above
                }
            }
            FeedbackControl::Custom(rule) => rule(t, x),
        }
    }
}

/// Control values on a path's grid.
///
/// * `values[i]` is u on the step (t_i, t_{i+1}]; it enters b, σ and f.
/// * `jump_values[i]` is u at t_i as seen by the jump coefficient when t_i is
///   a jump node (the progressive value on the jump graph).
/// * `compensator_values[i]` is the predictable version of the jump-graph
///   control on (t_i, t_{i+1}]; it enters the compensator of the Ñ integral.
///
/// For a feedback control the three coincide except at jump nodes, where
/// `jump_values` uses the pre-jump state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPath {
    pub values: Vec<f64>,
    pub jump_values: Vec<f64>,
    pub compensator_values: Vec<f64>,
}

impl ControlPath {
    pub fn constant(value: f64, len: usize) -> Self {
        Self { values: vec![value; len], jump_values: vec![value; len], compensator_values: vec![value; len] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check(&self, grid: &TimeGrid, set: &ControlSet) -> Result<()> {
        if self.values.len() != grid.len()
            || self.jump_values.len() != grid.len()
            || self.compensator_values.len() != grid.len()
        {
            return invalid("control path length does not match grid");
        }
        for v in self.values.iter().chain(&self.jump_values).chain(&self.compensator_values) {
            if !set.contains(*v) {
                return invalid(format!("control value {v} outside the control set"));
            }
        }
        Ok(())
    }
}

/// A fully specified control problem on [0, horizon].
#[derive(Clone)]
pub struct ProblemDef {
    pub name: String,
    pub x0: f64,
    pub horizon: f64,
    pub marks: MarkSpace,
    pub control_set: ControlSet,
    pub model: Arc<dyn Dynamics>,
}

impl fmt::Debug for ProblemDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemDef")
            .field("name", &self.name)
            .field("x0", &self.x0)
            .field("horizon", &self.horizon)
            .field("marks", &self.marks)
            .field("control_set", &self.control_set)
            .finish_non_exhaustive()
    }
}

impl ProblemDef {
    pub fn new(
        name: impl Into<String>,
        x0: f64,
        horizon: f64,
        marks: MarkSpace,
        control_set: ControlSet,
        model: Arc<dyn Dynamics>,
    ) -> Self {
        Self { name: name.into(), x0, horizon, marks, control_set, model }
    }

    /// Same problem with a different model (used for perturbation studies).
    pub fn with_model(&self, model: Arc<dyn Dynamics>) -> Self {
        Self { model, ..self.clone() }
    }
}

/// Builds the control path of a feedback rule along an already computed state.
///
/// `post[i]` is X_{t_i}, `left[i]` is X_{t_i−}.
pub fn realize_control(
    rule: &FeedbackControl,
    post: &[f64],
    left: &[f64],
    grid: &TimeGrid,
    set: &ControlSet,
) -> Result<ControlPath> {
    if post.len() != grid.len() || left.len() != grid.len() {
        return invalid("state length does not match grid");
    }
    let mut path = ControlPath {
        values: Vec::with_capacity(grid.len()),
        jump_values: Vec::with_capacity(grid.len()),
        compensator_values: Vec::with_capacity(grid.len()),
    };
    for i in 0..grid.len() {
        let t = grid.time(i);
        let (a, j) = feedback_pair(rule, t, post[i], left[i], set)?;
        path.values.push(a);
        path.compensator_values.push(a);
        path.jump_values.push(j);
    }
    Ok(path)
}

pub(crate) fn feedback_pair(rule: &FeedbackControl, t: f64, post: f64, left: f64, set: &ControlSet) -> Result<(f64, f64)> {
    let a = rule.eval(t, post);
    let j = if left == post { a } else { rule.eval(t, left) };
    for v in [a, j] {
        if !set.contains(v) {
            return invalid(format!("feedback produced {v} outside the control set at t = {t}"));
        }
    }
    Ok((a, j))
}

/// Sampling lattice for [`validate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub seed: u64,
    pub points: usize,
    /// States are drawn from [−radius, radius]; bounds are compared against a
    /// lattice of radius `growth_factor·radius`.
    pub radius: f64,
    pub growth_factor: f64,
}

impl Default for LatticeSpec {
    fn default() -> Self {
        Self { seed: 17, points: 400, radius: 5.0, growth_factor: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clause {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub growth_constant: f64,
    /// Largest |b_x|, |b_xx|, |σ_x|, |σ_xx|, |c_x|, |c_xx|, |f_xx|, |g_xx| on the lattice.
    pub max_derivatives: Vec<(String, f64)>,
    pub worst_fd_discrepancy: f64,
    pub clauses: Vec<Clause>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.clauses.iter().all(|c| c.pass)
    }

    pub fn clause(&self, name: &str) -> Option<&Clause> {
        self.clauses.iter().find(|c| c.name == name)
    }

    /// Largest first-derivative bound among b, σ, c (a Lipschitz constant in x).
    pub fn max_derivative(&self, name: &str) -> f64 {
        self.max_derivatives.iter().find(|(n, _)| n == name).map(|(_, v)| *v).unwrap_or(f64::NAN)
    }
}

struct Sample {
    t: f64,
    x: f64,
    u: f64,
}

/// Controls are drawn from the scan grid restricted to |u| ≤ radius, so that
/// enlarging the lattice enlarges x and u together.
fn lattice(spec: &LatticeSpec, radius: f64, horizon: f64, grid: &[f64], stream: u64) -> Vec<Sample> {
    let mut rng = SeedSpec::new(spec.seed, stream).rng();
    let mut controls: Vec<f64> = grid.iter().copied().filter(|u| u.abs() <= radius).collect();
    if controls.is_empty() {
        controls.push(grid.iter().copied().fold(f64::INFINITY, |a, u| if u.abs() < a.abs() { u } else { a }));
    }
    let mut out = Vec::with_capacity(spec.points + 1);
    out.push(Sample { t: 0.0, x: 0.0, u: controls[0] });
    for _ in 0..spec.points {
        let t = rng.random::<f64>() * horizon;
        let x = (2.0 * rng.random::<f64>() - 1.0) * radius;
        let u = controls[rng.random_range(0..controls.len())];
        out.push(Sample { t, x, u });
    }
    out
}

type Coef<'a> = Box<dyn Fn(&Sample) -> Jet + 'a>;

/// Audits the regularity assumptions by sampling. Non-finite values fail the
/// relevant clause; they are not raised as errors.
pub fn validate(problem: &ProblemDef, spec: &LatticeSpec) -> ValidationReport {
    let m = problem.model.as_ref();
    let controls = problem.control_set.scan_grid();
    let near = lattice(spec, spec.radius, problem.horizon, &controls, 0);
    let far = lattice(spec, spec.radius * spec.growth_factor, problem.horizon, &controls, 1);

    let mut coefs: Vec<(String, Coef)> = vec![
        ("b".into(), Box::new(|s: &Sample| m.drift(s.t, s.x, s.u))),
        ("sigma".into(), Box::new(|s: &Sample| m.diffusion(s.t, s.x, s.u))),
    ];
    for e in 0..problem.marks.len() {
        coefs.push((format!("c[{e}]"), Box::new(move |s: &Sample| m.jump(s.t, s.x, s.u, e))));
    }
    let f: Coef = Box::new(|s: &Sample| m.running_cost(s.t, s.x, s.u));
    let g: Coef = Box::new(|s: &Sample| m.terminal_cost(s.x));

    let mut clauses = Vec::new();
    let mut finite = true;
    let mut check_finite = |jet: Jet| {
        if !(jet.value.is_finite() && jet.dx.is_finite() && jet.dxx.is_finite()) {
            finite = false;
        }
        jet
    };

    // Linear growth of b, σ, c.
    let growth = |pts: &[Sample], c: &Coef, check: &mut dyn FnMut(Jet) -> Jet| {
        pts.iter()
            .map(|s| check(c(s)).value.abs() / (1.0 + s.x.abs() + s.u.abs()))
            .fold(0.0, f64::max)
    };
    let mut growth_near: f64 = 0.0;
    let mut growth_far: f64 = 0.0;
    for (_, c) in &coefs {
        growth_near = growth_near.max(growth(&near, c, &mut check_finite));
        growth_far = growth_far.max(growth(&far, c, &mut check_finite));
    }
    clauses.push(bounded_clause("linear growth of (b, sigma, c)", growth_near, growth_far));

    // Bounded first and second derivatives of b, σ, c; bounded f_xx, g_xx.
    let mut max_derivatives = Vec::new();
    let sup = |pts: &[Sample], c: &Coef, pick: fn(&Jet) -> f64, check: &mut dyn FnMut(Jet) -> Jet| {
        pts.iter().map(|s| pick(&check(c(s))).abs()).fold(0.0, f64::max)
    };
    for (name, c) in &coefs {
        for (suffix, pick) in [("_x", (|j: &Jet| j.dx) as fn(&Jet) -> f64), ("_xx", |j: &Jet| j.dxx)] {
            let a = sup(&near, c, pick, &mut check_finite);
            let b = sup(&far, c, pick, &mut check_finite);
            let label = format!("{name}{suffix}");
            clauses.push(bounded_clause(&format!("bounded {label}"), a, b));
            max_derivatives.push((label, a.max(b)));
        }
    }
    for (name, c) in [("f", &f), ("g", &g)] {
        let a = sup(&near, c, |j| j.dxx, &mut check_finite);
        let b = sup(&far, c, |j| j.dxx, &mut check_finite);
        clauses.push(bounded_clause(&format!("bounded {name}_xx"), a, b));
        max_derivatives.push((format!("{name}_xx"), a.max(b)));
    }
    // Growth of f_x, f, g_x, g.
    let ratio = |pts: &[Sample], c: &Coef, quad: bool, d: bool, check: &mut dyn FnMut(Jet) -> Jet| {
        pts.iter()
            .map(|s| {
                let j = check(c(s));
                let v = if d { j.dx } else { j.value };
                let scale = if quad { 1.0 + s.x * s.x + s.u * s.u } else { 1.0 + s.x.abs() + s.u.abs() };
                v.abs() / scale
            })
            .fold(0.0, f64::max)
    };
    for (label, c, quad, d) in [
        ("growth of f_x", &f, false, true),
        ("quadratic growth of f", &f, true, false),
        ("growth of g_x", &g, false, true),
        ("quadratic growth of g", &g, true, false),
    ] {
        let a = ratio(&near, c, quad, d, &mut check_finite);
        let b = ratio(&far, c, quad, d, &mut check_finite);
        clauses.push(bounded_clause(label, a, b));
    }

    // Supplied derivatives against central differences.
    let mut worst: f64 = 0.0;
    let mut fd_ok = true;
    let mut worst_at = String::new();
    let all: Vec<(&str, &Coef)> = coefs.iter().map(|(n, c)| (n.as_str(), c)).chain([("f", &f), ("g", &g)]).collect();
    for (name, c) in all {
        for s in &near {
            let h = 1e-4 * s.x.abs().max(1.0);
            let plus = c(&Sample { x: s.x + h, ..*s });
            let minus = c(&Sample { x: s.x - h, ..*s });
            let here = c(s);
            let fd_dx = (plus.value - minus.value) / (2.0 * h);
            let fd_dxx = (plus.dx - minus.dx) / (2.0 * h);
            for (supplied, fd, which) in [(here.dx, fd_dx, "_x"), (here.dxx, fd_dxx, "_xx")] {
                let err = (supplied - fd).abs();
                let tol = 1e-6f64.max(1e-4 * supplied.abs());
                if !(err <= tol) {
                    fd_ok = false;
                }
                if err / tol > worst || err.is_nan() {
                    worst = if err.is_nan() { f64::INFINITY } else { err / tol };
                    worst_at = format!("{name}{which} at (t={:.3}, x={:.3}, u={:.3})", s.t, s.x, s.u);
                }
            }
        }
    }
    clauses.push(Clause {
        name: "derivative consistency".into(),
        pass: fd_ok,
        detail: format!("worst discrepancy / tolerance = {worst:.3e} ({worst_at})"),
    });
    clauses.push(Clause {
        name: "finite coefficients".into(),
        pass: finite,
        detail: if finite { "all finite".into() } else { "non-finite value on lattice".into() },
    });

    ValidationReport {
        growth_constant: growth_near.max(growth_far),
        max_derivatives,
        worst_fd_discrepancy: worst,
        clauses,
    }
}

/// A quantity is treated as bounded when enlarging the lattice does not make
/// its supremum grow by more than half.
fn bounded_clause(name: &str, near: f64, far: f64) -> Clause {
    let pass = near.is_finite() && far.is_finite() && far <= 1.5 * near + 1e-9;
    Clause { name: name.into(), pass, detail: format!("sup near = {near:.4e}, sup far = {far:.4e}") }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_problem() -> ProblemDef {
        let model = AffineForm {
            a: 1.0,
            bu: 1.0,
            s0: 1.0,
            jumps: vec![AffineJump { c0: 1.0, ..Default::default() }],
            qf: 1.0,
            r: 1.0,
            gt: 1.0,
            ..Default::default()
        };
        ProblemDef::new(
            "linear",
            1.0,
            1.0,
            MarkSpace::single(1.0).unwrap(),
            ControlSet::Interval { lo: -1.0, hi: 1.0, points: 21 },
            Arc::new(model),
        )
    }

    struct Quadratic;
    impl Dynamics for Quadratic {
        fn drift(&self, _t: f64, x: f64, _u: f64) -> Jet {
            Jet::new(x * x, 2.0 * x, 2.0)
        }
        fn diffusion(&self, _t: f64, _x: f64, _u: f64) -> Jet {
            Jet::new(1.0, 0.0, 0.0)
        }
        fn jump(&self, _t: f64, _x: f64, _u: f64, _e: usize) -> Jet {
            Jet::new(0.0, 0.0, 0.0)
        }
        fn running_cost(&self, _t: f64, _x: f64, _u: f64) -> Jet {
            Jet::default()
        }
        fn terminal_cost(&self, _x: f64) -> Jet {
            Jet::default()
        }
    }

    struct WrongDerivative(AffineForm);
    impl Dynamics for WrongDerivative {
        fn drift(&self, t: f64, x: f64, u: f64) -> Jet {
            let j = self.0.drift(t, x, u);
            Jet { dx: j.dx + 1e-2, ..j }
        }
        fn diffusion(&self, t: f64, x: f64, u: f64) -> Jet {
            self.0.diffusion(t, x, u)
        }
        fn jump(&self, t: f64, x: f64, u: f64, e: usize) -> Jet {
            self.0.jump(t, x, u, e)
        }
        fn running_cost(&self, t: f64, x: f64, u: f64) -> Jet {
            self.0.running_cost(t, x, u)
        }
        fn terminal_cost(&self, x: f64) -> Jet {
            self.0.terminal_cost(x)
        }
    }

    #[test]
    fn linear_problem_passes() {
        let report = validate(&linear_problem(), &LatticeSpec::default());
        assert!(report.passed(), "{:#?}", report.clauses);
        // |x + u| + |1| terms: growth constant is at most 1 for b, σ = 1 gives 1 at the origin.
        assert!(report.growth_constant <= 1.0 + 1e-12);
        assert!(report.growth_constant >= 0.9);
    }

    #[test]
    fn quadratic_drift_fails_bounded_derivative() {
        let p = linear_problem().with_model(Arc::new(Quadratic));
        let report = validate(&p, &LatticeSpec::default());
        assert!(!report.clause("bounded b_x").unwrap().pass);
        assert!(!report.passed());
    }

    #[test]
    fn wrong_derivative_detected() {
        let base = linear_problem();
        let form = base.model.affine_form().unwrap();
        let p = base.with_model(Arc::new(WrongDerivative(form)));
        let report = validate(&p, &LatticeSpec::default());
        assert!(!report.clause("derivative consistency").unwrap().pass);
    }

    #[test]
    fn validate_is_deterministic() {
        let a = validate(&linear_problem(), &LatticeSpec::default());
        let b = validate(&linear_problem(), &LatticeSpec::default());
        assert_eq!(a, b);
    }

    #[test]
    fn realize_constant_and_identity_rules() {
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let state = vec![0.1, 0.2, 0.3, 0.4, 0.5];
        let set = ControlSet::Interval { lo: -1.0, hi: 1.0, points: 3 };
        let c = realize_control(&FeedbackControl::Constant(0.5), &state, &state, &grid, &set).unwrap();
        assert!(c.values.iter().all(|&v| v == 0.5));
        let id = FeedbackControl::Custom(Arc::new(|_, x| x));
        let c = realize_control(&id, &state, &state, &grid, &set).unwrap();
        assert_eq!(c.values, state);
    }

    #[test]
    fn threshold_rule_stays_in_two_point_set() {
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let state = vec![-0.3, 0.2, -0.1, 0.4, 0.0];
        let set = ControlSet::Finite(vec![-1.0, 1.0]);
        let rule = FeedbackControl::Threshold { theta: 0.0, below: 1.0, above: -1.0 };
        let c = realize_control(&rule, &state, &state, &grid, &set).unwrap();
        assert!(c.values.iter().all(|v| *v == 1.0 || *v == -1.0));
    }

    #[test]
    fn out_of_set_rule_rejected() {
        let grid = TimeGrid::uniform(1.0, 2).unwrap();
        let state = vec![0.0, 5.0, 0.0];
        let set = ControlSet::Interval { lo: -1.0, hi: 1.0, points: 3 };
        let id = FeedbackControl::Custom(Arc::new(|_, x| x));
        assert!(realize_control(&id, &state, &state, &grid, &set).is_err());
    }

    #[test]
    fn realize_is_adapted() {
        // Changing the state after t_i leaves values up to i unchanged.
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let set = ControlSet::Interval { lo: -10.0, hi: 10.0, points: 3 };
        let rule = FeedbackControl::linear(2.0);
        let a = vec![0.1, 0.2, 0.3, 0.4, 0.5];
        let mut b = a.clone();
        b[3] = -4.0;
        b[4] = 3.0;
        let ca = realize_control(&rule, &a, &a, &grid, &set).unwrap();
        let cb = realize_control(&rule, &b, &b, &grid, &set).unwrap();
        assert_eq!(ca.values[..3], cb.values[..3]);
    }
}
