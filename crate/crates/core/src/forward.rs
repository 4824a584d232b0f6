//! Euler scheme with exact jumps for the controlled state equation, the
//! cost functional, Monte Carlo ensembles, and the fixed-point and L^p
//! stability harnesses.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::driver::{sample_noise, NoisePath, TimeGrid};
use crate::error::{invalid, Error, Result};
use crate::problem::{feedback_pair, ControlPath, FeedbackControl, ProblemDef};
use crate::rng::SeedSpec;
use crate::stats::{mean, Estimate};

/// States beyond this magnitude are reported as divergence.
pub const DIVERGENCE_BOUND: f64 = 1e12;

/// X at every node. `left_limits[i]` is X_{t_i−}; it equals `post_values[i]`
/// at nodes that carry no jump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatePath {
    pub post_values: Vec<f64>,
    pub left_limits: Vec<f64>,
}

impl StatePath {
    pub fn constant(x: f64, len: usize) -> Self {
        Self { post_values: vec![x; len], left_limits: vec![x; len] }
    }

    pub fn terminal(&self) -> f64 {
        *self.post_values.last().expect("non-empty path")
    }

    pub fn len(&self) -> usize {
        self.post_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.post_values.is_empty()
    }

    /// max_i |X_i − Y_i| over post values and left limits.
    pub fn sup_distance(&self, other: &StatePath) -> f64 {
        sup_abs_diff(&self.post_values, &other.post_values).max(sup_abs_diff(&self.left_limits, &other.left_limits))
    }
}

pub(crate) fn sup_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub(crate) fn guard(x: f64, step: usize, time: f64) -> Result<f64> {
    if x.is_finite() && x.abs() <= DIVERGENCE_BOUND {
        Ok(x)
    } else {
        Err(Error::Divergence { step, time, value: x })
    }
}

/// Drift of the continuous step leaving node i: b − Σ_e λ_e c(·, u_comp, e).
fn compensated_drift(problem: &ProblemDef, t: f64, x: f64, u: f64, u_comp: f64) -> f64 {
    let m = problem.model.as_ref();
    let mut drift = m.drift(t, x, u).value;
    for (e, w) in problem.marks.weights().iter().enumerate() {
        drift -= w * m.jump(t, x, u_comp, e).value;
    }
    drift
}

/// Where the solver gets its control values from.
trait ControlSource {
    /// (u_i, predictable jump control on the step leaving node i).
    fn step(&mut self, i: usize, post: f64, left: f64) -> Result<(f64, f64)>;
    /// Control charged to the jump at node i, given X_{t_i−}.
    fn jump(&mut self, i: usize, left: f64) -> Result<f64>;
}

impl ControlSource for &ControlPath {
    fn step(&mut self, i: usize, _post: f64, _left: f64) -> Result<(f64, f64)> {
        Ok((self.values[i], self.compensator_values[i]))
    }
    fn jump(&mut self, i: usize, _left: f64) -> Result<f64> {
        Ok(self.jump_values[i])
    }
}

struct Recorder<'a> {
    rule: &'a FeedbackControl,
    problem: &'a ProblemDef,
    grid: &'a TimeGrid,
    values: Vec<f64>,
    jump_values: Vec<f64>,
}

impl ControlSource for Recorder<'_> {
    fn step(&mut self, i: usize, post: f64, left: f64) -> Result<(f64, f64)> {
        let (a, j) = feedback_pair(self.rule, self.grid.time(i), post, left, &self.problem.control_set)?;
        self.values[i] = a;
        self.jump_values[i] = j;
        Ok((a, a))
    }
    fn jump(&mut self, i: usize, left: f64) -> Result<f64> {
        let (_, j) = feedback_pair(self.rule, self.grid.time(i), left, left, &self.problem.control_set)?;
        self.jump_values[i] = j;
        Ok(j)
    }
}

fn integrate(problem: &ProblemDef, noise: &NoisePath, control: &mut impl ControlSource) -> Result<StatePath> {
    let grid = &noise.grid;
    let n = grid.len();
    if noise.brownian_increments.len() + 1 != n {
        return invalid("noise increments do not match grid");
    }
    let m = problem.model.as_ref();
    let mut post = Vec::with_capacity(n);
    let mut left = Vec::with_capacity(n);
    let mut x = problem.x0;
    post.push(x);
    left.push(x);
    for i in 0..n - 1 {
        let t = grid.time(i);
        let (u, u_comp) = control.step(i, x, left[i])?;
        let xm = x + compensated_drift(problem, t, x, u, u_comp) * grid.dt(i) + m.diffusion(t, x, u).value * noise.brownian_increments[i];
        let t1 = grid.time(i + 1);
        let xm = guard(xm, i + 1, t1)?;
        let xn = match grid.mark_at(i + 1) {
            Some(e) => {
                let uj = control.jump(i + 1, xm)?;
                guard(xm + m.jump(t1, xm, uj, e).value, i + 1, t1)?
            }
            None => xm,
        };
        left.push(xm);
        post.push(xn);
        x = xn;
    }
    Ok(StatePath { post_values: post, left_limits: left })
}

/// Euler solve for a given control path on one noise realization.
pub fn solve_forward(problem: &ProblemDef, control: &ControlPath, noise: &NoisePath) -> Result<StatePath> {
    if control.len() != noise.grid.len() {
        return invalid("control path length does not match grid");
    }
    integrate(problem, noise, &mut &*control)
}

/// Euler solve where the control is generated online from a feedback rule.
/// The rule sees X_{t_i} for the step leaving t_i and X_{t_i−} for the jump at t_i.
pub fn solve_with_feedback(
    problem: &ProblemDef,
    rule: &FeedbackControl,
    noise: &NoisePath,
) -> Result<(StatePath, ControlPath)> {
    let grid = &noise.grid;
    let n = grid.len();
    let mut rec = Recorder { rule, problem, grid, values: vec![0.0; n], jump_values: vec![0.0; n] };
    let state = integrate(problem, noise, &mut rec)?;
    // The last node never starts a step; fill it for a complete path.
    let last = n - 1;
    rec.step(last, state.post_values[last], state.left_limits[last])?;
    let Recorder { values, jump_values, .. } = rec;
    let control = ControlPath { compensator_values: values.clone(), values, jump_values };
    Ok((state, control))
}

/// Pathwise cost split into its two parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostSample {
    pub running: f64,
    pub terminal: f64,
    pub total: f64,
}

/// Left-Riemann running cost plus terminal cost.
pub fn cost(problem: &ProblemDef, state: &StatePath, control: &ControlPath, grid: &TimeGrid) -> CostSample {
    let m = problem.model.as_ref();
    let running = (0..grid.intervals())
        .map(|i| m.running_cost(grid.time(i), state.post_values[i], control.values[i]).value * grid.dt(i))
        .sum::<f64>();
    let terminal = m.terminal_cost(state.terminal()).value;
    CostSample { running, terminal, total: running + terminal }
}

/// A seeded collection of noise paths on a common base mesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ensemble {
    pub master_seed: u64,
    pub paths: usize,
    pub base_steps: usize,
}

impl Ensemble {
    pub fn new(master_seed: u64, paths: usize, base_steps: usize) -> Self {
        Self { master_seed, paths, base_steps }
    }

    pub fn noise(&self, problem: &ProblemDef, path: usize) -> Result<NoisePath> {
        sample_noise(SeedSpec::new(self.master_seed, path as u64), &problem.marks, problem.horizon, self.base_steps)
    }

    /// Applies `f` to every path in parallel; output order is path order.
    pub fn map<T, F>(&self, problem: &ProblemDef, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize, &NoisePath) -> Result<T> + Sync,
    {
        (0..self.paths)
            .into_par_iter()
            .map(|k| {
                let noise = self.noise(problem, k)?;
                f(k, &noise)
            })
            .collect()
    }

    pub fn dt(&self, problem: &ProblemDef) -> f64 {
        problem.horizon / self.base_steps as f64
    }
}

/// J(u) for a feedback rule.
pub fn estimate_cost(problem: &ProblemDef, rule: &FeedbackControl, ensemble: &Ensemble) -> Result<Estimate> {
    let costs = ensemble.map(problem, |_, noise| {
        let (state, control) = solve_with_feedback(problem, rule, noise)?;
        Ok(cost(problem, &state, &control, &noise.grid).total)
    })?;
    Ok(Estimate::from_samples(&costs))
}

/// Iterates of the fixed-point map and the sup distances between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardTrace {
    pub iterates: Vec<StatePath>,
    /// `distances[k]` = sup |iterate_{k+1} − iterate_k|.
    pub distances: Vec<f64>,
}

/// One application of the fixed-point map: all three integrals re-evaluated
/// with coefficients frozen along `z`.
pub fn picard_step(problem: &ProblemDef, control: &ControlPath, noise: &NoisePath, z: &StatePath) -> Result<StatePath> {
    let grid = &noise.grid;
    let m = problem.model.as_ref();
    let n = grid.len();
    let mut post = Vec::with_capacity(n);
    let mut left = Vec::with_capacity(n);
    let mut x = problem.x0;
    post.push(x);
    left.push(x);
    for i in 0..n - 1 {
        let t = grid.time(i);
        let zi = z.post_values[i];
        let u = control.values[i];
        let xm = x
            + compensated_drift(problem, t, zi, u, control.compensator_values[i]) * grid.dt(i)
            + m.diffusion(t, zi, u).value * noise.brownian_increments[i];
        let xm = guard(xm, i + 1, grid.time(i + 1))?;
        let xn = match grid.mark_at(i + 1) {
            Some(e) => {
                let t1 = grid.time(i + 1);
                guard(xm + m.jump(t1, z.left_limits[i + 1], control.jump_values[i + 1], e).value, i + 1, t1)?
            }
            None => xm,
        };
        left.push(xm);
        post.push(xn);
        x = xn;
    }
    Ok(StatePath { post_values: post, left_limits: left })
}

/// Picard iteration from the constant path x0.
pub fn picard_iterate(problem: &ProblemDef, control: &ControlPath, noise: &NoisePath, n_iters: usize) -> Result<PicardTrace> {
    if n_iters == 0 {
        return invalid("n_iters must be at least 1");
    }
    if control.len() != noise.grid.len() {
        return invalid("control path length does not match grid");
    }
    let mut iterates = vec![StatePath::constant(problem.x0, noise.grid.len())];
    let mut distances = Vec::with_capacity(n_iters);
    for _ in 0..n_iters {
        let next = picard_step(problem, control, noise, iterates.last().unwrap())?;
        distances.push(next.sup_distance(iterates.last().unwrap()));
        iterates.push(next);
    }
    Ok(PicardTrace { iterates, distances })
}

/// Contraction in the S² norm E[sup|·|²]^{1/2}, estimated over an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardReport {
    /// S² distance between consecutive iterates.
    pub distances: Vec<f64>,
    pub ratios: Vec<f64>,
    /// 3(L_b²T² + 4(L_σ² + Σλ_e L_c,e²)T): a contraction factor for the squared S² norm.
    pub contraction_bound: f64,
    /// S² distance between the last iterate and the Euler solution.
    pub fixed_point_gap: f64,
}

/// Explicit contraction constant of the fixed-point map for Lipschitz constants
/// `lb`, `ls` and per-mark `lc`.
pub fn contraction_bound(horizon: f64, lb: f64, ls: f64, lc: &[f64], weights: &[f64]) -> f64 {
    let jump: f64 = lc.iter().zip(weights).map(|(l, w)| w * l * l).sum();
    3.0 * (lb * lb * horizon * horizon + 4.0 * (ls * ls + jump) * horizon)
}

pub fn picard_ensemble(
    problem: &ProblemDef,
    control: &FeedbackControl,
    ensemble: &Ensemble,
    n_iters: usize,
    lipschitz: (f64, f64, &[f64]),
) -> Result<PicardReport> {
    let per_path = ensemble.map(problem, |_, noise| {
        // The control is realized once along the Euler solution and then frozen.
        let (state, path) = solve_with_feedback(problem, control, noise)?;
        let trace = picard_iterate(problem, &path, noise, n_iters)?;
        let gap = trace.iterates.last().unwrap().sup_distance(&state);
        Ok((trace.distances, gap))
    })?;
    let distances: Vec<f64> = (0..n_iters)
        .map(|k| mean(&per_path.iter().map(|(d, _)| d[k] * d[k]).collect::<Vec<_>>()).sqrt())
        .collect();
    let ratios = distances.windows(2).map(|w| w[1] / w[0]).collect();
    let fixed_point_gap = mean(&per_path.iter().map(|(_, g)| g * g).collect::<Vec<_>>()).sqrt();
    let (lb, ls, lc) = lipschitz;
    Ok(PicardReport {
        distances,
        ratios,
        contraction_bound: contraction_bound(problem.horizon, lb, ls, lc, problem.marks.weights()),
        fixed_point_gap,
    })
}

/// Both sides of the L^p stability estimate (up to its constant).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LpReport {
    pub p: u32,
    pub lhs: Estimate,
    pub rhs: Estimate,
    pub ratio: f64,
}

/// E[sup|X¹−X²|^p] against |x0¹−x0²|^p + E(∫|Δb|dt)^p + E(∫|Δσ|²dt)^{p/2} + E(∫∫|Δc|²N)^{p/2},
/// with the differences evaluated along X¹. Both problems are driven by the
/// same feedback rule on common noise.
pub fn lp_estimate_check(
    problem1: &ProblemDef,
    problem2: &ProblemDef,
    rule: &FeedbackControl,
    p: u32,
    ensemble: &Ensemble,
) -> Result<LpReport> {
    if p < 2 || p % 2 != 0 {
        return invalid(format!("p must be an even integer ≥ 2, got {p}"));
    }
    if problem1.marks != problem2.marks || problem1.horizon != problem2.horizon {
        return invalid("problems must share horizon and mark space");
    }
    let pf = p as f64;
    let m1 = problem1.model.as_ref();
    let m2 = problem2.model.as_ref();
    let pairs = ensemble.map(problem1, |_, noise| {
        let (x1, c1) = solve_with_feedback(problem1, rule, noise)?;
        let (x2, _) = solve_with_feedback(problem2, rule, noise)?;
        let grid = &noise.grid;
        let lhs = x1.sup_distance(&x2).powf(pf);
        let mut db = 0.0;
        let mut ds = 0.0;
        for i in 0..grid.intervals() {
            let (t, x, u) = (grid.time(i), x1.post_values[i], c1.values[i]);
            db += (m1.drift(t, x, u).value - m2.drift(t, x, u).value).abs() * grid.dt(i);
            let s = m1.diffusion(t, x, u).value - m2.diffusion(t, x, u).value;
            ds += s * s * grid.dt(i);
        }
        let mut dc = 0.0;
        for j in &noise.jump_events {
            let (t, x, u) = (j.time, x1.left_limits[j.index], c1.jump_values[j.index]);
            let d = m1.jump(t, x, u, j.mark).value - m2.jump(t, x, u, j.mark).value;
            dc += d * d;
        }
        let rhs = (problem1.x0 - problem2.x0).abs().powf(pf) + db.powf(pf) + ds.powf(pf / 2.0) + dc.powf(pf / 2.0);
        Ok((lhs, rhs))
    })?;
    let lhs = Estimate::from_samples(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let rhs = Estimate::from_samples(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let ratio = if lhs.mean == 0.0 { 0.0 } else { lhs.mean / rhs.mean };
    Ok(LpReport { p, lhs, rhs, ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::{refine_grid, uniform_mesh, MarkSpace};
    use crate::problem::{AffineForm, AffineJump, ControlSet};
    use std::sync::Arc;

    fn problem(form: AffineForm, x0: f64, marks: MarkSpace) -> ProblemDef {
        ProblemDef::new("t", x0, 1.0, marks, ControlSet::Interval { lo: -1.0, hi: 1.0, points: 5 }, Arc::new(form))
    }

    fn jump_only(rate: f64) -> ProblemDef {
        let form = AffineForm { jumps: vec![AffineJump { c0: 1.0, ..Default::default() }], ..Default::default() };
        problem(form, 0.0, MarkSpace::single(rate).unwrap())
    }

    #[test]
    fn zero_coefficients_keep_initial_state() {
        let p = problem(AffineForm { jumps: vec![AffineJump::default()], ..Default::default() }, 0.7, MarkSpace::single(2.0).unwrap());
        let noise = Ensemble::new(1, 1, 32).noise(&p, 0).unwrap();
        let x = solve_forward(&p, &ControlPath::constant(0.0, noise.grid.len()), &noise).unwrap();
        assert!(x.post_values.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn counting_minus_compensator() {
        let p = jump_only(3.0);
        let noise = Ensemble::new(5, 1, 64).noise(&p, 0).unwrap();
        let x = solve_forward(&p, &ControlPath::constant(0.0, noise.grid.len()), &noise).unwrap();
        for (i, &t) in noise.grid.times().iter().enumerate() {
            let n_t = noise.jump_events.iter().filter(|j| j.time <= t).count() as f64;
            assert!((x.post_values[i] - (n_t - 3.0 * t)).abs() < 1e-12);
        }
        for j in &noise.jump_events {
            assert!((x.post_values[j.index] - x.left_limits[j.index] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn exponential_growth_first_order() {
        let p = problem(AffineForm { a: 1.0, ..Default::default() }, 1.0, MarkSpace::empty());
        let err = |steps| {
            let noise = Ensemble::new(0, 1, steps).noise(&p, 0).unwrap();
            let x = solve_forward(&p, &ControlPath::constant(0.0, steps + 1), &noise).unwrap();
            (x.terminal() - 1f64.exp()).abs()
        };
        let (e1, e2) = (err(64), err(128));
        assert!(e1 > e2);
        assert!((e1 / e2 - 2.0).abs() < 0.1, "ratio {}", e1 / e2);
    }

    #[test]
    fn cost_examples() {
        let p = problem(AffineForm { gt: 1.0, ..Default::default() }, 2.0, MarkSpace::empty());
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let x = StatePath::constant(2.0, 5);
        let c = cost(&p, &x, &ControlPath::constant(0.0, 5), &grid);
        assert_eq!(c.total, 4.0);
        let p = problem(AffineForm { f1: 1.0, ..Default::default() }, 1.0, MarkSpace::empty());
        let c = cost(&p, &StatePath::constant(1.0, 5), &ControlPath::constant(0.0, 5), &grid);
        assert!((c.total - 1.0).abs() < 1e-15);
        assert_eq!(c.total, c.running + c.terminal);
    }

    #[test]
    fn deterministic_quadratic_cost() {
        // dX = -X dt, f = X², g = 0: ∫ e^{-2t} dt on [0, 1] = (1 − e^{-2})/2.
        let p = problem(AffineForm { a: -1.0, qf: 1.0, ..Default::default() }, 1.0, MarkSpace::empty());
        let noise = Ensemble::new(0, 1, 4096).noise(&p, 0).unwrap();
        let (x, u) = solve_with_feedback(&p, &FeedbackControl::Constant(0.0), &noise).unwrap();
        let c = cost(&p, &x, &u, &noise.grid);
        assert!((c.total - (1.0 - (-2f64).exp()) / 2.0).abs() < 1e-3);
    }

    #[test]
    fn feedback_and_realized_path_agree() {
        let form = AffineForm { a: 0.3, bu: 1.0, c: 0.2, d: 0.5, jumps: vec![AffineJump { gamma: 0.3, eta: 0.5, c0: 0.0 }], ..Default::default() };
        let mut p = problem(form, 1.0, MarkSpace::single(4.0).unwrap());
        p.control_set = ControlSet::Interval { lo: -50.0, hi: 50.0, points: 3 };
        let noise = Ensemble::new(9, 1, 64).noise(&p, 0).unwrap();
        let rule = FeedbackControl::linear(0.8);
        let (x, u) = solve_with_feedback(&p, &rule, &noise).unwrap();
        let again = solve_forward(&p, &u, &noise).unwrap();
        assert_eq!(x, again);
        let realized = crate::problem::realize_control(&rule, &x.post_values, &x.left_limits, &noise.grid, &p.control_set).unwrap();
        assert_eq!(realized, u);
    }

    #[test]
    fn divergence_reports_step() {
        let p = problem(AffineForm { a: 1e4, ..Default::default() }, 1.0, MarkSpace::empty());
        let noise = Ensemble::new(0, 1, 8).noise(&p, 0).unwrap();
        match solve_forward(&p, &ControlPath::constant(0.0, 9), &noise) {
            Err(Error::Divergence { step, .. }) => assert!(step >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn picard_trivial_and_fixed_point() {
        let p = problem(AffineForm { jumps: vec![AffineJump::default()], ..Default::default() }, 0.5, MarkSpace::single(1.0).unwrap());
        let noise = Ensemble::new(2, 1, 16).noise(&p, 0).unwrap();
        let u = ControlPath::constant(0.0, noise.grid.len());
        let trace = picard_iterate(&p, &u, &noise, 3).unwrap();
        assert!(trace.distances.iter().all(|&d| d == 0.0));

        let form = AffineForm { a: 0.5, s0: 0.3, c: 0.2, ..Default::default() };
        let p = problem(form, 1.0, MarkSpace::empty());
        let noise = Ensemble::new(2, 1, 16).noise(&p, 0).unwrap();
        let u = ControlPath::constant(0.0, noise.grid.len());
        let trace = picard_iterate(&p, &u, &noise, 40).unwrap();
        let x = solve_forward(&p, &u, &noise).unwrap();
        assert!(trace.iterates.last().unwrap().sup_distance(&x) < 1e-14);
    }

    #[test]
    fn picard_rejects_zero_iterations() {
        let p = jump_only(1.0);
        let grid = refine_grid(&uniform_mesh(1.0, 4).unwrap(), &[]).unwrap();
        let noise = NoisePath { brownian_increments: vec![0.0; 4], jump_events: vec![], grid };
        assert!(picard_iterate(&p, &ControlPath::constant(0.0, 5), &noise, 0).is_err());
    }

    #[test]
    fn identical_problems_have_zero_lp_ratio() {
        let p = jump_only(2.0);
        let r = lp_estimate_check(&p, &p, &FeedbackControl::Constant(0.0), 2, &Ensemble::new(1, 50, 16)).unwrap();
        assert_eq!(r.lhs.mean, 0.0);
        assert_eq!(r.ratio, 0.0);
        assert!(lp_estimate_check(&p, &p, &FeedbackControl::Constant(0.0), 3, &Ensemble::new(1, 5, 16)).is_err());
    }
}
