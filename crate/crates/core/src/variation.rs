//! Spike variations of a control, the first and second variational
//! equations, and the expansion residuals measured along an ε ladder.

use serde::{Deserialize, Serialize};

use crate::driver::{NoisePath, TimeGrid};
use crate::error::{invalid, Result};
use crate::forward::{cost, guard, solve_forward, solve_with_feedback, sup_abs_diff, Ensemble, StatePath};
use crate::problem::{ControlPath, FeedbackControl, ProblemDef};
use crate::stats::{fit_line, mean, Estimate, LineFit};

/// Perturbation value: a constant or a bounded function of X_{t̄}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SpikeValue {
    Constant(f64),
    /// `above` when X_{t̄} > threshold, otherwise `below`.
    StateThreshold { threshold: f64, below: f64, above: f64 },
    /// u_{t̄} + shift: the base control at t̄ moved by a fixed amount.
    Shift(f64),
}

impl SpikeValue {
    fn resolve(&self, x_bar: f64, u_bar: f64) -> f64 {
        match *self {
            SpikeValue::Constant(v) => v,
            SpikeValue::Shift(d) => u_bar + d,
            SpikeValue::StateThreshold { threshold, below, above } => {
                if x_bar > threshold {
                    above
                } else {
                    below
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpikeSpec {
    pub t_bar: f64,
    pub epsilon: f64,
    pub v: SpikeValue,
}

impl SpikeSpec {
    pub fn constant(t_bar: f64, epsilon: f64, v: f64) -> Self {
        Self { t_bar, epsilon, v: SpikeValue::Constant(v) }
    }

    pub fn check(&self, problem: &ProblemDef) -> Result<()> {
        if !(self.t_bar >= 0.0 && self.epsilon >= 0.0 && self.t_bar + self.epsilon <= problem.horizon + 1e-12) {
            return invalid(format!("spike window [{}, {}] outside [0, T]", self.t_bar, self.t_bar + self.epsilon));
        }
        let values = match self.v {
            SpikeValue::Constant(v) => vec![v],
            SpikeValue::StateThreshold { below, above, .. } => vec![below, above],
            // Depends on the path; checked when the perturbed control is realized.
            SpikeValue::Shift(d) if d.is_finite() => vec![],
            SpikeValue::Shift(d) => return invalid(format!("spike shift {d} is not finite")),
        };
        for v in values {
            if !problem.control_set.contains(v) {
                return invalid(format!("spike value {v} outside the control set"));
            }
        }
        Ok(())
    }

    /// The step leaving t_i lies in the window: t_i ∈ [t̄, t̄+ε).
    fn covers_step(&self, t: f64) -> bool {
        t >= self.t_bar && t < self.t_bar + self.epsilon
    }

    /// A jump at t_i lies in the window: t_i ∈ (t̄, t̄+ε].
    fn covers_jump(&self, t: f64) -> bool {
        t > self.t_bar && t <= self.t_bar + self.epsilon
    }
}

/// Spike value read off a path at the last node not after t̄.
fn resolve_at(spec: &SpikeSpec, grid: &TimeGrid, state: &StatePath, u: &ControlPath) -> f64 {
    let i = grid.times().partition_point(|&s| s <= spec.t_bar).saturating_sub(1);
    spec.v.resolve(state.post_values[i], u.values[i])
}

/// Spike that leaves the jump graph untouched: v on the window for b, σ and
/// the compensator-free part, u at every jump node and in the compensator.
pub fn spike_control(u: &ControlPath, spec: &SpikeSpec, noise: &NoisePath, base_state: &StatePath) -> ControlPath {
    let grid = &noise.grid;
    let v = resolve_at(spec, grid, base_state, u);
    let mut out = u.clone();
    for i in 0..grid.len() {
        if spec.covers_step(grid.time(i)) {
            out.values[i] = v;
        }
    }
    out
}

/// Classical spike: v on the whole window, jump nodes included.
pub fn naive_spike_control(u: &ControlPath, spec: &SpikeSpec, noise: &NoisePath, base_state: &StatePath) -> ControlPath {
    let grid = &noise.grid;
    let v = resolve_at(spec, grid, base_state, u);
    let mut out = u.clone();
    for i in 0..grid.len() {
        let t = grid.time(i);
        if spec.covers_step(t) {
            out.values[i] = v;
            out.compensator_values[i] = v;
        }
        if grid.is_jump(i) && spec.covers_jump(t) {
            out.jump_values[i] = v;
        }
    }
    out
}

/// X̂ and Ŷ at every node, with left limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationPaths {
    pub x_hat: StatePath,
    pub y_hat: StatePath,
}

/// Euler scheme of the first variational equation along (X, u) with
/// forcing u^ε − u. Jump-graph differences of the control also enter, so the
/// same routine linearizes the naive spike; for [`spike_control`] they vanish.
pub fn solve_first_variation(
    problem: &ProblemDef,
    u: &ControlPath,
    u_eps: &ControlPath,
    base: &StatePath,
    noise: &NoisePath,
) -> Result<StatePath> {
    let m = problem.model.as_ref();
    let grid = &noise.grid;
    let weights = problem.marks.weights();
    let n = grid.len();
    let mut post = Vec::with_capacity(n);
    let mut left = Vec::with_capacity(n);
    let mut y = 0.0;
    post.push(y);
    left.push(y);
    for i in 0..n - 1 {
        let (t, x) = (grid.time(i), base.post_values[i]);
        let (a, ae) = (u.values[i], u_eps.values[i]);
        let b = m.drift(t, x, a);
        let s = m.diffusion(t, x, a);
        let mut drift = b.dx * y + (m.drift(t, x, ae).value - b.value);
        let diff = s.dx * y + (m.diffusion(t, x, ae).value - s.value);
        for (e, w) in weights.iter().enumerate() {
            let c = m.jump(t, x, u.compensator_values[i], e);
            let dc = m.jump(t, x, u_eps.compensator_values[i], e).value - c.value;
            drift -= w * (c.dx * y + dc);
        }
        let t1 = grid.time(i + 1);
        let ym = guard(y + drift * grid.dt(i) + diff * noise.brownian_increments[i], i + 1, t1)?;
        let yn = match grid.mark_at(i + 1) {
            Some(e) => {
                let xl = base.left_limits[i + 1];
                let c = m.jump(t1, xl, u.jump_values[i + 1], e);
                let dc = m.jump(t1, xl, u_eps.jump_values[i + 1], e).value - c.value;
                guard(ym + c.dx * ym + dc, i + 1, t1)?
            }
            None => ym,
        };
        left.push(ym);
        post.push(yn);
        y = yn;
    }
    Ok(StatePath { post_values: post, left_limits: left })
}

/// Euler scheme of the second variational equation: linear in Ŷ with sources
/// ½b_xx X̂², ½σ_xx X̂² + δσ_x X̂ and ½c_xx X̂₋² (+ δc_x X̂₋ for the naive spike).
pub fn solve_second_variation(
    problem: &ProblemDef,
    u: &ControlPath,
    u_eps: &ControlPath,
    base: &StatePath,
    x_hat: &StatePath,
    noise: &NoisePath,
) -> Result<StatePath> {
    let m = problem.model.as_ref();
    let grid = &noise.grid;
    let weights = problem.marks.weights();
    let n = grid.len();
    let mut post = Vec::with_capacity(n);
    let mut left = Vec::with_capacity(n);
    let mut y = 0.0;
    post.push(y);
    left.push(y);
    for i in 0..n - 1 {
        let (t, x) = (grid.time(i), base.post_values[i]);
        let xh = x_hat.post_values[i];
        let (a, ae) = (u.values[i], u_eps.values[i]);
        let b = m.drift(t, x, a);
        let s = m.diffusion(t, x, a);
        let mut drift = b.dx * y + 0.5 * b.dxx * xh * xh;
        let diff = s.dx * y + 0.5 * s.dxx * xh * xh + (m.diffusion(t, x, ae).dx - s.dx) * xh;
        for (e, w) in weights.iter().enumerate() {
            let c = m.jump(t, x, u.compensator_values[i], e);
            let dcx = m.jump(t, x, u_eps.compensator_values[i], e).dx - c.dx;
            drift -= w * (c.dx * y + 0.5 * c.dxx * xh * xh + dcx * xh);
        }
        let t1 = grid.time(i + 1);
        let ym = guard(y + drift * grid.dt(i) + diff * noise.brownian_increments[i], i + 1, t1)?;
        let yn = match grid.mark_at(i + 1) {
            Some(e) => {
                let (xl, xhl) = (base.left_limits[i + 1], x_hat.left_limits[i + 1]);
                let c = m.jump(t1, xl, u.jump_values[i + 1], e);
                let dcx = m.jump(t1, xl, u_eps.jump_values[i + 1], e).dx - c.dx;
                guard(ym + c.dx * ym + 0.5 * c.dxx * xhl * xhl + dcx * xhl, i + 1, t1)?
            }
            None => ym,
        };
        left.push(ym);
        post.push(yn);
        y = yn;
    }
    Ok(StatePath { post_values: post, left_limits: left })
}

/// Which spike construction to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpikeKind {
    GraphExcluding,
    Naive,
}

/// Everything computed on one noise path for one spike.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikedPath {
    pub noise: NoisePath,
    pub base: StatePath,
    pub control: ControlPath,
    pub perturbed_control: ControlPath,
    pub perturbed: StatePath,
    pub window_has_jump: bool,
}

pub fn spike_path(
    problem: &ProblemDef,
    rule: &FeedbackControl,
    spec: &SpikeSpec,
    kind: SpikeKind,
    noise: NoisePath,
) -> Result<SpikedPath> {
    let (base, control) = solve_with_feedback(problem, rule, &noise)?;
    let perturbed_control = match kind {
        SpikeKind::GraphExcluding => spike_control(&control, spec, &noise, &base),
        SpikeKind::Naive => naive_spike_control(&control, spec, &noise, &base),
    };
    perturbed_control.check(&noise.grid, &problem.control_set)?;
    let perturbed = solve_forward(problem, &perturbed_control, &noise)?;
    let window_has_jump = noise.jump_events.iter().any(|j| spec.covers_jump(j.time));
    Ok(SpikedPath { noise, base, control, perturbed_control, perturbed, window_has_jump })
}

/// Moments of sup-norm deviations along an ε ladder, with their fitted order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderFit {
    pub epsilons: Vec<f64>,
    pub moments: Vec<f64>,
    pub slope: f64,
    pub r2: f64,
}

/// Least-squares slope of log(moment) against log(ε).
pub fn fit_order(epsilons: &[f64], moments: &[f64]) -> Result<OrderFit> {
    if epsilons.len() != moments.len() || epsilons.len() < 4 {
        return invalid("order fit needs at least four ladder points");
    }
    if epsilons.windows(2).any(|w| !(w[1] < w[0])) {
        return invalid("epsilon ladder must be strictly decreasing");
    }
    if let Some(m) = moments.iter().find(|m| !(**m > 0.0 && m.is_finite())) {
        return invalid(format!("moment {m} is not positive"));
    }
    let lx: Vec<f64> = epsilons.iter().map(|e| e.ln()).collect();
    let ly: Vec<f64> = moments.iter().map(|m| m.ln()).collect();
    let LineFit { slope, r2, .. } = fit_line(&lx, &ly);
    Ok(OrderFit { epsilons: epsilons.to_vec(), moments: moments.to_vec(), slope, r2 })
}

/// Per-ε Monte Carlo summaries of one spike experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderPoint {
    pub epsilon: f64,
    /// E[sup|X^ε − X|^p] for each requested p.
    pub state_moments: Vec<Estimate>,
    pub x_hat_sq: Estimate,
    pub y_hat_sq: Estimate,
    /// E[sup|X^ε − X − X̂ − Ŷ|²] / ε².
    pub expansion_ratio: Estimate,
    pub cost_difference: Estimate,
    pub j_hat: Estimate,
    /// |J(u^ε) − J(u) − Ĵ| / ε.
    pub cost_residual: f64,
    pub cost_residual_se: f64,
    pub jump_fraction: f64,
}

/// One spike experiment along an ε ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderSpec {
    pub t_bar: f64,
    pub v: SpikeValue,
    /// Strictly decreasing widths.
    pub epsilons: Vec<f64>,
    /// Exponents p for E[sup|X^ε − X|^p].
    pub powers: Vec<u32>,
    pub kind: SpikeKind,
    /// Also solve X̂ and Ŷ and the expansion residuals.
    pub with_variations: bool,
}

/// Runs the ladder on common noise: every ε reuses the same paths.
pub fn ladder_experiment(
    problem: &ProblemDef,
    rule: &FeedbackControl,
    spec: &LadderSpec,
    ensemble: &Ensemble,
) -> Result<Vec<LadderPoint>> {
    let LadderSpec { t_bar, v, ref epsilons, ref powers, kind, with_variations } = *spec;
    let mut out = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let spec = SpikeSpec { t_bar, epsilon: eps, v };
        spec.check(problem)?;
        let rows = ensemble.map(problem, |_, noise| {
            let sp = spike_path(problem, rule, &spec, kind, noise.clone())?;
            let dev = sp.perturbed.sup_distance(&sp.base);
            let moments: Vec<f64> = powers.iter().map(|&p| dev.powi(p as i32)).collect();
            let grid = &sp.noise.grid;
            let c_base = cost(problem, &sp.base, &sp.control, grid).total;
            let c_pert = cost(problem, &sp.perturbed, &sp.perturbed_control, grid).total;
            let (xs, ys, resid, jhat) = if with_variations {
                let xh = solve_first_variation(problem, &sp.control, &sp.perturbed_control, &sp.base, &sp.noise)?;
                let yh = solve_second_variation(problem, &sp.control, &sp.perturbed_control, &sp.base, &xh, &sp.noise)?;
                let xs = sup(&xh.post_values).max(sup(&xh.left_limits));
                let ys = sup(&yh.post_values).max(sup(&yh.left_limits));
                let r = expansion_sup(&sp.perturbed, &sp.base, &xh, &yh);
                let jhat = j_hat_sample(problem, &sp, &xh, &yh);
                (xs * xs, ys * ys, r * r / (eps * eps), jhat)
            } else {
                (0.0, 0.0, 0.0, 0.0)
            };
            Ok((moments, xs, ys, resid, c_pert - c_base, jhat, sp.window_has_jump))
        })?;
        let col = |f: &dyn Fn(&(Vec<f64>, f64, f64, f64, f64, f64, bool)) -> f64| {
            Estimate::from_samples(&rows.iter().map(f).collect::<Vec<_>>())
        };
        let state_moments = (0..powers.len()).map(|k| col(&|r| r.0[k])).collect();
        let cost_difference = col(&|r| r.4);
        let j_hat = col(&|r| r.5);
        let resid = col(&|r| r.4 - r.5);
        out.push(LadderPoint {
            epsilon: eps,
            state_moments,
            x_hat_sq: col(&|r| r.1),
            y_hat_sq: col(&|r| r.2),
            expansion_ratio: col(&|r| r.3),
            cost_difference,
            j_hat,
            cost_residual: resid.mean.abs() / eps,
            cost_residual_se: resid.se / eps,
            jump_fraction: mean(&rows.iter().map(|r| if r.6 { 1.0 } else { 0.0 }).collect::<Vec<_>>()),
        });
    }
    Ok(out)
}

fn sup(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// sup over nodes and left limits of |X^ε − X − X̂ − Ŷ|.
pub fn expansion_sup(perturbed: &StatePath, base: &StatePath, x_hat: &StatePath, y_hat: &StatePath) -> f64 {
    let r = |a: &[f64], b: &[f64], c: &[f64], d: &[f64]| {
        let lhs: Vec<f64> = a.iter().zip(b).map(|(a, b)| a - b).collect();
        let rhs: Vec<f64> = c.iter().zip(d).map(|(c, d)| c + d).collect();
        sup_abs_diff(&lhs, &rhs)
    };
    r(&perturbed.post_values, &base.post_values, &x_hat.post_values, &y_hat.post_values)
        .max(r(&perturbed.left_limits, &base.left_limits, &x_hat.left_limits, &y_hat.left_limits))
}

/// Pathwise integrand of Ĵ: ∫ f_x(X̂+Ŷ) + ½f_xx X̂² + δf dt + g_x(X̂_T+Ŷ_T) + ½g_xx X̂_T².
fn j_hat_sample(problem: &ProblemDef, sp: &SpikedPath, xh: &StatePath, yh: &StatePath) -> f64 {
    let m = problem.model.as_ref();
    let grid = &sp.noise.grid;
    let mut run = 0.0;
    for i in 0..grid.intervals() {
        let (t, x, a) = (grid.time(i), sp.base.post_values[i], sp.control.values[i]);
        let f = m.running_cost(t, x, a);
        let df = m.running_cost(t, x, sp.perturbed_control.values[i]).value - f.value;
        let (xv, yv) = (xh.post_values[i], yh.post_values[i]);
        run += (f.dx * (xv + yv) + 0.5 * f.dxx * xv * xv + df) * grid.dt(i);
    }
    let g = m.terminal_cost(sp.base.terminal());
    let (xt, yt) = (xh.terminal(), yh.terminal());
    run + g.dx * (xt + yt) + 0.5 * g.dxx * xt * xt
}

/// Convenience wrapper: residual ratios E[sup|X^ε−X−X̂−Ŷ|²]/ε² along the ladder.
pub fn expansion_residual(
    problem: &ProblemDef,
    rule: &FeedbackControl,
    t_bar: f64,
    v: SpikeValue,
    epsilons: &[f64],
    ensemble: &Ensemble,
) -> Result<Vec<Estimate>> {
    let spec = LadderSpec { t_bar, v, epsilons: epsilons.to_vec(), powers: vec![], kind: SpikeKind::GraphExcluding, with_variations: true };
    let pts = ladder_experiment(problem, rule, &spec, ensemble)?;
    Ok(pts.into_iter().map(|p| p.expansion_ratio).collect())
}

/// Ĵ and the normalized residual |J(u^ε) − J(u) − Ĵ|/ε along the ladder.
pub fn cost_expansion(
    problem: &ProblemDef,
    rule: &FeedbackControl,
    t_bar: f64,
    v: SpikeValue,
    epsilons: &[f64],
    ensemble: &Ensemble,
) -> Result<Vec<(Estimate, f64)>> {
    let spec = LadderSpec { t_bar, v, epsilons: epsilons.to_vec(), powers: vec![], kind: SpikeKind::GraphExcluding, with_variations: true };
    let pts = ladder_experiment(problem, rule, &spec, ensemble)?;
    Ok(pts.into_iter().map(|p| (p.j_hat, p.cost_residual)).collect())
}

/// Geometric ladder first·T, first·T/2, … with `count` points.
pub fn dyadic_ladder(horizon: f64, first_exponent: i32, count: usize) -> Vec<f64> {
    (0..count).map(|k| horizon * 2f64.powi(-(first_exponent + k as i32))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::{refine_grid, uniform_mesh, JumpEvent, MarkSpace};
    use crate::problem::{AffineForm, AffineJump, ControlSet, Dynamics, Jet};
    use std::sync::Arc;

    fn noise_with_jump(at: f64) -> NoisePath {
        let grid = refine_grid(&uniform_mesh(1.0, 8).unwrap(), &[(at, 0)]).unwrap();
        let index = grid.index_of(at).unwrap();
        NoisePath {
            brownian_increments: vec![0.1; grid.intervals()],
            jump_events: vec![JumpEvent { time: at, mark: 0, index }],
            grid,
        }
    }

    fn lq() -> ProblemDef {
        let form = AffineForm {
            a: 0.2,
            bu: 1.0,
            c: 0.3,
            d: 0.5,
            jumps: vec![AffineJump { gamma: 0.2, eta: 1.0, c0: 0.0 }],
            qf: 1.0,
            r: 0.5,
            gt: 1.0,
            ..Default::default()
        };
        ProblemDef::new("lq", 1.0, 1.0, MarkSpace::single(4.0).unwrap(), ControlSet::Interval { lo: -2.0, hi: 2.0, points: 9 }, Arc::new(form))
    }

    #[test]
    fn spike_keeps_u_on_jump_graph() {
        let noise = noise_with_jump(0.3);
        let u = ControlPath::constant(0.0, noise.grid.len());
        let base = StatePath::constant(1.0, noise.grid.len());
        let spec = SpikeSpec::constant(0.25, 0.25, 1.0);
        let s = spike_control(&u, &spec, &noise, &base);
        let j = noise.jump_events[0].index;
        assert_eq!(s.jump_values[j], 0.0);
        assert!(s.compensator_values.iter().all(|&v| v == 0.0));
        for i in 0..noise.grid.len() {
            let t = noise.grid.time(i);
            let expect = if (0.25..0.5).contains(&t) { 1.0 } else { 0.0 };
            assert_eq!(s.values[i], expect, "node {i}");
        }
        let n = naive_spike_control(&u, &spec, &noise, &base);
        assert_eq!(n.jump_values[j], 1.0);
        let diff: Vec<usize> = (0..noise.grid.len()).filter(|&i| n.jump_values[i] != s.jump_values[i]).collect();
        assert_eq!(diff, vec![j]);
    }

    #[test]
    fn empty_window_is_identity() {
        let noise = noise_with_jump(0.3);
        let u = ControlPath::constant(0.2, noise.grid.len());
        let base = StatePath::constant(1.0, noise.grid.len());
        let spec = SpikeSpec::constant(0.25, 0.0, 1.0);
        assert_eq!(spike_control(&u, &spec, &noise, &base), u);
        assert_eq!(naive_spike_control(&u, &spec, &noise, &base), u);
    }

    #[test]
    fn windows_without_jumps_agree() {
        let noise = noise_with_jump(0.9);
        let u = ControlPath::constant(0.2, noise.grid.len());
        let base = StatePath::constant(1.0, noise.grid.len());
        let spec = SpikeSpec::constant(0.25, 0.25, 1.0);
        assert_eq!(spike_control(&u, &spec, &noise, &base), {
            let mut n = naive_spike_control(&u, &spec, &noise, &base);
            n.compensator_values = u.compensator_values.clone();
            n
        });
    }

    #[test]
    fn zero_forcing_gives_zero_variations() {
        let p = lq();
        let noise = Ensemble::new(3, 1, 32).noise(&p, 0).unwrap();
        let (x, u) = solve_with_feedback(&p, &FeedbackControl::linear(0.5), &noise).unwrap();
        let xh = solve_first_variation(&p, &u, &u, &x, &noise).unwrap();
        let yh = solve_second_variation(&p, &u, &u, &x, &xh, &noise).unwrap();
        assert!(xh.post_values.iter().chain(&yh.post_values).all(|&v| v == 0.0));
    }

    struct PureDrift;
    impl Dynamics for PureDrift {
        fn drift(&self, _t: f64, _x: f64, u: f64) -> Jet {
            Jet::new(3.0 * u, 0.0, 0.0)
        }
        fn diffusion(&self, _t: f64, _x: f64, _u: f64) -> Jet {
            Jet::default()
        }
        fn jump(&self, _t: f64, _x: f64, _u: f64, _e: usize) -> Jet {
            Jet::default()
        }
        fn running_cost(&self, _t: f64, _x: f64, _u: f64) -> Jet {
            Jet::default()
        }
        fn terminal_cost(&self, _x: f64) -> Jet {
            Jet::default()
        }
    }

    #[test]
    fn constant_forcing_integrates_window_length() {
        let p = ProblemDef::new("d", 0.0, 1.0, MarkSpace::single(1.0).unwrap(), ControlSet::Interval { lo: 0.0, hi: 1.0, points: 2 }, Arc::new(PureDrift));
        let noise = noise_with_jump(0.3);
        let u = ControlPath::constant(0.0, noise.grid.len());
        let base = StatePath::constant(0.0, noise.grid.len());
        let s = spike_control(&u, &SpikeSpec::constant(0.25, 0.25, 1.0), &noise, &base);
        let xh = solve_first_variation(&p, &u, &s, &base, &noise).unwrap();
        assert!((xh.terminal() - 3.0 * 0.25).abs() < 1e-14);
    }

    #[test]
    fn variations_vanish_before_window() {
        let p = lq();
        let noise = Ensemble::new(4, 1, 64).noise(&p, 0).unwrap();
        let sp = spike_path(&p, &FeedbackControl::linear(0.5), &SpikeSpec::constant(0.5, 0.125, 1.0), SpikeKind::GraphExcluding, noise).unwrap();
        let xh = solve_first_variation(&p, &sp.control, &sp.perturbed_control, &sp.base, &sp.noise).unwrap();
        let yh = solve_second_variation(&p, &sp.control, &sp.perturbed_control, &sp.base, &xh, &sp.noise).unwrap();
        for (i, &t) in sp.noise.grid.times().iter().enumerate() {
            if t <= 0.5 {
                assert_eq!(xh.post_values[i], 0.0);
                assert_eq!(yh.post_values[i], 0.0);
            }
        }
        // Affine dynamics: X^ε − X = X̂ exactly, up to rounding.
        assert!(expansion_sup(&sp.perturbed, &sp.base, &xh, &yh) < 1e-12);
    }

    #[test]
    fn fit_order_synthetic() {
        let eps = dyadic_ladder(1.0, 3, 6);
        let sq: Vec<f64> = eps.iter().map(|e| e * e).collect();
        let f = fit_order(&eps, &sq).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.r2 - 1.0).abs() < 1e-12);
        let lin = fit_order(&eps, &eps).unwrap();
        assert!((lin.slope - 1.0).abs() < 1e-12);
        let mixed: Vec<f64> = eps.iter().map(|e| e * e + 0.01 * e).collect();
        let f = fit_order(&eps, &mixed).unwrap();
        assert!(f.slope > 1.0 && f.slope < 2.0);
        let small = fit_order(&eps[3..].iter().copied().chain([eps[5] / 2.0]).collect::<Vec<_>>(), &{
            let e: Vec<f64> = eps[3..].iter().copied().chain([eps[5] / 2.0]).collect();
            e.iter().map(|e| e * e + 0.01 * e).collect::<Vec<_>>()
        })
        .unwrap();
        assert!(small.slope < f.slope);
        assert!(fit_order(&eps, &[1.0, 0.0, 1.0, 1.0, 1.0, 1.0]).is_err());
        assert!(fit_order(&eps[..3], &sq[..3]).is_err());
    }
}
