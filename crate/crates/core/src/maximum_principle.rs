//! Hamiltonian evaluation and the pointwise variational inequality
//! H(v) − H(u) + ½P(σ(v) − σ(u))² ≥ 0 checked along simulated paths.

use serde::{Deserialize, Serialize};

use crate::adjoint::AdjointSolution;
use crate::error::{invalid, Result};
use crate::forward::{solve_with_feedback, Ensemble};
use crate::problem::{FeedbackControl, ProblemDef};
use crate::stats::Estimate;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianSample {
    pub t: f64,
    pub x: f64,
    pub u: f64,
    pub p: f64,
    pub q: f64,
    pub value: f64,
}

/// H(t, x, u, p, q) = p·b + q·σ + f.
pub fn hamiltonian(t: f64, x: f64, u: f64, p: f64, q: f64, problem: &ProblemDef) -> f64 {
    let m = problem.model.as_ref();
    p * m.drift(t, x, u).value + q * m.diffusion(t, x, u).value + m.running_cost(t, x, u).value
}

pub fn hamiltonian_sample(t: f64, x: f64, u: f64, p: f64, q: f64, problem: &ProblemDef) -> HamiltonianSample {
    HamiltonianSample { t, x, u, p, q, value: hamiltonian(t, x, u, p, q, problem) }
}

/// Left side of the variational inequality at one (t, x) for the candidate v.
pub fn deficiency(problem: &ProblemDef, t: f64, x: f64, u: f64, v: f64, p: f64, q: f64, big_p: f64) -> f64 {
    let m = problem.model.as_ref();
    let ds = m.diffusion(t, x, v).value - m.diffusion(t, x, u).value;
    hamiltonian(t, x, v, p, q, problem) - hamiltonian(t, x, u, p, q, problem) + 0.5 * big_p * ds * ds
}

/// Which nodes are inspected and the discretization allowance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpSampling {
    /// Every `time_stride`-th base node, starting at the `time_stride`-th.
    /// The initial node (deterministic state) and the terminal node are never used.
    pub time_stride: usize,
    /// C·Δt added to three standard errors of each sample.
    pub allowance: f64,
}

impl Default for MpSampling {
    fn default() -> Self {
        Self { time_stride: 1, allowance: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpSample {
    pub path: usize,
    pub t: f64,
    pub x: f64,
    pub u: f64,
    pub argmin: f64,
    pub minimum: f64,
    /// Standard error of the minimum propagated from the adjoint estimates.
    pub se: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpSummary {
    pub samples: usize,
    pub global_minimum: f64,
    /// Tolerance of the sample attaining the global minimum.
    pub tolerance: f64,
    pub violating_fraction: f64,
    /// min over samples of (minimum + tolerance); negative iff some sample violates.
    pub worst_margin: f64,
}

impl MpSummary {
    fn of(samples: &[MpSample]) -> Self {
        let mut s = MpSummary { samples: samples.len(), global_minimum: f64::INFINITY, tolerance: 0.0, violating_fraction: 0.0, worst_margin: f64::INFINITY };
        let mut bad = 0usize;
        for m in samples {
            if m.minimum < s.global_minimum {
                s.global_minimum = m.minimum;
                s.tolerance = m.tolerance;
            }
            s.worst_margin = s.worst_margin.min(m.minimum + m.tolerance);
            bad += (m.minimum < -m.tolerance) as usize;
        }
        if !samples.is_empty() {
            s.violating_fraction = bad as f64 / samples.len() as f64;
        }
        s
    }

    pub fn holds(&self) -> bool {
        self.worst_margin >= 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpReport {
    pub samples: Vec<MpSample>,
    /// Aggregate over non-jump nodes.
    pub summary: MpSummary,
    /// Jump nodes, evaluated at the pre-jump state and kept out of the aggregate.
    pub jump_samples: Vec<MpSample>,
    pub jump_summary: MpSummary,
}

fn sample_at(
    problem: &ProblemDef,
    v_grid: &[f64],
    path: usize,
    (t, x, u): (f64, f64, f64),
    (p, q, big_p): (f64, f64, f64),
    (p_se, q_se, big_p_se): (f64, f64, f64),
    allowance: f64,
) -> MpSample {
    let m = problem.model.as_ref();
    let (mut argmin, mut minimum) = (u, f64::INFINITY);
    for &v in v_grid {
        let d = deficiency(problem, t, x, u, v, p, q, big_p);
        if d < minimum {
            minimum = d;
            argmin = v;
        }
    }
    let db = m.drift(t, x, argmin).value - m.drift(t, x, u).value;
    let ds = m.diffusion(t, x, argmin).value - m.diffusion(t, x, u).value;
    let se = ((db * p_se).powi(2) + (ds * q_se).powi(2) + (0.5 * ds * ds * big_p_se).powi(2)).sqrt();
    MpSample { path, t, x, u, argmin, minimum, se, tolerance: 3.0 * se + allowance }
}

pub fn mp_deficiency(
    problem: &ProblemDef,
    rule: &FeedbackControl,
    adjoint: &AdjointSolution,
    v_grid: &[f64],
    ensemble: &Ensemble,
    sampling: MpSampling,
) -> Result<MpReport> {
    if v_grid.is_empty() {
        return invalid("v_grid must not be empty");
    }
    if let Some(v) = v_grid.iter().find(|&&v| !problem.control_set.contains(v)) {
        return invalid(format!("v = {v} is outside the control set"));
    }
    if sampling.time_stride == 0 {
        return invalid("time_stride must be positive");
    }
    let per_path = ensemble.map(problem, |k, noise| {
        let (x, u) = solve_with_feedback(problem, rule, noise)?;
        let (ad, ad2) = adjoint.along(problem, noise, &x, &u);
        let g = &noise.grid;
        let base = g.base_indices();
        let mut regular = Vec::new();
        for &i in base[..base.len() - 1].iter().skip(sampling.time_stride).step_by(sampling.time_stride) {
            if g.is_jump(i) {
                continue;
            }
            regular.push(sample_at(
                problem,
                v_grid,
                k,
                (g.time(i), x.post_values[i], u.values[i]),
                (ad.p[i], ad.q[i], ad2.p[i]),
                (ad.p_se[i], ad.q_se[i], ad2.p_se[i]),
                sampling.allowance,
            ));
        }
        let mut at_jumps = Vec::new();
        for e in &noise.jump_events {
            let i = e.index;
            at_jumps.push(sample_at(
                problem,
                v_grid,
                k,
                (g.time(i), x.left_limits[i], u.jump_values[i]),
                (ad.p[i], ad.q[i], ad2.p[i]),
                (ad.p_se[i], ad.q_se[i], ad2.p_se[i]),
                sampling.allowance,
            ));
        }
        Ok((regular, at_jumps))
    })?;
    let (mut samples, mut jump_samples) = (Vec::new(), Vec::new());
    for (r, j) in per_path {
        samples.extend(r);
        jump_samples.extend(j);
    }
    Ok(MpReport { summary: MpSummary::of(&samples), jump_summary: MpSummary::of(&jump_samples), samples, jump_samples })
}

/// E[I_A(ΔH + ½P(Δσ)²)] at t̄ for the spike value w on the event A.
pub fn localization_check(
    problem: &ProblemDef,
    rule: &FeedbackControl,
    adjoint: &AdjointSolution,
    t_bar: f64,
    w: f64,
    predicate: &(dyn Fn(f64) -> bool + Sync),
    ensemble: &Ensemble,
) -> Result<Estimate> {
    if !(t_bar >= 0.0 && t_bar < problem.horizon) {
        return invalid("t_bar must lie in [0, T)");
    }
    if !problem.control_set.contains(w) {
        return invalid("w is outside the control set");
    }
    let vals = ensemble.map(problem, |_, noise| {
        let (x, u) = solve_with_feedback(problem, rule, noise)?;
        let (ad, ad2) = adjoint.along(problem, noise, &x, &u);
        let g = &noise.grid;
        let i = g.base_indices()[g.base_indices().partition_point(|&i| g.time(i) <= t_bar) - 1];
        let xi = x.post_values[i];
        Ok(if predicate(xi) { deficiency(problem, g.time(i), xi, u.values[i], w, ad.p[i], ad.q[i], ad2.p[i]) } else { 0.0 })
    })?;
    Ok(Estimate::from_samples(&vals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::solve_adjoint_closed_form;
    use crate::driver::MarkSpace;
    use crate::problem::{AffineForm, AffineJump, ControlSet};
    use std::sync::Arc;

    fn lq() -> ProblemDef {
        let form = AffineForm { a: 0.1, bu: 1.0, c: 0.2, d: 0.4, jumps: vec![AffineJump { gamma: 0.3, ..Default::default() }], qf: 1.0, r: 0.5, gt: 1.0, ..Default::default() };
        ProblemDef::new("lq", 1.0, 1.0, MarkSpace::single(2.0).unwrap(), ControlSet::Interval { lo: -5.0, hi: 5.0, points: 101 }, Arc::new(form))
    }

    #[test]
    fn hamiltonian_arithmetic() {
        let form = AffineForm { b0: 3.0, s0: 4.0, jumps: vec![AffineJump::default()], f1: 5.0, ..Default::default() };
        let p = ProblemDef::new("h", 0.0, 1.0, MarkSpace::single(1.0).unwrap(), ControlSet::Finite(vec![0.0]), Arc::new(form));
        assert_eq!(hamiltonian(0.0, 1.0, 0.0, 1.0, 2.0, &p), 16.0);
        assert_eq!(hamiltonian(0.0, 1.0, 0.0, 0.0, 0.0, &p), 5.0);
    }

    #[test]
    fn identity_grid_gives_zero() {
        let p = lq();
        let rule = FeedbackControl::Constant(0.3);
        let ad = AdjointSolution::ClosedForm(solve_adjoint_closed_form(&p, &rule, 32).unwrap());
        let r = mp_deficiency(&p, &rule, &ad, &[0.3], &Ensemble::new(3, 20, 32), MpSampling::default()).unwrap();
        assert!(r.samples.iter().chain(&r.jump_samples).all(|s| s.minimum == 0.0));
        assert!(r.summary.holds());
    }

    #[test]
    fn empty_grid_rejected() {
        let p = lq();
        let rule = FeedbackControl::Constant(0.0);
        let ad = AdjointSolution::ClosedForm(solve_adjoint_closed_form(&p, &rule, 8).unwrap());
        assert!(mp_deficiency(&p, &rule, &ad, &[], &Ensemble::new(3, 2, 8), MpSampling::default()).is_err());
    }

    #[test]
    fn localization_trivial_sets() {
        let p = lq();
        let rule = FeedbackControl::Constant(0.3);
        let ad = AdjointSolution::ClosedForm(solve_adjoint_closed_form(&p, &rule, 16).unwrap());
        let ens = Ensemble::new(5, 50, 16);
        assert_eq!(localization_check(&p, &rule, &ad, 0.5, 1.0, &|_| false, &ens).unwrap().mean, 0.0);
        assert_eq!(localization_check(&p, &rule, &ad, 0.5, 0.3, &|_| true, &ens).unwrap().mean, 0.0);
    }
}
