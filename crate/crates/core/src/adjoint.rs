//! First- and second-order adjoint processes along simulated paths, by a
//! closed form for affine dynamics with linear feedback or by least-squares
//! Monte Carlo regression, and the duality identities linking them to the
//! variational processes.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::driver::NoisePath;
use crate::error::{invalid, Error, Result};
use crate::forward::{solve_with_feedback, Ensemble, StatePath};
use crate::problem::{AffineForm, ControlPath, FeedbackControl, ProblemDef};
use crate::stats::{pairwise_sum, Estimate};
use crate::variation::{solve_first_variation, solve_second_variation, spike_path, SpikeKind, SpikeSpec};

/// Backward solution (value, diffusion, jump coefficients) along one path.
/// For the second-order equation the fields hold (P, Q, K).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjointPath {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// Row-major (node, mark); the value charged to a jump at that node.
    pub k: Vec<f64>,
    pub marks: usize,
    /// Standard error of the estimate of p and q at each node (0 for closed forms).
    pub p_se: Vec<f64>,
    pub q_se: Vec<f64>,
}

pub type SecondAdjointPath = AdjointPath;

impl AdjointPath {
    pub fn k(&self, node: usize, mark: usize) -> f64 {
        self.k[node * self.marks + mark]
    }

    /// (E-free) pathwise S², M² and F² integrands: sup|p|², ∫q²dt, ∫∫k²N(dt,de).
    pub fn norms(&self, noise: &NoisePath) -> (f64, f64, f64) {
        let g = &noise.grid;
        let s2 = self.p.iter().fold(0.0f64, |a, p| a.max(p * p));
        let m2 = (0..g.intervals()).map(|i| self.q[i] * self.q[i] * g.dt(i)).sum();
        let f2 = noise.jump_events.iter().map(|j| self.k(j.index, j.mark).powi(2)).sum();
        (s2, m2, f2)
    }
}

/// Least-squares Monte Carlo settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionSpec {
    /// Polynomial degree in the standardized state.
    pub degree: usize,
    /// Ridge added to the normalized normal equations.
    pub ridge: f64,
    /// Number of disjoint path batches refitted to estimate standard errors.
    /// Below 2, errors come from the last regression step only, which misses
    /// the error carried backward from later steps.
    pub batches: usize,
}

impl Default for RegressionSpec {
    fn default() -> Self {
        Self { degree: 3, ridge: 1e-10, batches: 8 }
    }
}

/// A solved adjoint pair that can be evaluated along any path of the same
/// problem, control and base mesh.
#[derive(Debug, Clone)]
pub enum AdjointSolution {
    ClosedForm(ClosedFormAdjoint),
    Regression(RegressionAdjoint),
}

impl AdjointSolution {
    pub fn along(
        &self,
        problem: &ProblemDef,
        noise: &NoisePath,
        state: &StatePath,
        control: &ControlPath,
    ) -> (AdjointPath, SecondAdjointPath) {
        match self {
            AdjointSolution::ClosedForm(c) => c.along(problem, noise, state, control),
            AdjointSolution::Regression(r) => r.along(problem, noise, state, control),
        }
    }
}

// ---------------------------------------------------------------------------
// Closed form

/// p = α(t)X + β(t), P = π(t), Q = K = 0 for affine dynamics under
/// u = offset − gain·x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormAdjoint {
    pub times: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub pi: Vec<f64>,
}

fn linear_gain(rule: &FeedbackControl) -> Option<(f64, f64)> {
    match rule {
        FeedbackControl::Constant(v) => Some((0.0, *v)),
        FeedbackControl::Linear { gain, offset } => Some((*gain, *offset)),
        _ => None,
    }
}

fn rk4_backward(horizon: f64, steps: usize, terminal: &[f64], rhs: impl Fn(&[f64]) -> Vec<f64>) -> Vec<Vec<f64>> {
    let h = horizon / steps as f64;
    let mut out = vec![terminal.to_vec()];
    let mut y = terminal.to_vec();
    let axpy = |y: &[f64], k: &[f64], a: f64| y.iter().zip(k).map(|(y, k)| y + a * k).collect::<Vec<_>>();
    for _ in 0..steps {
        // Integrate in reversed time s = T − t, so dy/ds = −rhs.
        let f = |y: &[f64]| rhs(y).into_iter().map(|v| -v).collect::<Vec<_>>();
        let k1 = f(&y);
        let k2 = f(&axpy(&y, &k1, h / 2.0));
        let k3 = f(&axpy(&y, &k2, h / 2.0));
        let k4 = f(&axpy(&y, &k3, h));
        y = y.iter().enumerate().map(|(i, y)| y + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect();
        out.push(y.clone());
    }
    out.reverse();
    out
}

pub fn solve_adjoint_closed_form(problem: &ProblemDef, rule: &FeedbackControl, base_steps: usize) -> Result<ClosedFormAdjoint> {
    let form: AffineForm = problem
        .model
        .affine_form()
        .ok_or_else(|| Error::Unsupported(format!("`{}` is not in the affine family", problem.name)))?;
    let (kappa, offset) = linear_gain(rule).ok_or_else(|| Error::Unsupported("closed form needs a linear feedback".into()))?;
    if form.jumps.len() != problem.marks.len() {
        return invalid("affine jump coefficients do not match the mark space");
    }
    if base_steps == 0 {
        return invalid("base_steps must be positive");
    }
    let lam = problem.marks.weights();
    let a_cl = form.a - form.bu * kappa;
    let b_cl = form.bu * offset + form.b0;
    let c_cl = form.c - form.d * kappa;
    let s_cl = form.d * offset + form.s0;
    let jump_lin: f64 = form.jumps.iter().zip(lam).map(|(j, l)| l * j.gamma * (j.gamma - j.eta * kappa)).sum();
    let jump_const: f64 = form.jumps.iter().zip(lam).map(|(j, l)| l * j.gamma * (j.eta * offset + j.c0)).sum();
    let jump_sq: f64 = form.jumps.iter().zip(lam).map(|(j, l)| l * j.gamma * j.gamma).sum();
    let rhs = |y: &[f64]| {
        let (al, be, pi) = (y[0], y[1], y[2]);
        vec![
            -al * (a_cl + form.a + form.c * c_cl + jump_lin) - 2.0 * form.qf,
            -al * b_cl - form.a * be - form.c * al * s_cl - form.f1 - al * jump_const,
            -(2.0 * form.a + form.c * form.c + jump_sq) * pi - 2.0 * form.qf,
        ]
    };
    let sol = rk4_backward(problem.horizon, base_steps, &[2.0 * form.gt, form.g1, 2.0 * form.gt], rhs);
    let h = problem.horizon / base_steps as f64;
    Ok(ClosedFormAdjoint {
        times: (0..=base_steps).map(|j| if j == base_steps { problem.horizon } else { j as f64 * h }).collect(),
        alpha: sol.iter().map(|y| y[0]).collect(),
        beta: sol.iter().map(|y| y[1]).collect(),
        pi: sol.iter().map(|y| y[2]).collect(),
    })
}

fn interp(times: &[f64], ys: &[f64], t: f64) -> f64 {
    let j = times.partition_point(|&s| s <= t).clamp(1, times.len() - 1);
    let (t0, t1) = (times[j - 1], times[j]);
    let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
    ys[j - 1] * (1.0 - w) + ys[j] * w
}

impl ClosedFormAdjoint {
    pub fn alpha_at(&self, t: f64) -> f64 {
        interp(&self.times, &self.alpha, t)
    }
    pub fn beta_at(&self, t: f64) -> f64 {
        interp(&self.times, &self.beta, t)
    }
    pub fn pi_at(&self, t: f64) -> f64 {
        interp(&self.times, &self.pi, t)
    }

    pub fn along(&self, problem: &ProblemDef, noise: &NoisePath, state: &StatePath, control: &ControlPath) -> (AdjointPath, SecondAdjointPath) {
        let m = problem.model.as_ref();
        let g = &noise.grid;
        let n = g.len();
        let marks = problem.marks.len();
        let mut first = empty_path(n, marks);
        let mut second = empty_path(n, marks);
        for i in 0..n {
            let t = g.time(i);
            let (al, x) = (self.alpha_at(t), state.post_values[i]);
            first.p[i] = al * x + self.beta_at(t);
            first.q[i] = al * m.diffusion(t, x, control.values[i]).value;
            for e in 0..marks {
                first.k[i * marks + e] = al * m.jump(t, state.left_limits[i], control.jump_values[i], e).value;
            }
            second.p[i] = self.pi_at(t);
        }
        // Terminal conditions hold exactly.
        let last = n - 1;
        first.p[last] = m.terminal_cost(state.terminal()).dx;
        second.p[last] = m.terminal_cost(state.terminal()).dxx;
        (first, second)
    }
}

fn empty_path(n: usize, marks: usize) -> AdjointPath {
    AdjointPath { p: vec![0.0; n], q: vec![0.0; n], k: vec![0.0; n * marks], marks, p_se: vec![0.0; n], q_se: vec![0.0; n] }
}

// ---------------------------------------------------------------------------
// Regression

/// Polynomial basis in the state standardized by its cross-sectional moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Basis {
    pub center: f64,
    pub scale: f64,
    pub degree: usize,
}

impl Basis {
    fn fit(xs: &[f64], degree: usize) -> Self {
        let n = xs.len() as f64;
        let center = pairwise_sum(xs) / n;
        let var = pairwise_sum(&xs.iter().map(|x| (x - center) * (x - center)).collect::<Vec<_>>()) / n;
        let scale = var.sqrt();
        // A degenerate cross-section (e.g. the deterministic initial state) only supports a constant.
        let degree = if scale < 1e-10 * (1.0 + center.abs()) { 0 } else { degree };
        Self { center, scale: if degree == 0 { 1.0 } else { scale }, degree }
    }

    pub fn len(&self) -> usize {
        self.degree + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn eval_into(&self, x: f64, out: &mut [f64]) {
        let z = (x - self.center) / self.scale;
        let mut v = 1.0;
        for o in out.iter_mut().take(self.degree + 1) {
            *o = v;
            v *= z;
        }
    }

    fn eval(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(x, &mut out);
        out
    }
}

/// Fitted value and diffusion functions on one base step.
#[derive(Debug, Clone, PartialEq)]
struct StepFit {
    basis: Basis,
    value: Vec<f64>,
    diffusion: Vec<f64>,
    /// Covariance of the value / diffusion coefficients.
    value_cov: DMatrix<f64>,
    diffusion_cov: DMatrix<f64>,
}

impl StepFit {
    fn value(&self, x: f64) -> f64 {
        dot(&self.basis.eval(x), &self.value)
    }
    fn diffusion(&self, x: f64) -> f64 {
        dot(&self.basis.eval(x), &self.diffusion)
    }
    fn se(cov: &DMatrix<f64>, phi: &[f64]) -> f64 {
        let v = DVector::from_column_slice(phi);
        (v.dot(&(cov * &v))).max(0.0).sqrt()
    }
    fn value_se(&self, x: f64) -> f64 {
        Self::se(&self.value_cov, &self.basis.eval(x))
    }
    fn diffusion_se(&self, x: f64) -> f64 {
        Self::se(&self.diffusion_cov, &self.basis.eval(x))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

/// Per-step fitted functions for both adjoint equations.
#[derive(Debug, Clone)]
pub struct RegressionAdjoint {
    times: Vec<f64>,
    fits: Fits,
    /// Refits on disjoint path batches, used for standard errors.
    batches: Vec<Fits>,
    /// Steps where the ridge had to be increased to factor the normal equations.
    pub ridge_fallbacks: usize,
}

struct Ols {
    beta: Vec<f64>,
    /// σ̂²(XᵀX + nλI)⁻¹
    cov: DMatrix<f64>,
    fallback: bool,
}

/// Least squares over rows produced by `row(path, out) -> y`, assembled in
/// fixed-size chunks so the sums do not depend on thread count.
fn least_squares(n: usize, cols: usize, ridge: f64, row: impl Fn(usize, &mut [f64]) -> f64 + Sync) -> Ols {
    const CHUNK: usize = 512;
    let chunks: Vec<(DMatrix<f64>, DVector<f64>, f64)> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut xtx = DMatrix::<f64>::zeros(cols, cols);
            let mut xty = DVector::<f64>::zeros(cols);
            let mut yy = 0.0;
            let mut buf = vec![0.0; cols];
            for k in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let y = row(k, &mut buf);
                for a in 0..cols {
                    xty[a] += buf[a] * y;
                    for b in 0..=a {
                        xtx[(a, b)] += buf[a] * buf[b];
                    }
                }
                yy += y * y;
            }
            (xtx, xty, yy)
        })
        .collect();
    let mut xtx = DMatrix::<f64>::zeros(cols, cols);
    let mut xty = DVector::<f64>::zeros(cols);
    let mut yy = 0.0;
    for (a, b, c) in chunks {
        xtx += a;
        xty += b;
        yy += c;
    }
    for a in 0..cols {
        for b in 0..a {
            xtx[(b, a)] = xtx[(a, b)];
        }
    }
    let nf = n as f64;
    let scale = (0..cols).map(|a| xtx[(a, a)] / nf).fold(0.0, f64::max).max(1e-300);
    let mut lambda = ridge;
    let mut fallback = false;
    loop {
        let mut a = xtx.clone();
        for d in 0..cols {
            a[(d, d)] += lambda * scale * nf;
        }
        if let Some(ch) = a.clone().cholesky() {
            let inv = ch.inverse();
            let min_diag = (0..cols).map(|d| ch.l()[(d, d)]).fold(f64::INFINITY, f64::min);
            let max_diag = (0..cols).map(|d| ch.l()[(d, d)]).fold(0.0, f64::max);
            if min_diag > 1e-7 * max_diag || lambda >= 1e-2 {
                let beta = &inv * &xty;
                let rss = (yy - 2.0 * beta.dot(&xty) + beta.dot(&(&xtx * &beta))).max(0.0);
                let dof = (nf - cols as f64).max(1.0);
                return Ols { beta: beta.iter().copied().collect(), cov: inv * (rss / dof), fallback };
            }
        }
        fallback = true;
        lambda = if lambda <= 0.0 { 1e-12 } else { lambda * 100.0 };
    }
}

struct Sweep<'a> {
    rule: &'a FeedbackControl,
    times: &'a [f64],
}

impl Sweep<'_> {
    fn u(&self, j: usize, x: f64) -> f64 {
        self.rule.eval(self.times[j], x)
    }
}

pub fn solve_adjoint_regression(
    problem: &ProblemDef,
    rule: &FeedbackControl,
    ensemble: &Ensemble,
    spec: RegressionSpec,
) -> Result<RegressionAdjoint> {
    if spec.degree < 1 || !(spec.ridge >= 0.0) {
        return invalid("regression degree must be ≥ 1 and ridge ≥ 0");
    }
    if spec.batches >= 2 && ensemble.paths < spec.batches * 4 * (spec.degree + 1) {
        return invalid("too few paths per batch for the regression basis");
    }
    let paths = ensemble.map(problem, |_, noise| {
        let (state, _) = solve_with_feedback(problem, rule, noise)?;
        let base = noise.grid.base_indices();
        let xs: Vec<f64> = base.iter().map(|&i| state.post_values[i]).collect();
        let db: Vec<f64> = base.windows(2).map(|w| noise.brownian_increments[w[0]..w[1]].iter().sum()).collect();
        Ok((xs, db))
    })?;
    let (xs, db): (Vec<Vec<f64>>, Vec<Vec<f64>>) = paths.into_iter().unzip();
    let steps = ensemble.base_steps;
    let h = problem.horizon / steps as f64;
    let times: Vec<f64> = (0..=steps).map(|j| if j == steps { problem.horizon } else { j as f64 * h }).collect();
    let (fits, mut fallbacks) = backward_sweep(problem, rule, &times, &xs, &db, spec);
    let mut batches = Vec::new();
    if spec.batches >= 2 {
        let n = xs.len();
        for k in 0..spec.batches {
            let (lo, hi) = (k * n / spec.batches, (k + 1) * n / spec.batches);
            let (f, fb) = backward_sweep(problem, rule, &times, &xs[lo..hi], &db[lo..hi], spec);
            fallbacks += fb;
            batches.push(f);
        }
    }
    Ok(RegressionAdjoint { times, fits, batches, ridge_fallbacks: fallbacks })
}

/// Fitted functions of both adjoint equations on every base step.
#[derive(Debug, Clone)]
struct Fits {
    first: Vec<StepFit>,
    second: Vec<StepFit>,
}

fn backward_sweep(
    problem: &ProblemDef,
    rule: &FeedbackControl,
    times: &[f64],
    xs: &[Vec<f64>],
    db: &[Vec<f64>],
    spec: RegressionSpec,
) -> (Fits, usize) {
    let steps = times.len() - 1;
    let h = problem.horizon / steps as f64;
    let sweep = Sweep { rule, times };
    let m = problem.model.as_ref();
    let lam = problem.marks.weights();
    let n = xs.len();
    let mut fallbacks = 0;

    // Terminal functions are exact; represent them through the model directly.
    let mut first: Vec<Option<StepFit>> = vec![None; steps + 1];
    let mut second: Vec<Option<StepFit>> = vec![None; steps + 1];
    let first_next = |fits: &[Option<StepFit>], j: usize, x: f64| match &fits[j] {
        Some(f) => f.value(x),
        None => m.terminal_cost(x).dx,
    };
    let second_next = |fits: &[Option<StepFit>], j: usize, x: f64| match &fits[j] {
        Some(f) => f.value(x),
        None => m.terminal_cost(x).dxx,
    };

    for j in (0..steps).rev() {
        let t = times[j];
        let column: Vec<f64> = xs.iter().map(|p| p[j]).collect();
        let basis = Basis::fit(&column, spec.degree);
        let nb = basis.len();
        let sq = h.sqrt();

        // First order: Y = p_{j+1}(X_{j+1}) on [φ, φ·ΔB/√h].
        let y_first: Vec<f64> = (0..n).map(|k| first_next(&first, j + 1, xs[k][j + 1])).collect();
        let joint = least_squares(n, 2 * nb, spec.ridge, |k, row| {
            basis.eval_into(xs[k][j], &mut row[..nb]);
            let w = db[k][j] / sq;
            for a in 0..nb {
                row[nb + a] = row[a] * w;
            }
            y_first[k]
        });
        fallbacks += joint.fallback as usize;
        let diffusion: Vec<f64> = joint.beta[nb..].iter().map(|b| b / sq).collect();
        let diffusion_cov = joint.cov.view((nb, nb), (nb, nb)).into_owned() / h;
        let fit_q = |x: f64| dot(&basis.eval(x), &diffusion);
        // Jump coefficient read off the next value function: k_e(x) = p(x + c_e) − p(x).
        let k_of = |x: f64, e: usize| {
            let c = m.jump(t, x, sweep.u(j, x), e).value;
            first_next(&first, j + 1, x + c) - first_next(&first, j + 1, x)
        };
        let target: Vec<f64> = (0..n)
            .map(|k| {
                let x = xs[k][j];
                let u = sweep.u(j, x);
                let mut driver = m.drift(t, x, u).dx * y_first[k] + m.diffusion(t, x, u).dx * fit_q(x) + m.running_cost(t, x, u).dx;
                for (e, l) in lam.iter().enumerate() {
                    driver += l * m.jump(t, x, u, e).dx * k_of(x, e);
                }
                y_first[k] + driver * h
            })
            .collect();
        let val = least_squares(n, nb, spec.ridge, |k, row| {
            basis.eval_into(xs[k][j], row);
            target[k]
        });
        fallbacks += val.fallback as usize;
        let fit1 = StepFit { basis: basis.clone(), value: val.beta, diffusion: diffusion.clone(), value_cov: val.cov, diffusion_cov };

        // Second order on the same design, with first-order quantities from the fits just made.
        let y_second: Vec<f64> = (0..n).map(|k| second_next(&second, j + 1, xs[k][j + 1])).collect();
        let joint2 = least_squares(n, 2 * nb, spec.ridge, |k, row| {
            basis.eval_into(xs[k][j], &mut row[..nb]);
            let w = db[k][j] / sq;
            for a in 0..nb {
                row[nb + a] = row[a] * w;
            }
            y_second[k]
        });
        fallbacks += joint2.fallback as usize;
        let diffusion2: Vec<f64> = joint2.beta[nb..].iter().map(|b| b / sq).collect();
        let diffusion2_cov = joint2.cov.view((nb, nb), (nb, nb)).into_owned() / h;
        let target2: Vec<f64> = (0..n)
            .map(|k| {
                let x = xs[k][j];
                let u = sweep.u(j, x);
                let (b, s, f) = (m.drift(t, x, u), m.diffusion(t, x, u), m.running_cost(t, x, u));
                let big_p = y_second[k];
                let big_q = dot(&basis.eval(x), &diffusion2);
                let p = first_next(&first, j + 1, x);
                let q = fit_q(x);
                let mut driver = 2.0 * b.dx * big_p + 2.0 * s.dx * big_q + f.dxx + b.dxx * p + s.dxx * q + big_p * s.dx * s.dx;
                for (e, l) in lam.iter().enumerate() {
                    let c = m.jump(t, x, u, e);
                    let big_k = second_next(&second, j + 1, x + c.value) - second_next(&second, j + 1, x);
                    driver += l * ((c.dx * c.dx + 2.0 * c.dx) * big_k + c.dxx * k_of(x, e) + c.dx * c.dx * big_p);
                }
                big_p + driver * h
            })
            .collect();
        let val2 = least_squares(n, nb, spec.ridge, |k, row| {
            basis.eval_into(xs[k][j], row);
            target2[k]
        });
        fallbacks += val2.fallback as usize;
        let fit2 = StepFit { basis, value: val2.beta, diffusion: diffusion2, value_cov: val2.cov, diffusion_cov: diffusion2_cov };
        first[j] = Some(fit1);
        second[j] = Some(fit2);
    }
    let unwrap = |v: Vec<Option<StepFit>>| v.into_iter().take(steps).map(|f| f.expect("every step fitted")).collect();
    (Fits { first: unwrap(first), second: unwrap(second) }, fallbacks)
}

impl RegressionAdjoint {
    /// Fitted p at a base time index and state.
    pub fn p_at(&self, j: usize, x: f64) -> f64 {
        self.fits.first[j].value(x)
    }

    pub fn q_at(&self, j: usize, x: f64) -> f64 {
        self.fits.first[j].diffusion(x)
    }

    pub fn second_p_at(&self, j: usize, x: f64) -> f64 {
        self.fits.second[j].value(x)
    }

    pub fn base_times(&self) -> &[f64] {
        &self.times
    }

    pub fn along(&self, problem: &ProblemDef, noise: &NoisePath, state: &StatePath, control: &ControlPath) -> (AdjointPath, SecondAdjointPath) {
        let (mut first, mut second) = self.fits.along(problem, noise, state, control, &self.times);
        if self.batches.len() >= 2 {
            let runs: Vec<_> = self.batches.iter().map(|b| b.along(problem, noise, state, control, &self.times)).collect();
            let k = runs.len() as f64;
            let se = |vals: &mut dyn Iterator<Item = f64>| {
                let v: Vec<f64> = vals.collect();
                let m = v.iter().sum::<f64>() / k;
                (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
            };
            for i in 0..first.p.len() {
                first.p_se[i] = se(&mut runs.iter().map(|r| r.0.p[i]));
                first.q_se[i] = se(&mut runs.iter().map(|r| r.0.q[i]));
                second.p_se[i] = se(&mut runs.iter().map(|r| r.1.p[i]));
                second.q_se[i] = se(&mut runs.iter().map(|r| r.1.q[i]));
            }
        }
        (first, second)
    }
}

impl Fits {
    fn along(&self, problem: &ProblemDef, noise: &NoisePath, state: &StatePath, control: &ControlPath, times: &[f64]) -> (AdjointPath, SecondAdjointPath) {
        let m = problem.model.as_ref();
        let g = &noise.grid;
        let n = g.len();
        let marks = problem.marks.len();
        let steps = self.first.len();
        let mut first = empty_path(n, marks);
        let mut second = empty_path(n, marks);
        let value = |fits: &[StepFit], j: usize, x: f64, terminal: &dyn Fn(f64) -> f64| {
            if j >= steps {
                terminal(x)
            } else {
                fits[j].value(x)
            }
        };
        let g1 = |x: f64| m.terminal_cost(x).dx;
        let g2 = |x: f64| m.terminal_cost(x).dxx;
        for i in 0..n - 1 {
            let t = g.time(i);
            let j = g.base_interval_of(i);
            let w = ((t - times[j]) / (times[j + 1] - times[j])).clamp(0.0, 1.0);
            let x = state.post_values[i];
            let blend = |fits: &[StepFit], x: f64, term: &dyn Fn(f64) -> f64| {
                (1.0 - w) * value(fits, j, x, term) + w * value(fits, j + 1, x, term)
            };
            first.p[i] = blend(&self.first, x, &g1);
            first.q[i] = self.first[j].diffusion(x);
            first.p_se[i] = self.first[j].value_se(x);
            first.q_se[i] = self.first[j].diffusion_se(x);
            second.p[i] = blend(&self.second, x, &g2);
            second.q[i] = self.second[j].diffusion(x);
            second.p_se[i] = self.second[j].value_se(x);
            second.q_se[i] = self.second[j].diffusion_se(x);
            let xl = state.left_limits[i];
            for e in 0..marks {
                let c = m.jump(t, xl, control.jump_values[i], e).value;
                first.k[i * marks + e] = blend(&self.first, xl + c, &g1) - blend(&self.first, xl, &g1);
                second.k[i * marks + e] = blend(&self.second, xl + c, &g2) - blend(&self.second, xl, &g2);
            }
        }
        let last = n - 1;
        let xt = state.terminal();
        first.p[last] = g1(xt);
        second.p[last] = g2(xt);
        for e in 0..marks {
            let xl = state.left_limits[last];
            let c = m.jump(g.time(last), xl, control.jump_values[last], e).value;
            first.k[last * marks + e] = g1(xl + c) - g1(xl);
            second.k[last * marks + e] = g2(xl + c) - g2(xl);
        }
        (first, second)
    }
}

// ---------------------------------------------------------------------------
// Duality

/// Both sides of one duality identity, estimated on common noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualityReport {
    pub lhs: Estimate,
    pub rhs: Estimate,
    /// Pathwise LHS − RHS.
    pub difference: Estimate,
    /// 3·SE(difference) + C·Δt.
    pub tolerance: f64,
    pub pass: bool,
}

/// The three identities plus the reduced-expansion gap along one spike.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualitySuite {
    pub px: DualityReport,
    pub py: DualityReport,
    pub pxx: DualityReport,
    /// Ĵ − E∫(pδb + qδσ + δf + ½P(δσ)²)dt.
    pub reduced_gap: Estimate,
}

#[derive(Debug, Clone, Copy, Default)]
struct DualitySample {
    px: (f64, f64),
    py: (f64, f64),
    pxx: (f64, f64),
    j_hat: f64,
    reduced: f64,
}

fn duality_sample(problem: &ProblemDef, adjoint: &AdjointSolution, rule: &FeedbackControl, spec: &SpikeSpec, noise: NoisePath) -> Result<DualitySample> {
    let m = problem.model.as_ref();
    let lam = problem.marks.weights();
    let sp = spike_path(problem, rule, spec, SpikeKind::GraphExcluding, noise)?;
    let (u, ue, x) = (&sp.control, &sp.perturbed_control, &sp.base);
    let xh = solve_first_variation(problem, u, ue, x, &sp.noise)?;
    let yh = solve_second_variation(problem, u, ue, x, &xh, &sp.noise)?;
    let (ad, ad2) = adjoint.along(problem, &sp.noise, x, u);
    let g = &sp.noise.grid;
    let mut s = DualitySample::default();
    let (mut rx, mut ry, mut rxx, mut jh, mut red) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..g.intervals() {
        let (t, xi, a, ae, dt) = (g.time(i), x.post_values[i], u.values[i], ue.values[i], g.dt(i));
        let (b, sg, f) = (m.drift(t, xi, a), m.diffusion(t, xi, a), m.running_cost(t, xi, a));
        let db = m.drift(t, xi, ae).value - b.value;
        let ds = m.diffusion(t, xi, ae).value - sg.value;
        let dsx = m.diffusion(t, xi, ae).dx - sg.dx;
        let df = m.running_cost(t, xi, ae).value - f.value;
        let (p1, q, pp1, qq) = (ad.p[i + 1], ad.q[i], ad2.p[i + 1], ad2.q[i]);
        let (xv, yv) = (xh.post_values[i], yh.post_values[i]);
        let mut ck = 0.0;
        for (e, l) in lam.iter().enumerate() {
            ck += l * m.jump(t, xi, u.compensator_values[i], e).dxx * ad.k(i, e);
        }
        rx += (p1 * db + q * ds - xv * f.dx) * dt;
        ry += (0.5 * b.dxx * p1 * xv * xv + 0.5 * sg.dxx * q * xv * xv - yv * f.dx + dsx * xv * q + 0.5 * ck * xv * xv) * dt;
        rxx += (pp1 * ds * ds - xv * xv * (f.dxx + p1 * b.dxx + q * sg.dxx + ck)
            + 2.0 * pp1 * xv * db
            + 2.0 * qq * xv * ds
            + 2.0 * pp1 * sg.dx * xv * ds)
            * dt;
        jh += (f.dx * (xv + yv) + 0.5 * f.dxx * xv * xv + df) * dt;
        red += (ad.p[i] * db + q * ds + df + 0.5 * ad2.p[i] * ds * ds) * dt;
    }
    let gt = m.terminal_cost(x.terminal());
    let (xt, yt) = (xh.terminal(), yh.terminal());
    let last = g.len() - 1;
    s.px = (ad.p[last] * xt, rx);
    s.py = (ad.p[last] * yt, ry);
    s.pxx = (ad2.p[last] * xt * xt, rxx);
    s.j_hat = jh + gt.dx * (xt + yt) + 0.5 * gt.dxx * xt * xt;
    s.reduced = red;
    Ok(s)
}

fn report(pairs: &[(f64, f64)], allowance: f64) -> DualityReport {
    let lhs = Estimate::from_samples(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let rhs = Estimate::from_samples(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let difference = Estimate::from_samples(&pairs.iter().map(|p| p.0 - p.1).collect::<Vec<_>>());
    let tolerance = 3.0 * difference.se + allowance;
    DualityReport { lhs, rhs, difference, tolerance, pass: difference.mean.abs() <= tolerance }
}

/// Evaluates the three duality identities on one spike. `c_dt` is the
/// discretization allowance C·Δt added to three standard errors.
pub fn duality_suite(
    problem: &ProblemDef,
    rule: &FeedbackControl,
    adjoint: &AdjointSolution,
    spec: &SpikeSpec,
    ensemble: &Ensemble,
    c_dt: f64,
) -> Result<DualitySuite> {
    spec.check(problem)?;
    let samples = ensemble.map(problem, |_, noise| duality_sample(problem, adjoint, rule, spec, noise.clone()))?;
    let col = |f: fn(&DualitySample) -> (f64, f64)| samples.iter().map(f).collect::<Vec<_>>();
    Ok(DualitySuite {
        px: report(&col(|s| s.px), c_dt),
        py: report(&col(|s| s.py), c_dt),
        pxx: report(&col(|s| s.pxx), c_dt),
        reduced_gap: Estimate::from_samples(&samples.iter().map(|s| s.j_hat - s.reduced).collect::<Vec<_>>()),
    })
}

pub fn duality_check_px(problem: &ProblemDef, rule: &FeedbackControl, adjoint: &AdjointSolution, spec: &SpikeSpec, ensemble: &Ensemble, c_dt: f64) -> Result<DualityReport> {
    Ok(duality_suite(problem, rule, adjoint, spec, ensemble, c_dt)?.px)
}

pub fn duality_check_py(problem: &ProblemDef, rule: &FeedbackControl, adjoint: &AdjointSolution, spec: &SpikeSpec, ensemble: &Ensemble, c_dt: f64) -> Result<DualityReport> {
    Ok(duality_suite(problem, rule, adjoint, spec, ensemble, c_dt)?.py)
}

pub fn duality_check_pxx(problem: &ProblemDef, rule: &FeedbackControl, adjoint: &AdjointSolution, spec: &SpikeSpec, ensemble: &Ensemble, c_dt: f64) -> Result<DualityReport> {
    Ok(duality_suite(problem, rule, adjoint, spec, ensemble, c_dt)?.pxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::MarkSpace;
    use crate::problem::{AffineJump, ControlSet};
    use std::sync::Arc;

    fn problem(form: AffineForm, x0: f64, rate: f64) -> ProblemDef {
        ProblemDef::new("t", x0, 1.0, MarkSpace::single(rate).unwrap(), ControlSet::Interval { lo: -1.0, hi: 1.0, points: 5 }, Arc::new(form))
    }

    fn deterministic(g: f64) -> ProblemDef {
        let form = AffineForm { bu: 1.0, s0: 0.4, d: 0.3, jumps: vec![AffineJump { eta: 0.5, c0: 0.2, ..Default::default() }], f1: 1.0, r: 0.5, g1: g, ..Default::default() };
        problem(form, 0.0, 2.0)
    }

    #[test]
    fn deterministic_case_closed_form() {
        let p = deterministic(1.5);
        let sol = solve_adjoint_closed_form(&p, &FeedbackControl::Constant(0.2), 64).unwrap();
        for (t, b) in sol.times.iter().zip(&sol.beta) {
            assert!((b - (1.5 + 1.0 - t)).abs() < 1e-12);
        }
        assert!(sol.alpha.iter().all(|&a| a == 0.0));
        let noise = Ensemble::new(1, 1, 64).noise(&p, 0).unwrap();
        let (x, u) = solve_with_feedback(&p, &FeedbackControl::Constant(0.2), &noise).unwrap();
        let (ad, ad2) = sol.along(&p, &noise, &x, &u);
        assert!(ad.q.iter().chain(&ad.k).all(|&v| v == 0.0));
        assert!(ad2.p.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_square_terminal_cost() {
        let form = AffineForm { jumps: vec![AffineJump::default()], gt: 0.5, ..Default::default() };
        let p = problem(form, 0.7, 1.0);
        let sol = solve_adjoint_closed_form(&p, &FeedbackControl::Constant(0.0), 16).unwrap();
        let noise = Ensemble::new(1, 1, 16).noise(&p, 0).unwrap();
        let (x, u) = solve_with_feedback(&p, &FeedbackControl::Constant(0.0), &noise).unwrap();
        let (ad, ad2) = sol.along(&p, &noise, &x, &u);
        assert!(ad.p.iter().all(|&v| (v - 0.7).abs() < 1e-12));
        assert!(ad2.p.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn non_affine_is_unsupported() {
        let p = deterministic(1.0);
        assert!(matches!(
            solve_adjoint_closed_form(&p, &FeedbackControl::Threshold { theta: 0.0, below: 1.0, above: -1.0 }, 8),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn riccati_terminal_value_is_stationary() {
        // With gt equal to the stationary root, α stays at 2·gt.
        let (a, b, c, d, gamma, lam, qf, r) = (0.1, 1.0, 0.2, 0.4, 0.3, 2.0, 1.0, 0.5);
        let k = 2.0 * a + c * c + lam * gamma * gamma;
        // Solve 0 = S k + qf − S²(b + cd)²/(r + S d²) by bisection.
        let phi = |s: f64| s * k + qf - s * s * (b + c * d).powi(2) / (r + s * d * d);
        let (mut lo, mut hi) = (0.0, 100.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if phi(mid) > 0.0 {
                lo = mid
            } else {
                hi = mid
            }
        }
        let s = 0.5 * (lo + hi);
        let kappa = s * (b + c * d) / (r + s * d * d);
        let form = AffineForm { a, bu: b, c, d, jumps: vec![AffineJump { gamma, ..Default::default() }], qf, r, gt: s, ..Default::default() };
        let p = problem(form, 1.0, lam);
        let sol = solve_adjoint_closed_form(&p, &FeedbackControl::linear(kappa), 100).unwrap();
        assert!(sol.alpha.iter().all(|al| (al - 2.0 * s).abs() < 1e-8), "{:?}", &sol.alpha[..3]);
    }

    #[test]
    fn regression_recovers_deterministic_adjoint() {
        let p = deterministic(1.5);
        let ens = Ensemble::new(7, 2000, 16);
        let rule = FeedbackControl::Constant(0.2);
        let reg = solve_adjoint_regression(&p, &rule, &ens, RegressionSpec::default()).unwrap();
        for j in 0..16 {
            let t = j as f64 / 16.0;
            for x in [-0.3, 0.0, 0.4] {
                assert!((reg.p_at(j, x) - (1.5 + 1.0 - t)).abs() < 1e-6, "j={j} x={x} p={}", reg.p_at(j, x));
                assert!(reg.q_at(j, x).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_forcing_duality_is_zero() {
        let p = deterministic(1.0);
        let rule = FeedbackControl::Constant(0.2);
        let sol = AdjointSolution::ClosedForm(solve_adjoint_closed_form(&p, &rule, 32).unwrap());
        let spec = SpikeSpec::constant(0.25, 0.0, 1.0);
        let s = duality_suite(&p, &rule, &sol, &spec, &Ensemble::new(1, 20, 32), 0.0).unwrap();
        for r in [s.px, s.py, s.pxx] {
            assert_eq!(r.lhs.mean, 0.0);
            assert_eq!(r.rhs.mean, 0.0);
        }
    }
}
