//! Registry of problem instances with reference controls computed by
//! independent numerical oracles (see `examples/oracles.rs`).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::driver::MarkSpace;
use crate::error::{invalid, Error, Result};
use crate::forward::{estimate_cost, Ensemble};
use crate::problem::{AffineForm, AffineJump, ControlSet, Dynamics, FeedbackControl, Jet, ProblemDef};
use crate::stats::{golden_section, Estimate};

/// How a stored reference number was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub seed: u64,
    pub paths: usize,
    pub base_steps: usize,
    pub method: String,
}

#[derive(Debug, Clone)]
pub struct BenchmarkInstance {
    pub name: String,
    pub description: String,
    pub problem: ProblemDef,
    pub reference_control: FeedbackControl,
    /// Expected cost of the reference control, with its Monte Carlo error.
    pub reference_cost: Estimate,
    pub oracle: OracleRecord,
}

/// Parameters of dX = (aX + bu)dt + (cX + du)dB + ∫(γX₋ + ηu)Ñ(dt,de),
/// J = E[∫(qf·X² + r·u²)dt + gT·X_T²].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LqParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub gamma: f64,
    pub eta: f64,
    pub qf: f64,
    pub r: f64,
    pub gt: f64,
    pub rate: f64,
    pub horizon: f64,
    pub x0: f64,
}

impl Default for LqParams {
    fn default() -> Self {
        Self { a: -0.2, b: 2.4, c: 0.3, d: 0.25, gamma: -0.6, eta: -1.0, qf: 1.0, r: 0.5, gt: 1.0, rate: 3.2, horizon: 1.0, x0: 1.0 }
    }
}

/// Bound on |u| for the LQ instances; large enough that the reference
/// feedback never reaches it on simulated paths.
pub const LQ_CONTROL_BOUND: f64 = 1000.0;

impl LqParams {
    pub fn check(&self) -> Result<()> {
        let all = [self.a, self.b, self.c, self.d, self.gamma, self.eta, self.qf, self.r, self.gt, self.rate, self.horizon, self.x0];
        if all.iter().any(|v| !v.is_finite()) {
            return invalid("LQ parameters must be finite");
        }
        if !(self.r > 0.0) || self.qf < 0.0 || self.gt < 0.0 || self.rate < 0.0 || !(self.horizon > 0.0) {
            return invalid("LQ parameters need r > 0, qf ≥ 0, gT ≥ 0, Λ ≥ 0, T > 0");
        }
        Ok(())
    }

    pub fn form(&self) -> AffineForm {
        AffineForm {
            a: self.a,
            bu: self.b,
            c: self.c,
            d: self.d,
            jumps: if self.rate > 0.0 { vec![AffineJump { gamma: self.gamma, eta: self.eta, c0: 0.0 }] } else { Vec::new() },
            qf: self.qf,
            r: self.r,
            gt: self.gt,
            ..Default::default()
        }
    }

    pub fn problem(&self, name: &str) -> Result<ProblemDef> {
        self.check()?;
        let marks = MarkSpace::single(self.rate)?;
        Ok(ProblemDef::new(
            name,
            self.x0,
            self.horizon,
            marks,
            ControlSet::Interval { lo: -LQ_CONTROL_BOUND, hi: LQ_CONTROL_BOUND, points: 20_001 },
            Arc::new(self.form()),
        ))
    }

    /// Right side of the Riccati equation for S (with dS/dt = −rhs) when the
    /// control does not enter the jump coefficient.
    fn riccati_rhs(&self, s: f64) -> f64 {
        let k = 2.0 * self.a + self.c * self.c + self.rate * self.gamma * self.gamma;
        s * k + self.qf - s * s * (self.b + self.c * self.d).powi(2) / (self.r + s * self.d * self.d)
    }

    /// Positive root of the stationary Riccati equation (η = 0 only).
    pub fn stationary_riccati(&self) -> Result<f64> {
        if self.eta != 0.0 {
            return Err(Error::Unsupported("Riccati oracle needs η = 0".into()));
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        while self.riccati_rhs(hi) > 0.0 {
            hi *= 2.0;
            if hi > 1e12 {
                return invalid("no positive stationary Riccati root");
            }
        }
        if self.riccati_rhs(lo) <= 0.0 {
            return Ok(0.0);
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.riccati_rhs(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    pub fn riccati_gain(&self, s: f64) -> f64 {
        s * (self.b + self.c * self.d) / (self.r + s * self.d * self.d)
    }

    /// Time-varying optimal gain κ(t) from the Riccati ODE (η = 0), RK4 on
    /// `steps` intervals and linear interpolation in between.
    pub fn riccati_feedback(&self, steps: usize) -> Result<FeedbackControl> {
        if self.eta != 0.0 {
            return Err(Error::Unsupported("Riccati oracle needs η = 0".into()));
        }
        let h = self.horizon / steps as f64;
        let mut s = vec![self.gt; steps + 1];
        for j in (0..steps).rev() {
            let y = s[j + 1];
            let f = |y: f64| self.riccati_rhs(y);
            let k1 = f(y);
            let k2 = f(y + 0.5 * h * k1);
            let k3 = f(y + 0.5 * h * k2);
            let k4 = f(y + h * k3);
            s[j] = y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        let gains: Vec<f64> = s.iter().map(|&s| self.riccati_gain(s)).collect();
        let horizon = self.horizon;
        Ok(FeedbackControl::Custom(Arc::new(move |t, x| {
            let pos = (t / horizon * steps as f64).clamp(0.0, steps as f64);
            let j = (pos.floor() as usize).min(steps - 1);
            let w = pos - j as f64;
            -(gains[j] * (1.0 - w) + gains[j + 1] * w) * x
        })))
    }
}

/// Best time-constant gain by golden-section search on common random numbers.
pub fn gain_search(problem: &ProblemDef, ensemble: &Ensemble, lo: f64, hi: f64, tol: f64) -> Result<(f64, Estimate)> {
    let mut failure = None;
    let kappa = golden_section(
        |k| match estimate_cost(problem, &FeedbackControl::linear(k), ensemble) {
            Ok(e) => e.mean,
            Err(e) => {
                failure.get_or_insert(e);
                f64::INFINITY
            }
        },
        lo,
        hi,
        tol,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((kappa, estimate_cost(problem, &FeedbackControl::linear(kappa), ensemble)?))
}

// ---------------------------------------------------------------------------
// Registered instances. Stored oracle numbers come from `examples/oracles.rs`.

pub const LQ_JUMP_GAIN: f64 = 0.941133;
pub const LQ_JUMP_COST: (f64, f64) = (0.325589, 0.000568);
pub const LQ_JUMP_ORACLE: (u64, usize, usize) = (20_240_101, 100_000, 256);

/// Paths and base steps of the search run for non-default LQ parameters.
pub const LQ_SEARCH_ENSEMBLE: (usize, usize) = (10_000, 128);

/// The default parameters use the stored oracle; any other parameters run
/// the gain search on the smaller `LQ_SEARCH_ENSEMBLE`.
pub fn lq_jump(params: LqParams) -> Result<BenchmarkInstance> {
    let problem = params.problem("lq_jump")?;
    let (gain, cost, (seed, paths, steps)) = if params == LqParams::default() {
        (LQ_JUMP_GAIN, Estimate { mean: LQ_JUMP_COST.0, se: LQ_JUMP_COST.1, n: LQ_JUMP_ORACLE.1 }, LQ_JUMP_ORACLE)
    } else {
        let ens = Ensemble::new(LQ_JUMP_ORACLE.0, LQ_SEARCH_ENSEMBLE.0, LQ_SEARCH_ENSEMBLE.1);
        let (k, c) = gain_search(&problem, &ens, -1.0, 3.0, 1e-3)?;
        (k, c, (ens.master_seed, ens.paths, ens.base_steps))
    };
    Ok(BenchmarkInstance {
        name: "lq_jump".into(),
        description: "scalar LQ with affine jumps; control enters drift, diffusion and jump size".into(),
        problem,
        reference_control: FeedbackControl::linear(gain),
        reference_cost: cost,
        oracle: OracleRecord {
            seed,
            paths,
            base_steps: steps,
            method: "golden-section search over time-constant gains, common random numbers".into(),
        },
    })
}

pub const LQ_JUMP_MP_COST: (f64, f64) = (0.331427, 0.000472);

/// LQ with η = 0 and gT at the stationary Riccati root, so the constant
/// Riccati gain is exactly optimal.
pub fn lq_jump_mp_params() -> Result<LqParams> {
    let mut p = LqParams { eta: 0.0, ..LqParams::default() };
    p.gt = p.stationary_riccati()?;
    Ok(p)
}

pub fn lq_jump_mp() -> Result<BenchmarkInstance> {
    let params = lq_jump_mp_params()?;
    let s = params.gt;
    Ok(BenchmarkInstance {
        name: "lq_jump_mp".into(),
        description: "LQ with state-only jumps and stationary terminal weight; constant Riccati gain is optimal".into(),
        problem: params.problem("lq_jump_mp")?,
        reference_control: FeedbackControl::linear(params.riccati_gain(s)),
        reference_cost: Estimate { mean: LQ_JUMP_MP_COST.0, se: LQ_JUMP_MP_COST.1, n: LQ_JUMP_ORACLE.1 },
        oracle: OracleRecord {
            seed: LQ_JUMP_ORACLE.0,
            paths: LQ_JUMP_ORACLE.1,
            base_steps: LQ_JUMP_ORACLE.2,
            method: "stationary Riccati root by bisection; cost by Monte Carlo".into(),
        },
    })
}

/// b = u, σ = s0 + s1·u·x, c = γx, f = g = x², U = {−1, +1}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BangBang {
    pub s0: f64,
    pub s1: f64,
    pub gamma: f64,
}

impl Default for BangBang {
    fn default() -> Self {
        Self { s0: 0.3, s1: 0.4, gamma: 0.3 }
    }
}

impl Dynamics for BangBang {
    fn drift(&self, _t: f64, _x: f64, u: f64) -> Jet {
        Jet::new(u, 0.0, 0.0)
    }
    fn diffusion(&self, _t: f64, x: f64, u: f64) -> Jet {
        Jet::new(self.s0 + self.s1 * u * x, self.s1 * u, 0.0)
    }
    fn jump(&self, _t: f64, x: f64, _u: f64, _mark: usize) -> Jet {
        Jet::new(self.gamma * x, self.gamma, 0.0)
    }
    fn running_cost(&self, _t: f64, x: f64, _u: f64) -> Jet {
        Jet::new(x * x, 2.0 * x, 2.0)
    }
    fn terminal_cost(&self, x: f64) -> Jet {
        Jet::new(x * x, 2.0 * x, 2.0)
    }
}

pub const BANGBANG_RATE: f64 = 2.0;
pub const BANGBANG_COST: (f64, f64) = (0.006235, 0.000021);

pub fn threshold_policy(theta: f64) -> FeedbackControl {
    FeedbackControl::Threshold { theta, below: 1.0, above: -1.0 }
}

pub fn bangbang(params: BangBang) -> Result<BenchmarkInstance> {
    let problem = ProblemDef::new("bangbang", 0.0, 1.0, MarkSpace::single(BANGBANG_RATE)?, ControlSet::Finite(vec![-1.0, 1.0]), Arc::new(params));
    Ok(BenchmarkInstance {
        name: "bangbang".into(),
        description: "two-point control set, control-dependent diffusion, symmetric about 0".into(),
        problem,
        reference_control: threshold_policy(0.0),
        reference_cost: Estimate { mean: BANGBANG_COST.0, se: BANGBANG_COST.1, n: LQ_JUMP_ORACLE.1 },
        oracle: OracleRecord {
            seed: LQ_JUMP_ORACLE.0,
            paths: LQ_JUMP_ORACLE.1,
            base_steps: LQ_JUMP_ORACLE.2,
            method: "threshold fixed at 0 by symmetry; golden-section search confirms".into(),
        },
    })
}

/// State-independent coefficients: p_t = G + (T − t), q = k = 0.
pub fn deterministic_adjoint(g: f64) -> Result<BenchmarkInstance> {
    let form = AffineForm {
        bu: 1.0,
        d: 0.3,
        s0: 0.4,
        jumps: vec![AffineJump { gamma: 0.0, eta: 0.5, c0: 0.2 }],
        f1: 1.0,
        r: 0.5,
        g1: g,
        ..Default::default()
    };
    let problem = ProblemDef::new("deterministic_adjoint", 0.0, 1.0, MarkSpace::single(2.0)?, ControlSet::Interval { lo: -1.0, hi: 1.0, points: 41 }, Arc::new(form));
    let rule = FeedbackControl::Constant(0.2);
    // J = E∫(X + r u²)dt + G·X_T with E X_t = u·t, the jump term being compensated.
    let mean = 0.5 * 0.2 * 0.2 + 0.2 * 0.5 + g * 0.2;
    Ok(BenchmarkInstance {
        name: "deterministic_adjoint".into(),
        description: "state-independent coefficients with linear costs; adjoint known in closed form".into(),
        problem,
        reference_control: rule,
        reference_cost: Estimate { mean, se: 0.0, n: 0 },
        oracle: OracleRecord { seed: 0, paths: 0, base_steps: 0, method: "hand integration".into() },
    })
}

/// b = −x + 0.5 sin x + u, σ = 0.3 + 0.8u + 0.2u sin x,
/// c = 0.1x + 0.15 sin x + ηu, f = x² + 0.5u², g = x², U = [−1, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonlinearJump {
    pub eta: f64,
}

impl Dynamics for NonlinearJump {
    fn drift(&self, _t: f64, x: f64, u: f64) -> Jet {
        Jet::new(-x + 0.5 * x.sin() + u, -1.0 + 0.5 * x.cos(), -0.5 * x.sin())
    }
    fn diffusion(&self, _t: f64, x: f64, u: f64) -> Jet {
        Jet::new(0.3 + 0.8 * u + 0.2 * u * x.sin(), 0.2 * u * x.cos(), -0.2 * u * x.sin())
    }
    fn jump(&self, _t: f64, x: f64, u: f64, _mark: usize) -> Jet {
        Jet::new(0.1 * x + 0.15 * x.sin() + self.eta * u, 0.1 + 0.15 * x.cos(), -0.15 * x.sin())
    }
    fn running_cost(&self, _t: f64, x: f64, u: f64) -> Jet {
        Jet::new(x * x + 0.5 * u * u, 2.0 * x, 2.0)
    }
    fn terminal_cost(&self, x: f64) -> Jet {
        Jet::new(x * x, 2.0 * x, 2.0)
    }
}

pub fn clamped_linear(gain: f64, lo: f64, hi: f64) -> FeedbackControl {
    FeedbackControl::Custom(Arc::new(move |_, x| (-gain * x).clamp(lo, hi)))
}

pub fn nonlinear_jump() -> Result<BenchmarkInstance> {
    let problem = ProblemDef::new(
        "nonlinear_jump",
        0.5,
        1.0,
        MarkSpace::single(4.0)?,
        ControlSet::Interval { lo: -1.0, hi: 1.0, points: 41 },
        Arc::new(NonlinearJump { eta: 0.5 }),
    );
    Ok(BenchmarkInstance {
        name: "nonlinear_jump".into(),
        description: "smooth nonlinear coefficients with nonzero second derivatives; used for expansion orders".into(),
        problem,
        reference_control: clamped_linear(0.5, -1.0, 1.0),
        reference_cost: Estimate { mean: f64::NAN, se: f64::NAN, n: 0 },
        oracle: OracleRecord { seed: 0, paths: 0, base_steps: 0, method: "none; the control is a fixed test input".into() },
    })
}

/// Names and one-line descriptions of every registered instance.
pub fn list_benchmarks() -> Vec<(&'static str, &'static str)> {
    vec![
        ("lq_jump", "scalar LQ with affine jumps; control enters drift, diffusion and jump size"),
        ("lq_jump_mp", "LQ with state-only jumps; constant Riccati gain is exactly optimal"),
        ("bangbang", "two-point control set with control-dependent diffusion"),
        ("deterministic_adjoint", "state-independent coefficients; closed-form adjoint"),
        ("nonlinear_jump", "nonlinear smooth coefficients for expansion-order studies"),
    ]
}

pub fn benchmark(name: &str) -> Result<BenchmarkInstance> {
    match name {
        "lq_jump" => lq_jump(LqParams::default()),
        "lq_jump_mp" => lq_jump_mp(),
        "bangbang" => bangbang(BangBang::default()),
        "deterministic_adjoint" => deterministic_adjoint(1.5),
        "nonlinear_jump" => nonlinear_jump(),
        other => Err(Error::UnknownBenchmark(other.to_string())),
    }
}
