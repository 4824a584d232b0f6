//! Pathwise integrals against B, N and Ñ on a refined grid.
//!
//! Evaluation convention: the value of an integrand stored at node i is the
//! one used on the step leaving t_i (left point, predictable) and, when t_i
//! is a jump node, the one charged to the jump at t_i (progressive).
//! The dual predictable projection is never computed here. Callers pass a
//! predictable version `h_pred`; only the values of `h` on the jump graph
//! enter the projection, so `h` and `h_pred` may differ off the graph.

use serde::{Deserialize, Serialize};

use crate::driver::{MarkSpace, NoisePath, TimeGrid};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridIntegrand {
    pub values: Vec<f64>,
}

impl GridIntegrand {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn constant(value: f64, len: usize) -> Self {
        Self { values: vec![value; len] }
    }
}

/// H(t_i, e) stored row-major by node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkedIntegrand {
    values: Vec<f64>,
    marks: usize,
}

impl MarkedIntegrand {
    pub fn from_fn(grid: &TimeGrid, marks: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len() * marks);
        for i in 0..grid.len() {
            for e in 0..marks {
                values.push(f(i, e));
            }
        }
        Self { values, marks }
    }

    pub fn constant(grid: &TimeGrid, marks: usize, value: f64) -> Self {
        Self::from_fn(grid, marks, |_, _| value)
    }

    pub fn get(&self, node: usize, mark: usize) -> f64 {
        self.values[node * self.marks + mark]
    }

    pub fn marks(&self) -> usize {
        self.marks
    }

    pub fn nodes(&self) -> usize {
        if self.marks == 0 {
            0
        } else {
            self.values.len() / self.marks
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { values: self.values.iter().map(|&v| f(v)).collect(), marks: self.marks }
    }

    fn check(&self, grid: &TimeGrid, marks: usize) -> Result<()> {
        if self.marks != marks || self.values.len() != grid.len() * marks {
            return invalid(format!(
                "marked integrand has shape {}x{}, grid needs {}x{}",
                self.nodes(),
                self.marks,
                grid.len(),
                marks
            ));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return invalid("marked integrand has non-finite values");
        }
        Ok(())
    }
}

/// Càdlàg path sampled at the grid nodes; starts at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegralPath {
    pub values: Vec<f64>,
}

impl IntegralPath {
    pub fn terminal(&self) -> f64 {
        *self.values.last().expect("non-empty path")
    }

    pub fn sub(&self, other: &IntegralPath) -> IntegralPath {
        IntegralPath { values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect() }
    }
}

/// Σ_{i<k} H(t_i)·ΔB_i at every node t_k.
pub fn ito_integral(h: &GridIntegrand, noise: &NoisePath) -> Result<IntegralPath> {
    if h.values.len() != noise.grid.len() {
        return invalid(format!(
            "integrand length {} does not match grid length {}",
            h.values.len(),
            noise.grid.len()
        ));
    }
    let mut values = Vec::with_capacity(h.values.len());
    let mut acc = 0.0;
    values.push(0.0);
    for (hv, dw) in h.values.iter().zip(&noise.brownian_increments) {
        acc += hv * dw;
        values.push(acc);
    }
    Ok(IntegralPath { values })
}

/// ∫∫ H N(ds, de): sum of H(T_n, e_n) over jumps with T_n ≤ t.
pub fn jump_integral_n(h: &MarkedIntegrand, noise: &NoisePath) -> Result<IntegralPath> {
    let marks = h.marks();
    h.check(&noise.grid, marks)?;
    let mut values = vec![0.0; noise.grid.len()];
    let mut acc = 0.0;
    let mut events = noise.jump_events.iter().peekable();
    for (i, v) in values.iter_mut().enumerate() {
        while let Some(ev) = events.peek() {
            if ev.index != i {
                break;
            }
            if ev.mark >= marks {
                return invalid(format!("jump mark {} outside integrand marks {}", ev.mark, marks));
            }
            acc += h.get(i, ev.mark);
            events.next();
        }
        *v = acc;
    }
    Ok(IntegralPath { values })
}

/// ∫_0^t ∫_E H_pred λ(de) ds as a left Riemann sum on the grid.
pub fn compensator(h_pred: &MarkedIntegrand, mark_space: &MarkSpace, grid: &TimeGrid) -> Result<IntegralPath> {
    h_pred.check(grid, mark_space.len())?;
    let mut values = Vec::with_capacity(grid.len());
    let mut acc = 0.0;
    values.push(0.0);
    for i in 0..grid.intervals() {
        let rate: f64 = (0..mark_space.len()).map(|e| h_pred.get(i, e) * mark_space.weight(e)).sum();
        acc += rate * grid.dt(i);
        values.push(acc);
    }
    Ok(IntegralPath { values })
}

/// ∫∫ H Ñ(ds, de) = ∫∫ H N(ds, de) − compensator(H_pred).
pub fn compensated_jump_integral(
    h: &MarkedIntegrand,
    h_pred: &MarkedIntegrand,
    noise: &NoisePath,
    mark_space: &MarkSpace,
) -> Result<IntegralPath> {
    h.check(&noise.grid, mark_space.len())?;
    h_pred.check(&noise.grid, mark_space.len())?;
    let n = jump_integral_n(h, noise)?;
    let a = compensator(h_pred, mark_space, &noise.grid)?;
    Ok(n.sub(&a))
}

/// Δ(H·Ñ)_t = ∫_E H N({t}, de).
pub fn jump_of_integral(h: &MarkedIntegrand, noise: &NoisePath, t: f64) -> Result<f64> {
    let Some(i) = noise.grid.index_of(t) else {
        return invalid(format!("time {t} is not a grid node"));
    };
    Ok(match noise.grid.mark_at(i) {
        Some(e) => h.get(i, e),
        None => 0.0,
    })
}

/// [H·Ñ, H·Ñ]_t = ∫∫ H² N(ds, de).
pub fn bracket_of_jump_integral(h: &MarkedIntegrand, noise: &NoisePath) -> Result<IntegralPath> {
    h.check(&noise.grid, h.marks())?;
    let mut values = Vec::with_capacity(noise.grid.len());
    let mut acc = 0.0;
    for i in 0..noise.grid.len() {
        if let Some(e) = noise.grid.mark_at(i) {
            let v = h.get(i, e);
            acc += v * v;
        }
        values.push(acc);
    }
    Ok(IntegralPath { values })
}

/// Discrete ∫ H dt with left-point evaluation.
pub fn time_integral(h: &GridIntegrand, grid: &TimeGrid) -> f64 {
    (0..grid.intervals()).map(|i| h.values[i] * grid.dt(i)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::{refine_grid, sample_noise};
    use crate::rng::SeedSpec;

    fn fixed_noise() -> (NoisePath, MarkSpace) {
        let marks = MarkSpace::new([("a", 1.0), ("b", 2.0)]).unwrap();
        let grid = refine_grid(&[0.0, 0.25, 0.5, 0.75, 1.0], &[(0.1, 0), (0.6, 1), (0.75, 0)]).unwrap();
        let jump_events = [(0.1, 0), (0.6, 1), (0.75, 0)]
            .iter()
            .map(|&(time, mark)| crate::driver::JumpEvent { time, mark, index: grid.index_of(time).unwrap() })
            .collect();
        let brownian_increments = (0..grid.intervals()).map(|i| 0.1 * (i as f64 + 1.0)).collect();
        (NoisePath { grid, brownian_increments, jump_events }, marks)
    }

    #[test]
    fn ito_of_zero_and_one() {
        let (noise, _) = fixed_noise();
        let zero = ito_integral(&GridIntegrand::constant(0.0, noise.grid.len()), &noise).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));
        let one = ito_integral(&GridIntegrand::constant(1.0, noise.grid.len()), &noise).unwrap();
        assert_eq!(one.values, noise.brownian_path());
        assert!(ito_integral(&GridIntegrand::constant(1.0, 2), &noise).is_err());
    }

    #[test]
    fn counting_and_mark_constants() {
        let (noise, marks) = fixed_noise();
        let ones = MarkedIntegrand::constant(&noise.grid, marks.len(), 1.0);
        assert_eq!(jump_integral_n(&ones, &noise).unwrap().terminal(), 3.0);
        let per_mark = MarkedIntegrand::from_fn(&noise.grid, 2, |_, e| [5.0, -2.0][e]);
        assert_eq!(jump_integral_n(&per_mark, &noise).unwrap().terminal(), 5.0 - 2.0 + 5.0);
        let off_graph = MarkedIntegrand::from_fn(&noise.grid, 2, |i, _| if noise.grid.is_jump(i) { 0.0 } else { 7.0 });
        assert!(jump_integral_n(&off_graph, &noise).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn compensator_of_one_is_lambda_t() {
        let (noise, marks) = fixed_noise();
        let ones = MarkedIntegrand::constant(&noise.grid, 2, 1.0);
        let a = compensator(&ones, &marks, &noise.grid).unwrap();
        for (v, t) in a.values.iter().zip(noise.grid.times()) {
            assert!((v - 3.0 * t).abs() < 1e-12);
        }
    }

    #[test]
    fn compensator_step_function_closed_form() {
        // H = 2 on [0, 0.5), 0 afterwards; one mark of rate 1.5 → A_T = 2·0.5·1.5.
        let marks = MarkSpace::single(1.5).unwrap();
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let h = MarkedIntegrand::from_fn(&grid, 1, |i, _| if grid.time(i) < 0.5 { 2.0 } else { 0.0 });
        let a = compensator(&h, &marks, &grid).unwrap();
        assert!((a.terminal() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn compensated_integral_rejects_bad_shape() {
        let (noise, marks) = fixed_noise();
        let h = MarkedIntegrand::constant(&noise.grid, 2, 1.0);
        let short = MarkedIntegrand::constant(&noise.grid, 1, 1.0);
        assert!(compensated_jump_integral(&h, &short, &noise, &marks).is_err());
    }

    #[test]
    fn graph_indicator_matches_constant_one() {
        let (noise, marks) = fixed_noise();
        let ones = MarkedIntegrand::constant(&noise.grid, 2, 1.0);
        let graph = MarkedIntegrand::from_fn(&noise.grid, 2, |i, _| if noise.grid.is_jump(i) { 1.0 } else { 0.0 });
        let a = compensated_jump_integral(&ones, &ones, &noise, &marks).unwrap();
        let b = compensated_jump_integral(&graph, &ones, &noise, &marks).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vanishing_on_graph_gives_zero() {
        let (noise, marks) = fixed_noise();
        let h = MarkedIntegrand::from_fn(&noise.grid, 2, |i, _| if noise.grid.is_jump(i) { 0.0 } else { 9.0 });
        let zero = MarkedIntegrand::constant(&noise.grid, 2, 0.0);
        let z = compensated_jump_integral(&h, &zero, &noise, &marks).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn jump_reads_and_errors() {
        let (noise, _) = fixed_noise();
        let h = MarkedIntegrand::from_fn(&noise.grid, 2, |_, e| [3.0, 4.0][e]);
        assert_eq!(jump_of_integral(&h, &noise, 0.1).unwrap(), 3.0);
        assert_eq!(jump_of_integral(&h, &noise, 0.6).unwrap(), 4.0);
        assert_eq!(jump_of_integral(&h, &noise, 0.25).unwrap(), 0.0);
        assert!(jump_of_integral(&h, &noise, 0.33).is_err());
    }

    #[test]
    fn bracket_scaling() {
        let (noise, _) = fixed_noise();
        let two = MarkedIntegrand::constant(&noise.grid, 2, 2.0);
        let one = MarkedIntegrand::constant(&noise.grid, 2, 1.0);
        let b2 = bracket_of_jump_integral(&two, &noise).unwrap();
        let n = jump_integral_n(&one, &noise).unwrap();
        for (x, y) in b2.values.iter().zip(&n.values) {
            assert_eq!(*x, 4.0 * y);
        }
    }

    #[test]
    fn zero_intensity_path_has_empty_jump_sums() {
        let noise = sample_noise(SeedSpec::new(3, 0), &MarkSpace::empty(), 1.0, 8).unwrap();
        let h = MarkedIntegrand::constant(&noise.grid, 0, 1.0);
        assert_eq!(bracket_of_jump_integral(&h, &noise).unwrap().terminal(), 0.0);
    }
}
