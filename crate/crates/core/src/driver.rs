//! Brownian increments and a finite-activity Poisson random measure on a
//! time grid that contains every jump time as a node.

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::SeedSpec;

/// Finite mark set with intensity weights λ_e (events per unit time).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkSpace {
    names: Vec<String>,
    weights: Vec<f64>,
    total_mass: f64,
}

impl MarkSpace {
    pub fn new<S: Into<String>>(marks: impl IntoIterator<Item = (S, f64)>) -> Result<Self> {
        let (names, weights): (Vec<String>, Vec<f64>) =
            marks.into_iter().map(|(n, w)| (n.into(), w)).unzip();
        for (n, &w) in names.iter().zip(&weights) {
            if !(w.is_finite() && w > 0.0) {
                return invalid(format!("mark `{n}` has non-positive or non-finite weight {w}"));
            }
        }
        let total_mass = weights.iter().sum();
        Ok(Self { names, weights, total_mass })
    }

    /// No marks, Λ = 0.
    pub fn empty() -> Self {
        Self { names: Vec::new(), weights: Vec::new(), total_mass: 0.0 }
    }

    /// One mark carrying the whole intensity.
    pub fn single(rate: f64) -> Result<Self> {
        if rate == 0.0 {
            Ok(Self::empty())
        } else {
            Self::new([("e0", rate)])
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weight(&self, mark: usize) -> f64 {
        self.weights[mark]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Λ = λ(E).
    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    fn draw_mark<R: Rng>(&self, rng: &mut R) -> usize {
        let target = rng.random::<f64>() * self.total_mass;
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if target < acc {
                return i;
            }
        }
        self.weights.len() - 1
    }
}

/// Time nodes 0 = t_0 < … < t_M = T. `marks[i]` is the mark of the jump at
/// `times[i]`, if any; `base[j]` is the node index of the j-th base mesh point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    times: Vec<f64>,
    marks: Vec<Option<usize>>,
    base: Vec<usize>,
}

impl TimeGrid {
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        refine_grid(&uniform_mesh(horizon, steps)?, &[])
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn time(&self, i: usize) -> f64 {
        self.times[i]
    }

    /// Number of nodes.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn intervals(&self) -> usize {
        self.times.len() - 1
    }

    /// Length of the step (t_i, t_{i+1}].
    pub fn dt(&self, i: usize) -> f64 {
        self.times[i + 1] - self.times[i]
    }

    pub fn mark_at(&self, i: usize) -> Option<usize> {
        self.marks[i]
    }

    pub fn marks(&self) -> &[Option<usize>] {
        &self.marks
    }

    pub fn is_jump(&self, i: usize) -> bool {
        self.marks[i].is_some()
    }

    pub fn base_indices(&self) -> &[usize] {
        &self.base
    }

    /// Node index of an exact grid time, if present.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        self.times.binary_search_by(|x| x.total_cmp(&t)).ok()
    }

    /// Index j of the base interval [s_j, s_{j+1}) containing node i.
    pub fn base_interval_of(&self, i: usize) -> usize {
        match self.base.binary_search(&i) {
            Ok(j) => j.min(self.base.len() - 2),
            Err(j) => j - 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    pub time: f64,
    pub mark: usize,
    /// Node index of `time` in the grid.
    pub index: usize,
}

/// One realization of (B, N).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePath {
    pub grid: TimeGrid,
    /// ΔB over (t_i, t_{i+1}], one per interval.
    pub brownian_increments: Vec<f64>,
    pub jump_events: Vec<JumpEvent>,
}

impl NoisePath {
    /// N([0, T] × E).
    pub fn jump_count(&self) -> usize {
        self.jump_events.len()
    }

    /// B at every node.
    pub fn brownian_path(&self) -> Vec<f64> {
        let mut b = Vec::with_capacity(self.grid.len());
        b.push(0.0);
        let mut acc = 0.0;
        for dw in &self.brownian_increments {
            acc += dw;
            b.push(acc);
        }
        b
    }

    /// Σ (ΔB_i)², the discrete quadratic variation of B.
    pub fn brownian_quadratic_variation(&self) -> f64 {
        self.brownian_increments.iter().map(|d| d * d).sum()
    }

    /// The same realization on a base mesh with every other point removed.
    /// Brownian increments are summed; jump nodes are kept.
    pub fn coarsen(&self) -> Result<NoisePath> {
        let base = self.grid.base_indices();
        if (base.len() - 1) % 2 != 0 {
            return invalid("coarsening needs an even number of base steps");
        }
        let mesh: Vec<f64> = base.iter().step_by(2).map(|&i| self.grid.time(i)).collect();
        let jumps: Vec<(f64, usize)> = self.jump_events.iter().map(|j| (j.time, j.mark)).collect();
        let grid = refine_grid(&mesh, &jumps)?;
        let brownian_increments = (0..grid.intervals())
            .map(|i| {
                let a = self.grid.index_of(grid.time(i)).expect("coarse node is a fine node");
                let b = self.grid.index_of(grid.time(i + 1)).expect("coarse node is a fine node");
                self.brownian_increments[a..b].iter().sum::<f64>()
            })
            .collect();
        let jump_events = self
            .jump_events
            .iter()
            .map(|j| JumpEvent { index: grid.index_of(j.time).expect("jump is a node"), ..*j })
            .collect();
        Ok(NoisePath { grid, brownian_increments, jump_events })
    }
}

pub fn uniform_mesh(horizon: f64, steps: usize) -> Result<Vec<f64>> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return invalid(format!("horizon must be finite and positive, got {horizon}"));
    }
    if steps == 0 {
        return invalid("base_steps must be at least 1");
    }
    let h = horizon / steps as f64;
    let mut mesh: Vec<f64> = (0..steps).map(|k| k as f64 * h).collect();
    mesh.push(horizon);
    Ok(mesh)
}

/// Sorted union of a base mesh and jump times, with the jump nodes flagged.
/// A jump landing on a base point flags that point instead of adding a node.
pub fn refine_grid(base: &[f64], jumps: &[(f64, usize)]) -> Result<TimeGrid> {
    if base.len() < 2 || base[0] != 0.0 {
        return invalid("base mesh must start at 0 and contain at least two points");
    }
    if base.windows(2).any(|w| !(w[1] > w[0])) {
        return invalid("base mesh must be strictly increasing");
    }
    let horizon = *base.last().unwrap();
    let mut sorted = jumps.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    for w in sorted.windows(2) {
        if w[0].0 == w[1].0 {
            return invalid(format!("duplicate jump time {}", w[0].0));
        }
    }
    if let Some(&(t, _)) = sorted.iter().find(|(t, _)| !(*t > 0.0 && *t <= horizon)) {
        return invalid(format!("jump time {t} outside (0, {horizon}]"));
    }

    let mut times = Vec::with_capacity(base.len() + sorted.len());
    let mut marks = Vec::with_capacity(base.len() + sorted.len());
    let mut base_idx = Vec::with_capacity(base.len());
    let mut j = 0;
    for &s in base {
        while j < sorted.len() && sorted[j].0 < s {
            times.push(sorted[j].0);
            marks.push(Some(sorted[j].1));
            j += 1;
        }
        base_idx.push(times.len());
        times.push(s);
        if j < sorted.len() && sorted[j].0 == s {
            marks.push(Some(sorted[j].1));
            j += 1;
        } else {
            marks.push(None);
        }
    }
    Ok(TimeGrid { horizon, times, marks, base: base_idx })
}

/// Draws one noise path: exponential inter-arrival gaps at rate Λ, i.i.d.
/// marks with probability λ_e/Λ, and Gaussian increments on the refined grid.
pub fn sample_noise(
    seed: SeedSpec,
    mark_space: &MarkSpace,
    horizon: f64,
    base_steps: usize,
) -> Result<NoisePath> {
    let mesh = uniform_mesh(horizon, base_steps)?;
    let mut rng = seed.rng();
    let rate = mark_space.total_mass();
    let mut jumps = Vec::new();
    if rate > 0.0 {
        let gap = Exp::new(rate).map_err(|e| crate::Error::InvalidInput(e.to_string()))?;
        let mut t = 0.0;
        loop {
            t += gap.sample(&mut rng);
            if t > horizon {
                break;
            }
            jumps.push((t, mark_space.draw_mark(&mut rng)));
        }
    }
    let grid = refine_grid(&mesh, &jumps)?;
    let brownian_increments = (0..grid.intervals())
        .map(|i| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * grid.dt(i).sqrt()
        })
        .collect();
    let jump_events = jumps
        .iter()
        .map(|&(time, mark)| JumpEvent {
            time,
            mark,
            index: grid.index_of(time).expect("jump time is a grid node"),
        })
        .collect();
    Ok(NoisePath { grid, brownian_increments, jump_events })
}
