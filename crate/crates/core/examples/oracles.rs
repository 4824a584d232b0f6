//! Recomputes the reference numbers stored in `benchmarks.rs`.
//!
//! cargo run --release --example oracles

use jump_smp::benchmarks::{self, gain_search, threshold_policy, BangBang, LqParams, LQ_JUMP_ORACLE};
use jump_smp::forward::{estimate_cost, Ensemble};
use jump_smp::stats::golden_section;

fn main() -> jump_smp::Result<()> {
    let (seed, paths, steps) = LQ_JUMP_ORACLE;
    let ens = Ensemble::new(seed, paths, steps);

    let lq = LqParams::default().problem("lq_jump")?;
    let (kappa, cost) = gain_search(&lq, &ens, 0.0, 3.0, 1e-5)?;
    println!("lq_jump: gain = {kappa:.6}, cost = {:.6} ± {:.6}", cost.mean, cost.se);

    let mp = benchmarks::lq_jump_mp()?;
    let c = estimate_cost(&mp.problem, &mp.reference_control, &ens)?;
    println!("lq_jump_mp: gT = S = {:.6}, cost = {:.6} ± {:.6}", benchmarks::lq_jump_mp_params()?.gt, c.mean, c.se);

    let bb = benchmarks::bangbang(BangBang::default())?;
    let theta = golden_section(|th| estimate_cost(&bb.problem, &threshold_policy(th), &ens).map_or(f64::INFINITY, |e| e.mean), -0.5, 0.5, 1e-3);
    let c = estimate_cost(&bb.problem, &threshold_policy(0.0), &ens)?;
    println!("bangbang: searched theta = {theta:.4}, cost at 0 = {:.6} ± {:.6}", c.mean, c.se);
    Ok(())
}
