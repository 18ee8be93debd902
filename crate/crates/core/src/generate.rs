//! Seeded random plans for testing and benchmarking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dag::{Operator, ParaCapability, PipeCapability, PlanDag};
use crate::rational::rat;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenConfig {
    pub n_ops: usize,
    /// Probability of each forward edge `i → j`, `i < j`.
    pub p_edge: f64,
    /// Upper bound on units for operators that may have several.
    pub max_units: u32,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_ops: 8,
            p_edge: 0.25,
            max_units: 4,
        }
    }
}

/// A random plan whose operators satisfy every capability constraint.
///
/// Pipe classes are drawn 30% B, 30% P, 20% I, 20% O. Unit times are `k/d` with
/// `k ∈ 1..=8` and `d ∈ {1, 2, 4}`. Multi-input operators get a random parent as
/// cap_on. The same seed and config always give the same plan.
pub fn random_dag(seed: u64, cfg: &GenConfig) -> PlanDag {
    assert!((0.0..=1.0).contains(&cfg.p_edge), "p_edge must lie in [0, 1]");
    let max_units = cfg.max_units.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut edges = Vec::new();
    let mut parents = vec![Vec::new(); cfg.n_ops];
    for (j, ps) in parents.iter_mut().enumerate() {
        for i in 0..j {
            if rng.random_bool(cfg.p_edge) {
                edges.push((i, j));
                ps.push(i);
            }
        }
    }

    let ops: Vec<Operator> = (0..cfg.n_ops)
        .map(|id| {
            use PipeCapability::*;
            let pipe = match rng.random_range(0..10) {
                0..=2 => B,
                3..=5 => P,
                6..=7 => I,
                _ => O,
            };
            let para = if matches!(pipe, O | B) || rng.random_bool(0.5) {
                ParaCapability::S
            } else {
                ParaCapability::DP
            };
            let units = if pipe == B { 1 } else { rng.random_range(1..=max_units) };
            let den = [1, 2, 4][rng.random_range(0..3)];
            let unit_time = rat(rng.random_range(1..=8), den);
            let mut op = Operator::new(id, pipe, para, unit_time, units);
            if parents[id].len() > 1 {
                op.cap_on = Some(parents[id][rng.random_range(0..parents[id].len())]);
            }
            op
        })
        .collect();
    PlanDag::new(ops, edges).expect("generated plans are valid by construction")
}
