//! Strong scaling: one board, growing rank grids, speedup over the
//! single-rank baseline solve time.

use std::io::Write;

use crate::bench::life::{run_game_of_life, Board, LifeConfig};
use crate::bench::{Backend, BenchResult};
use crate::costmodel::CostModel;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub n: usize,
    pub grids: Vec<(usize, usize)>,
    pub backends: Vec<Backend>,
    pub steps: usize,
    pub seed: u64,
}

impl SweepConfig {
    pub fn default_grids() -> Vec<(usize, usize)> {
        vec![(1, 1), (1, 2), (2, 2), (2, 4), (4, 4), (4, 8), (8, 8)]
    }
}

/// Runs every backend on every grid. Each result carries `solve_ns`,
/// `edge_bytes` and `speedup`. Traces of all runs are appended to `trace` in
/// run order.
pub fn run_scaling_sweep(
    cost: &CostModel,
    cfg: &SweepConfig,
    mut trace: Option<&mut dyn Write>,
) -> Result<Vec<BenchResult>> {
    let initial = Board::soup(cfg.n, cfg.seed);
    let life = |backend, grid, trace| LifeConfig {
        backend,
        grid,
        steps: cfg.steps,
        initial: initial.clone(),
        verify: true,
        trace,
    };
    let reference = run_game_of_life(cost, &life(Backend::Baseline, (1, 1), false))?.solve_ns as f64;

    let mut out = Vec::new();
    for &backend in &cfg.backends {
        for &grid in &cfg.grids {
            let run = run_game_of_life(cost, &life(backend, grid, trace.is_some()))?;
            if let Some(w) = trace.as_deref_mut() {
                for rec in &run.trace {
                    writeln!(w, "{rec}")?;
                }
            }
            let mut result = run.result;
            result.metrics.push(("speedup", reference / run.solve_ns as f64));
            out.push(result);
        }
    }
    Ok(out)
}
