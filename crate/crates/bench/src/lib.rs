//! Fixtures shared by the benchmarks.

use slabfv_core::scheme::solve_step;
use slabfv_core::study::StudyParams;
use slabfv_core::{Grid, NumParams, PhysParams, State};

/// A two-plate problem with one converged step, so that `prev -> next` is a
/// realistic Newton pair.
pub struct Fixture {
    pub grid: Grid,
    pub phys: PhysParams,
    pub num: NumParams,
    pub prev: State,
    pub next: State,
}

pub fn fixture(dim: usize, n: usize) -> Fixture {
    let params = StudyParams::two_plate_default(dim, vec![n]);
    let grid = params.grid(n).expect("valid grid");
    let prev = params
        .initial
        .state(&grid, &params.phys)
        .expect("positive initial data");
    let dt = params.num.dt(grid.h());
    let (next, _) =
        solve_step(&grid, &prev, dt, &params.phys, &params.num).expect("first step converges");
    Fixture {
        grid,
        phys: params.phys,
        num: params.num,
        prev,
        next,
    }
}
