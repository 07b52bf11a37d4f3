//! VTK snapshots and CSV tables.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::diagnostics::{rho_log_rho_defect, Diagnostics, Run};
use crate::error::Result;
use crate::fields::{dot, State};
use crate::grid::Grid;
use crate::scheme::{NumParams, PhysParams, Trajectory};

/// Legacy ASCII VTK, `STRUCTURED_POINTS` with cell arrays `rho`, `u` and
/// `theta`; cells are written with the first coordinate varying fastest.
pub fn write_vtk(path: &Path, grid: &Grid, state: &State, time: f64) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let d = grid.dim();
    let n = grid.counts();
    let o = grid.origin();
    let h = grid.h();
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "slabfv level {} t={time}", state.level)?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET STRUCTURED_POINTS")?;
    let pts: Vec<usize> = (0..3).map(|a| if a < d { n[a] + 1 } else { 1 }).collect();
    writeln!(w, "DIMENSIONS {} {} {}", pts[0], pts[1], pts[2])?;
    let oz = if d == 3 { o[2] } else { 0.0 };
    writeln!(w, "ORIGIN {} {} {}", o[0], o[1], oz)?;
    writeln!(w, "SPACING {h} {h} {h}")?;
    writeln!(w, "CELL_DATA {}", grid.cell_count())?;
    let order = x_fastest(grid);
    writeln!(w, "SCALARS rho double 1")?;
    writeln!(w, "LOOKUP_TABLE default")?;
    for &c in &order {
        writeln!(w, "{}", state.rho[c])?;
    }
    writeln!(w, "SCALARS u double {d}")?;
    writeln!(w, "LOOKUP_TABLE default")?;
    for &c in &order {
        let line: Vec<String> = state.u[c][..d].iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    writeln!(w, "SCALARS theta double 1")?;
    writeln!(w, "LOOKUP_TABLE default")?;
    for &c in &order {
        writeln!(w, "{}", state.theta[c])?;
    }
    w.flush()?;
    Ok(())
}

fn x_fastest(grid: &Grid) -> Vec<usize> {
    let n = grid.counts();
    let mut out = Vec::with_capacity(grid.cell_count());
    for k in 0..n[2] {
        for j in 0..n[1] {
            for i in 0..n[0] {
                out.push(grid.cell_id([i, j, k]));
            }
        }
    }
    out
}

/// Writes serialisable rows with a header line.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One line of the per-step diagnostics table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub mass: f64,
    pub kinetic_energy: f64,
    pub internal_energy: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    pub u_max: f64,
    pub newton_iterations: usize,
    pub newton_residual: f64,
    pub rho_log_rho_defect: f64,
    pub grad_theta: f64,
    pub grad_u: f64,
    pub time_increments: f64,
    pub jump_dissipation: f64,
    pub boundary_mismatch: f64,
    pub edge_grad_u: f64,
}

/// Per-step table of a trajectory; stability columns accumulate from `t = 0`.
pub fn step_records(
    grid: &Grid,
    traj: &Trajectory,
    phys: &PhysParams,
    num: &NumParams,
) -> Result<Vec<StepRecord>> {
    let diag = Diagnostics::new(Run {
        grid,
        traj,
        phys,
        num,
    })?;
    let series = diag.stability_series();
    let rll = rho_log_rho_defect(grid, traj)?;
    let vol = grid.cell_volume();
    Ok(traj
        .states
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let kinetic = vol
                * (0..grid.cell_count())
                    .map(|c| 0.5 * s.rho[c] * dot(&s.u[c], &s.u[c]))
                    .sum::<f64>();
            let internal = vol
                * phys.c_v
                * (0..grid.cell_count())
                    .map(|c| s.rho[c] * s.theta[c])
                    .sum::<f64>();
            let st = if k == 0 { None } else { series.get(k - 1) };
            let stats = if k == 0 { None } else { traj.stats.get(k - 1) };
            StepRecord {
                step: k,
                time: k as f64 * traj.dt,
                mass: s.mass(grid),
                kinetic_energy: kinetic,
                internal_energy: internal,
                rho_min: s.rho.min(),
                rho_max: s.rho.max(),
                theta_min: s.theta.min(),
                theta_max: s.theta.max(),
                u_max: s.u.max_norm(),
                newton_iterations: stats.map_or(0, |x| x.iterations),
                newton_residual: stats.map_or(0.0, |x| x.residual),
                rho_log_rho_defect: rll[k],
                grad_theta: st.map_or(0.0, |r| r.grad_theta),
                grad_u: st.map_or(0.0, |r| r.grad_u),
                time_increments: st.map_or(0.0, |r| r.time_increments),
                jump_dissipation: st.map_or(0.0, |r| r.jump_dissipation),
                boundary_mismatch: st.map_or(0.0, |r| r.boundary_mismatch),
                edge_grad_u: st.map_or(0.0, |r| r.edge_grad_u),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::scheme::{advance, constant_state, BoundaryTemperature};

    #[test]
    fn vtk_layout() {
        let grid = Grid::new(GridSpec::new(2, 0.5, 0.25, 0.25)).unwrap();
        let mut s = constant_state(&grid, 1.0, 2.0);
        for c in 0..grid.cell_count() {
            s.rho[c] = c as f64;
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.vtk");
        write_vtk(&p, &grid, &s, 0.0).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("DIMENSIONS 5 3 1"));
        assert!(text.contains("ORIGIN -0.5 -0.25 0"));
        assert!(text.contains("CELL_DATA 8"));
        assert!(text.contains("SCALARS u double 2"));
        let rho: Vec<f64> = text
            .lines()
            .skip_while(|l| !l.starts_with("SCALARS rho"))
            .skip(2)
            .take(8)
            .map(|l| l.parse().unwrap())
            .collect();
        // second value is the cell one step along x_1: id = n_2 = 2
        assert_eq!(rho[..2], [0.0, 2.0]);
    }

    #[test]
    fn constant_run_table() {
        let grid = Grid::new(GridSpec::unit(2, 4)).unwrap();
        let phys = PhysParams {
            mu: 0.1,
            eta: 0.0,
            kappa: 0.1,
            c_v: 1.5,
            gravity: [0.0; 3],
            theta_b: BoundaryTemperature::constant(1.0),
        };
        let num = NumParams::default();
        let traj = advance(
            &grid,
            constant_state(&grid, 1.0, 1.0),
            3,
            &phys,
            &num,
            |_, _| {},
        );
        let rows = step_records(&grid, &traj, &phys, &num).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| (r.mass - rows[0].mass).abs() < 1e-14));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_csv(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("step,time,mass,"));
        assert_eq!(text.lines().count(), 5);
    }
}
