//! Named initial data, boundary temperatures and refinement studies.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    extension_w2inf, lions_pair, rate_fit, rho_log_rho_defect, theta_extension, time_cutoff,
    DefectSeries, Diagnostics, Flavor, RateFit, Run, StabilityReport, TestFunctionFamily,
};
use crate::error::{Error, Result};
use crate::fields::{CellScalarField, State, Vec3};
use crate::grid::{Grid, GridSpec, MAX_DIM};
use crate::scheme::{advance, init_state, BoundaryTemperature, NumParams, PhysParams, Trajectory};

/// Initial data selector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitialData {
    /// Uniform gas at rest.
    Constant { rho: f64, theta: f64 },
    /// Unit density and temperature with a smooth density and velocity bump.
    PerturbedConstant { amplitude: f64 },
    /// Temperature blending linearly between the plates, perturbed like
    /// [`InitialData::PerturbedConstant`].
    ThermalLayer { amplitude: f64 },
}

/// Plate temperature selector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BoundarySpec {
    Constant { theta: f64 },
    TwoPlate { bottom: f64, top: f64 },
}

impl BoundarySpec {
    pub fn temperature(&self, dim: usize) -> BoundaryTemperature {
        match *self {
            BoundarySpec::Constant { theta } => BoundaryTemperature::constant(theta),
            BoundarySpec::TwoPlate { bottom, top } => {
                BoundaryTemperature::two_plate(bottom, top, dim)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            BoundarySpec::Constant { theta } => theta > 0.0,
            BoundarySpec::TwoPlate { bottom, top } => bottom > 0.0 && top > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter {
                name: "boundary",
                reason: "plate temperatures must be positive".into(),
            })
        }
    }
}

fn shape(x: &Vec3, spec: &GridSpec) -> f64 {
    let d = spec.dim;
    (PI * x[0] / spec.half_period).sin() * (PI * x[d - 1] / (2.0 * spec.half_height)).cos()
}

impl InitialData {
    pub fn state(&self, grid: &Grid, phys: &PhysParams) -> Result<State> {
        let spec = *grid.spec();
        let d = spec.dim;
        match *self {
            InitialData::Constant { rho, theta } => {
                init_state(grid, |_| rho, |_| [0.0; MAX_DIM], |_| theta, phys)
            }
            InitialData::PerturbedConstant { amplitude } => init_state(
                grid,
                |x| 1.0 + amplitude * shape(x, &spec),
                |x| {
                    let mut u = [0.0; MAX_DIM];
                    u[0] = amplitude * shape(x, &spec);
                    u
                },
                |_| 1.0,
                phys,
            ),
            InitialData::ThermalLayer { amplitude } => {
                let tb = phys.theta_b.clone();
                init_state(
                    grid,
                    |x| 1.0 + amplitude * shape(x, &spec),
                    |x| {
                        let mut u = [0.0; MAX_DIM];
                        u[0] = amplitude * shape(x, &spec);
                        u
                    },
                    |x| {
                        tb.extension(0.0, x, d, spec.half_height)
                            + 0.5 * amplitude * shape(x, &spec)
                    },
                    phys,
                )
            }
        }
    }
}

/// Everything that determines a refinement study.
#[derive(Clone, Debug)]
pub struct StudyParams {
    pub dim: usize,
    pub half_period: f64,
    pub half_height: f64,
    pub phys: PhysParams,
    pub num: NumParams,
    pub initial: InitialData,
    pub final_time: f64,
    /// Cells across the slab height, coarsest first, each double the previous.
    pub levels: Vec<usize>,
}

impl StudyParams {
    /// Two-plate study with the default coefficients on `L = H = 1/2`.
    pub fn two_plate_default(dim: usize, levels: Vec<usize>) -> Self {
        let mut gravity = [0.0; MAX_DIM];
        gravity[dim - 1] = -1.0;
        Self {
            dim,
            half_period: 0.5,
            half_height: 0.5,
            phys: PhysParams {
                mu: 0.1,
                eta: 0.0,
                kappa: 0.1,
                c_v: 1.5,
                gravity,
                theta_b: BoundaryTemperature::two_plate(1.2, 1.0, dim),
            },
            num: NumParams::default(),
            initial: InitialData::ThermalLayer { amplitude: 0.1 },
            final_time: 0.2,
            levels,
        }
    }

    pub fn grid(&self, n: usize) -> Result<Grid> {
        Grid::new(GridSpec::new(
            self.dim,
            self.half_period,
            self.half_height,
            2.0 * self.half_height / n as f64,
        ))
    }

    /// Number of steps reaching `final_time` on a grid with `n` cells across.
    pub fn steps(&self, n: usize) -> Result<usize> {
        let dt = self.num.dt(2.0 * self.half_height / n as f64);
        let steps = (self.final_time / dt).round();
        if steps < 1.0 || (steps * dt - self.final_time).abs() > 1e-9 * self.final_time {
            return Err(Error::InvalidParameter {
                name: "final_time",
                reason: format!(
                    "{} is not a whole number of steps dt = {dt}",
                    self.final_time
                ),
            });
        }
        Ok(steps as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.phys.validate()?;
        self.num.validate()?;
        if self.levels.len() < 3 {
            return Err(Error::InvalidParameter {
                name: "levels",
                reason: format!("need at least 3 levels, got {}", self.levels.len()),
            });
        }
        for w in self.levels.windows(2) {
            if w[1] != 2 * w[0] {
                return Err(Error::InvalidParameter {
                    name: "levels",
                    reason: format!(
                        "each level must double the previous, got {} then {}",
                        w[0], w[1]
                    ),
                });
            }
        }
        for &n in &self.levels {
            self.grid(n)?;
            self.steps(n)?;
        }
        Ok(())
    }
}

/// Functional names as they appear in the rate table.
pub const CONTINUITY: &str = "continuity";
pub const MOMENTUM: &str = "momentum";
pub const INTERNAL_ENERGY: &str = "internal_energy";
pub const ENTROPY: &str = "entropy";
pub const BALLISTIC: &str = "ballistic";
pub const CF_VELOCITY: &str = "cf1_velocity";
pub const CF_KINETIC: &str = "cf2_kinetic";
pub const CF_TEMPERATURE: &str = "cf3_temperature";
pub const CF_TEMPERATURE_SQ: &str = "cf4_temperature_squared";
pub const LIONS: &str = "lions";

pub const FUNCTIONALS: [&str; 10] = [
    CONTINUITY,
    MOMENTUM,
    INTERNAL_ENERGY,
    ENTROPY,
    BALLISTIC,
    CF_VELOCITY,
    CF_KINETIC,
    CF_TEMPERATURE,
    CF_TEMPERATURE_SQ,
    LIONS,
];

/// Results of one refinement level.
#[derive(Clone, Debug)]
pub struct LevelResult {
    pub n: usize,
    pub h: f64,
    pub dt: f64,
    pub steps: usize,
    /// Why the level stopped early, if it did.
    pub failure: Option<String>,
    /// `(functional, value)` in [`FUNCTIONALS`] order.
    pub values: Vec<(&'static str, f64)>,
    pub stability: Option<StabilityReport>,
    pub lambda: f64,
    pub mass_drift: f64,
    /// Largest `rho log rho` defect over all levels.
    pub rho_log_rho_max: f64,
    pub final_state: State,
}

impl LevelResult {
    pub fn value(&self, name: &str) -> Option<f64> {
        self.values
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| *v)
    }

    pub fn ok(&self) -> bool {
        self.failure.is_none()
    }
}

/// Evaluates every functional on a completed trajectory.
pub fn evaluate_level(
    grid: &Grid,
    traj: &Trajectory,
    phys: &PhysParams,
    num: &NumParams,
    final_time: f64,
) -> Result<Vec<(&'static str, f64)>> {
    let diag = Diagnostics::new(Run {
        grid,
        traj,
        phys,
        num,
    })?;
    let smooth = TestFunctionFamily::new(grid, final_time, Flavor::SlabSmooth, false);
    let compact = TestFunctionFamily::new(grid, final_time, Flavor::CompactBump, false);
    let positive = TestFunctionFamily::new(grid, final_time, Flavor::CompactBump, true);
    let open = TestFunctionFamily::new(grid, final_time, Flavor::Open, false);
    let theta = theta_extension(&phys.theta_b, grid);
    let (psi, phi) = lions_pair(grid, final_time);
    Ok(vec![
        (CONTINUITY, diag.consistency_continuity(&smooth.scalar())?),
        (MOMENTUM, diag.consistency_momentum(&compact.vector())?),
        (
            INTERNAL_ENERGY,
            diag.consistency_internal_energy(&compact.scalar())?,
        ),
        (ENTROPY, diag.consistency_entropy(&positive.scalar())?),
        (
            BALLISTIC,
            diag.consistency_ballistic(&|t| time_cutoff(t, final_time), &theta)?,
        ),
        (
            CF_VELOCITY,
            diag.compatibility_velocity(&open.sym_tensor())?,
        ),
        (CF_KINETIC, diag.compatibility_kinetic(&open.vector())?),
        (
            CF_TEMPERATURE,
            diag.compatibility_temperature(&open.vector(), &theta, 1)?,
        ),
        (
            CF_TEMPERATURE_SQ,
            diag.compatibility_temperature(&open.vector(), &theta, 2)?,
        ),
        (LIONS, diag.lions_defect(&psi, &phi)?),
    ])
}

/// Runs one level; with `evaluate` set, also every functional and the
/// stability quantities.
pub fn run_level(params: &StudyParams, n: usize, evaluate: bool) -> Result<LevelResult> {
    let grid = params.grid(n)?;
    let steps = params.steps(n)?;
    let s0 = params.initial.state(&grid, &params.phys)?;
    let traj = advance(&grid, s0, steps, &params.phys, &params.num, |_, _| {});
    let m0 = traj.states[0].mass(&grid);
    let mass_drift = traj
        .states
        .iter()
        .map(|s| ((s.mass(&grid) - m0) / m0).abs())
        .fold(0.0, f64::max);
    let rho_log_rho_max = rho_log_rho_defect(&grid, &traj)?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    let (values, stability, lambda) = if traj.is_complete() && evaluate {
        let values = evaluate_level(&grid, &traj, &params.phys, &params.num, params.final_time)?;
        let diag = Diagnostics::new(Run {
            grid: &grid,
            traj: &traj,
            phys: &params.phys,
            num: &params.num,
        })?;
        let st = diag.stability();
        let w2 = extension_w2inf(
            &theta_extension(&params.phys.theta_b, &grid),
            &grid,
            params.final_time,
        );
        (values, Some(st), st.lambda(w2))
    } else {
        (
            FUNCTIONALS.iter().map(|n| (*n, f64::NAN)).collect(),
            None,
            f64::NAN,
        )
    };
    Ok(LevelResult {
        n,
        h: grid.h(),
        dt: traj.dt,
        steps,
        failure: traj.failure.as_ref().map(|e| e.to_string()),
        values,
        stability,
        lambda,
        mass_drift,
        rho_log_rho_max,
        final_state: traj.final_state().clone(),
    })
}

/// One row of a rate table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateRow {
    pub functional: String,
    pub n: usize,
    pub h: f64,
    pub value: f64,
    /// Least-squares order of the whole series, repeated on every row.
    pub order: Option<f64>,
    pub status: String,
}

#[derive(Clone, Debug)]
pub struct StudyResult {
    pub levels: Vec<LevelResult>,
}

impl StudyResult {
    /// `(h, value)` over the levels that completed.
    pub fn series(&self, name: &str) -> DefectSeries {
        DefectSeries {
            points: self
                .levels
                .iter()
                .filter(|l| l.ok())
                .filter_map(|l| l.value(name).map(|v| (l.h, v)))
                .collect(),
        }
    }

    pub fn rate(&self, name: &str) -> Result<RateFit> {
        rate_fit(&self.series(name))
    }

    /// `|L_h - L_{h/2}|` over consecutive completed pairs.
    pub fn lions_differences(&self) -> Vec<f64> {
        self.levels
            .windows(2)
            .filter(|w| w[0].ok() && w[1].ok())
            .map(|w| {
                (w[0].value(LIONS).unwrap_or(f64::NAN) - w[1].value(LIONS).unwrap_or(f64::NAN))
                    .abs()
            })
            .collect()
    }

    pub fn rate_rows(&self) -> Vec<RateRow> {
        let mut rows = Vec::new();
        for name in FUNCTIONALS {
            let order = self.rate(name).ok().map(|f| f.order);
            for l in &self.levels {
                rows.push(RateRow {
                    functional: name.to_string(),
                    n: l.n,
                    h: l.h,
                    value: l.value(name).unwrap_or(f64::NAN),
                    order,
                    status: l.failure.clone().unwrap_or_else(|| "ok".into()),
                });
            }
        }
        rows
    }
}

/// Row of the per-level table: the stability quantities divided by their
/// expected `h` scaling, and the extremes of the solution.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelRow {
    pub n: usize,
    pub h: f64,
    pub dt: f64,
    pub steps: usize,
    pub status: String,
    pub mass_drift: f64,
    pub rho_log_rho_max: f64,
    pub lambda: f64,
    pub gradients: f64,
    pub time_increments: f64,
    pub jump_dissipation: f64,
    pub edge_gradient_u: f64,
    pub boundary_mismatch: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    pub u_max: f64,
}

impl StudyResult {
    pub fn level_rows(&self, alpha: f64) -> Vec<LevelRow> {
        self.levels
            .iter()
            .map(|l| {
                let norm = l
                    .stability
                    .map(|s| s.normalized(alpha))
                    .unwrap_or([f64::NAN; 5]);
                let e = l.stability.map(|s| s.extremes);
                LevelRow {
                    n: l.n,
                    h: l.h,
                    dt: l.dt,
                    steps: l.steps,
                    status: l.failure.clone().unwrap_or_else(|| "ok".into()),
                    mass_drift: l.mass_drift,
                    rho_log_rho_max: l.rho_log_rho_max,
                    lambda: l.lambda,
                    gradients: norm[0],
                    time_increments: norm[1],
                    jump_dissipation: norm[2],
                    edge_gradient_u: norm[3],
                    boundary_mismatch: norm[4],
                    rho_min: e.map_or(f64::NAN, |e| e.rho_min),
                    rho_max: e.map_or(f64::NAN, |e| e.rho_max),
                    theta_min: e.map_or(f64::NAN, |e| e.theta_min),
                    theta_max: e.map_or(f64::NAN, |e| e.theta_max),
                    u_max: e.map_or(f64::NAN, |e| e.u_max),
                }
            })
            .collect()
    }
}

/// Runs and evaluates every level of the study in turn.
pub fn consistency_study(params: &StudyParams) -> Result<StudyResult> {
    run_levels(params, true)
}

/// Runs every level without evaluating functionals.
pub fn solve_levels(params: &StudyParams) -> Result<StudyResult> {
    run_levels(params, false)
}

fn run_levels(params: &StudyParams, evaluate: bool) -> Result<StudyResult> {
    params.validate()?;
    let levels = params
        .levels
        .iter()
        .map(|&n| run_level(params, n, evaluate))
        .collect::<Result<Vec<_>>>()?;
    Ok(StudyResult { levels })
}

/// Averages a fine cell field onto the grid with twice the spacing.
pub fn restrict(fine: &Grid, coarse: &Grid, v: &[f64]) -> Result<CellScalarField> {
    let d = fine.dim();
    let fc = fine.counts();
    let cc = coarse.counts();
    if (0..d).any(|a| fc[a] != 2 * cc[a]) {
        return Err(Error::InvalidGrid(
            "fine grid must halve the coarse spacing".into(),
        ));
    }
    let children = 1usize << d;
    Ok(CellScalarField::from_fn(coarse, |c| {
        let idx = coarse.cell_index(c);
        let mut sum = 0.0;
        for child in 0..children {
            let mut fi = [0; 3];
            for a in 0..d {
                fi[a] = 2 * idx[a] + ((child >> a) & 1);
            }
            sum += v[fine.cell_id(fi)];
        }
        sum / children as f64
    }))
}

/// `||q_h - R q_{h/2}||_{L^2}` on the coarse grid for one pair of levels.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CauchyRow {
    pub n_coarse: usize,
    pub h: f64,
    pub rho: f64,
    pub u: f64,
    pub theta: f64,
}

/// Cauchy differences of the final states of consecutive levels.
pub fn refine_study(params: &StudyParams, result: &StudyResult) -> Result<Vec<CauchyRow>> {
    let mut rows = Vec::new();
    for w in result.levels.windows(2) {
        if !(w[0].ok() && w[1].ok()) {
            continue;
        }
        let coarse = params.grid(w[0].n)?;
        let fine = params.grid(w[1].n)?;
        let (sc, sf) = (&w[0].final_state, &w[1].final_state);
        let diff = |a: &[f64], b: &[f64]| -> Result<f64> {
            let r = restrict(&fine, &coarse, b)?;
            Ok(
                CellScalarField(a.iter().zip(r.iter()).map(|(x, y)| x - y).collect())
                    .l2_norm(&coarse),
            )
        };
        let mut u2 = 0.0;
        for j in 0..params.dim {
            u2 += diff(&sc.u.component(j), &sf.u.component(j))?.powi(2);
        }
        rows.push(CauchyRow {
            n_coarse: w[0].n,
            h: coarse.h(),
            rho: diff(&sc.rho, &sf.rho)?,
            u: u2.sqrt(),
            theta: diff(&sc.theta, &sf.theta)?,
        });
    }
    Ok(rows)
}
