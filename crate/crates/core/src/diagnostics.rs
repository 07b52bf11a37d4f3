//! Post-processing of trajectories: stability norms, the renormalized
//! continuity identity, consistency and compatibility functionals against
//! smooth test functions, the Lions defect and log-log rate fits.
//!
//! Integrals of a smooth factor against a piecewise-constant solution factor
//! are evaluated with the solution factor exact. Pure time derivatives of a
//! test function are integrated exactly as differences `phi(t_k) - phi(t_{k-1})`
//! and spatial derivatives against cellwise constants as face differences, so
//! the discrete sums telescope exactly; the remaining smooth factors use the
//! midpoint in time and two-point Gauss rules in space. On `[t_{k-1}, t_k)` the
//! piecewise-constant interpolant takes level `k - 1`.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::{
    ddot, dot, half_box_average, trace, FaceScalarField, Mat3, Quadrature, State, Vec3,
};
use crate::grid::{FaceIndex, Grid, Neighbor, MAX_DIM};
use crate::operators::{grad_edge, stress_from_gradient, GhostPolicy};
use crate::scheme::{BoundaryTemperature, NumParams, PhysParams, Trajectory};

pub type ScalarFn = Arc<dyn Fn(f64, &Vec3) -> f64 + Send + Sync>;

const QUAD: Quadrature = Quadrature::Gauss(2);

/// `exp(1 - 1/(1 - s^2))` on `|s| < 1`, zero outside; equals one at `s = 0`.
pub fn bump(s: f64) -> f64 {
    if s.abs() < 1.0 {
        (1.0 - 1.0 / (1.0 - s * s)).exp()
    } else {
        0.0
    }
}

/// Smooth time cut-off with value one at `t = 0` and vanishing from `t_final` on.
pub fn time_cutoff(t: f64, t_final: f64) -> f64 {
    if t <= 0.0 {
        1.0
    } else {
        bump(t / t_final)
    }
}

/// Vertical profile of a test function.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flavor {
    /// `cos(pi x_d / 2H)`: smooth up to the plates, vanishing on them.
    SlabSmooth,
    /// Bump supported in `|x_d| <= 0.8 H`.
    CompactBump,
    /// `1 + sin(pi x_d / 2H) / 2`: nonzero on both plates.
    Open,
}

/// Default smooth test functions on the slab.
#[derive(Clone, Copy, Debug)]
pub struct TestFunctionFamily {
    pub flavor: Flavor,
    pub dim: usize,
    pub half_period: f64,
    pub half_height: f64,
    pub t_final: f64,
    /// Use `1 + sin/2` horizontally so that the function is nonnegative.
    pub nonnegative: bool,
}

impl TestFunctionFamily {
    pub fn new(grid: &Grid, t_final: f64, flavor: Flavor, nonnegative: bool) -> Self {
        Self {
            flavor,
            dim: grid.dim(),
            half_period: grid.spec().half_period,
            half_height: grid.spec().half_height,
            t_final,
            nonnegative,
        }
    }

    fn horizontal(&self, x: &Vec3, shift: f64) -> f64 {
        let k = std::f64::consts::PI / self.half_period;
        (0..self.dim - 1)
            .map(|j| {
                let s = (k * x[j] + shift + 0.3 * j as f64).sin();
                if self.nonnegative {
                    1.0 + 0.5 * s
                } else {
                    s
                }
            })
            .product()
    }

    fn vertical(&self, z: f64) -> f64 {
        let hh = self.half_height;
        match self.flavor {
            Flavor::SlabSmooth => (std::f64::consts::PI * z / (2.0 * hh)).cos(),
            Flavor::CompactBump => bump(z / (0.8 * hh)),
            Flavor::Open => 1.0 + 0.5 * (std::f64::consts::PI * z / (2.0 * hh)).sin(),
        }
    }

    fn shifted(&self, shift: f64) -> ScalarFn {
        let me = *self;
        Arc::new(move |t, x| {
            time_cutoff(t, me.t_final) * me.horizontal(x, shift) * me.vertical(x[me.dim - 1])
        })
    }

    pub fn scalar(&self) -> ScalarFn {
        self.shifted(0.0)
    }

    /// One component per direction, each with its own horizontal phase.
    pub fn vector(&self) -> Vec<ScalarFn> {
        (0..self.dim)
            .map(|j| self.shifted(0.7 * (j + 1) as f64))
            .collect()
    }

    /// A symmetric tensor field, `T[i][j] = T[j][i]`.
    pub fn sym_tensor(&self) -> Vec<Vec<ScalarFn>> {
        (0..self.dim)
            .map(|i| {
                (0..self.dim)
                    .map(|j| self.shifted(0.4 * (i + j + 1) as f64 + 0.25 * (i * j) as f64))
                    .collect()
            })
            .collect()
    }
}

/// `psi(t) phi(x)` for the Lions defect: a time bump inside `(0, T)`, and a
/// positive spatial bump vanishing near the plates.
pub fn lions_pair(grid: &Grid, t_final: f64) -> (ScalarFn, ScalarFn) {
    let fam = TestFunctionFamily::new(grid, t_final, Flavor::CompactBump, true);
    let psi: ScalarFn = Arc::new(move |t, _| bump((2.0 * t - t_final) / t_final));
    let phi: ScalarFn = Arc::new(move |_, x| fam.horizontal(x, 0.0) * fam.vertical(x[fam.dim - 1]));
    (psi, phi)
}

/// Boundary temperature extension `Theta` as a space-time function.
pub fn theta_extension(theta_b: &BoundaryTemperature, grid: &Grid) -> ScalarFn {
    let tb = theta_b.clone();
    let (dim, hh) = (grid.dim(), grid.spec().half_height);
    Arc::new(move |t, x| tb.extension(t, x, dim, hh))
}

type SpaceFn<'f> = dyn Fn(&Vec3) -> f64 + Sync + 'f;

fn all_axes(grid: &Grid) -> Vec<usize> {
    (0..grid.dim()).collect()
}

/// `int_K f` for every cell.
pub fn cell_integrals(grid: &Grid, f: &SpaceFn) -> Vec<f64> {
    let axes = all_axes(grid);
    let vol = grid.cell_volume();
    (0..grid.cell_count())
        .into_par_iter()
        .map(|c| vol * QUAD.box_average(&grid.cell_center(c), grid.h(), &axes, &mut |x| f(x)))
        .collect()
}

/// `int_sigma f` for every face of one axis.
pub fn face_integrals(grid: &Grid, axis: usize, f: &SpaceFn) -> Vec<f64> {
    let axes: Vec<usize> = (0..grid.dim()).filter(|&a| a != axis).collect();
    let area = grid.face_area();
    grid.faces(axis)
        .par_iter()
        .map(|face| area * QUAD.box_average(&face.center, grid.h(), &axes, &mut |x| f(x)))
        .collect()
}

/// Integral over the mid-plane of every cell normal to `axis`.
fn plane_integrals(grid: &Grid, axis: usize, f: &SpaceFn) -> Vec<f64> {
    let axes: Vec<usize> = (0..grid.dim()).filter(|&a| a != axis).collect();
    let area = grid.face_area();
    (0..grid.cell_count())
        .into_par_iter()
        .map(|c| area * QUAD.box_average(&grid.cell_center(c), grid.h(), &axes, &mut |x| f(x)))
        .collect()
}

/// `int_K grad f` for every cell, as differences of face integrals.
pub fn gradient_integrals(grid: &Grid, f: &SpaceFn) -> Vec<Vec3> {
    let faces: Vec<Vec<f64>> = (0..grid.dim())
        .map(|a| face_integrals(grid, a, f))
        .collect();
    (0..grid.cell_count())
        .map(|c| {
            let mut g = [0.0; MAX_DIM];
            for (a, fa) in faces.iter().enumerate() {
                g[a] = fa[grid.cell_face(c, a, true).id] - fa[grid.cell_face(c, a, false).id];
            }
            g
        })
        .collect()
}

/// Integrals over the in-slab halves of the dual cells of one axis.
#[derive(Clone, Debug)]
struct HalfIntegrals {
    /// Per face: `(cell, integral)` for each in-slab half; the second slot
    /// is unused on exterior faces.
    values: Vec<[(usize, f64); 2]>,
    counts: Vec<usize>,
}

fn half_integrals(grid: &Grid, axis: usize, f: &SpaceFn) -> HalfIntegrals {
    let axes = all_axes(grid);
    let half = 0.5 * grid.cell_volume();
    let (values, counts) = (0..grid.face_count(axis))
        .into_par_iter()
        .map(|id| {
            let (halves, n) = grid.dual_halves(FaceIndex { axis, id });
            let mut out = [(halves[0].0, 0.0); 2];
            for (slot, (cell, centre)) in out.iter_mut().zip(halves.iter()).take(n) {
                *slot = (
                    *cell,
                    half * half_box_average(QUAD, centre, grid.h(), axis, &axes, &|x| f(x)),
                );
            }
            (out, n)
        })
        .unzip();
    HalfIntegrals { values, counts }
}

/// `int_{half} partial_axis f` over the in-slab halves, by face differences.
fn half_gradient_integrals(grid: &Grid, axis: usize, f: &SpaceFn) -> HalfIntegrals {
    let faces = face_integrals(grid, axis, f);
    let planes = plane_integrals(grid, axis, f);
    let mut values = Vec::with_capacity(faces.len());
    let mut counts = Vec::with_capacity(faces.len());
    for (id, face) in grid.faces(axis).iter().enumerate() {
        let inner = (face.inner, face.normal * (faces[id] - planes[face.inner]));
        match face.outer {
            Neighbor::Cell(o) => {
                values.push([inner, (o, planes[o] - faces[id])]);
                counts.push(2);
            }
            Neighbor::Ghost(_) => {
                values.push([inner, inner]);
                counts.push(1);
            }
        }
    }
    HalfIntegrals { values, counts }
}

impl HalfIntegrals {
    /// `sum_sigma sum_halves w(sigma, cell) * integral`.
    fn pair(&self, mut w: impl FnMut(usize, usize) -> f64) -> f64 {
        let mut s = 0.0;
        for (id, (vals, &n)) in self.values.iter().zip(&self.counts).enumerate() {
            for &(cell, v) in &vals[..n] {
                s += w(id, cell) * v;
            }
        }
        s
    }
}

/// Solution-derived quantities of one time level.
#[derive(Clone, Debug)]
struct LevelData {
    /// `(grad_h u)[a][b] = partial_a u_b`, velocity ghosts `-u`.
    grad: Vec<Mat3>,
    /// `grad_E theta` with the affine Dirichlet ghosts of that level.
    dtheta: Vec<FaceScalarField>,
    /// `rho s(rho, theta)`.
    rho_s: Vec<f64>,
    div: Vec<f64>,
}

/// A trajectory together with everything needed to post-process it.
#[derive(Clone, Copy, Debug)]
pub struct Run<'a> {
    pub grid: &'a Grid,
    pub traj: &'a Trajectory,
    pub phys: &'a PhysParams,
    pub num: &'a NumParams,
}

/// Cached per-level data for repeated functional evaluations.
pub struct Diagnostics<'a> {
    run: Run<'a>,
    levels: Vec<LevelData>,
}

fn level_data(grid: &Grid, s: &State, c_v: f64) -> Result<LevelData> {
    let grad = crate::operators::grad_h_vector(grid, &s.u, &[GhostPolicy::MirrorOdd])?;
    let dtheta = grad_edge(
        grid,
        &s.theta,
        &GhostPolicy::DirichletAffine(s.theta_b.0.clone()),
    )?;
    let rho_s = s
        .rho
        .iter()
        .zip(s.theta.iter())
        .map(|(&r, &t)| crate::operators::entropy(c_v, r, t).map(|e| r * e))
        .collect::<Result<Vec<_>>>()?;
    let div = grad.iter().map(trace).collect();
    Ok(LevelData {
        grad,
        dtheta,
        rho_s,
        div,
    })
}

impl<'a> Diagnostics<'a> {
    pub fn new(run: Run<'a>) -> Result<Self> {
        if run.traj.states.is_empty() {
            return Err(Error::InvalidParameter {
                name: "trajectory",
                reason: "no time levels".into(),
            });
        }
        let levels = run
            .traj
            .states
            .par_iter()
            .map(|s| level_data(run.grid, s, run.phys.c_v))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { run, levels })
    }

    pub fn run(&self) -> Run<'a> {
        self.run
    }

    fn steps(&self) -> usize {
        self.run.traj.states.len() - 1
    }

    fn dt(&self) -> f64 {
        self.run.traj.dt
    }

    pub fn final_time(&self) -> f64 {
        self.dt() * self.steps() as f64
    }

    fn t(&self, k: usize) -> f64 {
        self.dt() * k as f64
    }

    fn mid(&self, k: usize) -> f64 {
        self.dt() * (k as f64 - 0.5)
    }

    fn state(&self, k: usize) -> &State {
        &self.run.traj.states[k]
    }

    fn stress(&self, k: usize) -> Result<Vec<Mat3>> {
        let sp = self.run.phys.stress_params()?;
        let d = self.run.grid.dim();
        Ok(self.levels[k]
            .grad
            .iter()
            .map(|g| stress_from_gradient(g, &sp, d))
            .collect())
    }

    /// Sum over intervals `k = 1..=N` in a fixed order.
    fn over_intervals(&self, term: impl Fn(usize) -> Result<f64> + Sync + Send) -> Result<f64> {
        let parts = (1..=self.steps())
            .into_par_iter()
            .map(term)
            .collect::<Result<Vec<f64>>>()?;
        Ok(parts.iter().sum())
    }

    fn at(f: &ScalarFn, t: f64) -> impl Fn(&Vec3) -> f64 + Sync + '_ {
        move |x| f(t, x)
    }

    /// `<error_rho; phi>`.
    pub fn consistency_continuity(&self, phi: &ScalarFn) -> Result<f64> {
        let g = self.run.grid;
        let ints: Vec<Vec<f64>> = (0..=self.steps())
            .map(|k| cell_integrals(g, &Self::at(phi, self.t(k))))
            .collect();
        let s0 = self.state(0);
        let init: f64 = s0.rho.iter().zip(&ints[0]).map(|(r, i)| r * i).sum();
        let body = self.over_intervals(|k| {
            let s = self.state(k - 1);
            let gm = gradient_integrals(g, &Self::at(phi, self.mid(k)));
            Ok((0..g.cell_count())
                .map(|c| {
                    s.rho[c] * (ints[k][c] - ints[k - 1][c])
                        + self.dt() * s.rho[c] * dot(&s.u[c], &gm[c])
                })
                .sum())
        })?;
        Ok(init + body)
    }

    /// `<error_{rho u}; Phi>`.
    pub fn consistency_momentum(&self, phi: &[ScalarFn]) -> Result<f64> {
        let g = self.run.grid;
        let d = g.dim();
        let ints: Vec<Vec<Vec<f64>>> = (0..=self.steps())
            .map(|k| {
                (0..d)
                    .map(|j| cell_integrals(g, &Self::at(&phi[j], self.t(k))))
                    .collect()
            })
            .collect();
        let s0 = self.state(0);
        let mut init = 0.0;
        for j in 0..d {
            for c in 0..g.cell_count() {
                init += s0.rho[c] * s0.u[c][j] * ints[0][j][c];
            }
        }
        let gravity = self.run.phys.gravity;
        let body = self.over_intervals(|k| {
            let s = self.state(k - 1);
            let st = self.stress(k - 1)?;
            let tm = self.mid(k);
            let mut sum = 0.0;
            for j in 0..d {
                let f = Self::at(&phi[j], tm);
                let gm = gradient_integrals(g, &f);
                let im = cell_integrals(g, &f);
                for c in 0..g.cell_count() {
                    let (r, u) = (s.rho[c], s.u[c]);
                    let p = r * s.theta[c];
                    sum += r * u[j] * (ints[k][j][c] - ints[k - 1][j][c]);
                    for i in 0..d {
                        let a_ij = st[c][i][j] - if i == j { p } else { 0.0 };
                        sum += self.dt() * (r * u[i] * u[j] - a_ij) * gm[c][i];
                    }
                    sum -= self.dt() * r * gravity[j] * im[c];
                }
            }
            Ok(sum)
        })?;
        Ok(init + body)
    }

    /// `<error_{rho theta}; phi>` of the internal energy balance.
    pub fn consistency_internal_energy(&self, phi: &ScalarFn) -> Result<f64> {
        let g = self.run.grid;
        let (cv, kappa) = (self.run.phys.c_v, self.run.phys.kappa);
        self.over_intervals(|k| {
            let (prev, s) = (self.state(k - 1), self.state(k));
            let lev = &self.levels[k - 1];
            let st = self.stress(k - 1)?;
            let f = Self::at(phi, self.mid(k));
            let im = cell_integrals(g, &f);
            let gm = gradient_integrals(g, &f);
            let dt = self.dt();
            let mut sum = 0.0;
            for c in 0..g.cell_count() {
                let rt_new = s.rho[c] * s.theta[c];
                let rt_old = prev.rho[c] * prev.theta[c];
                sum += cv * (rt_new - rt_old) * im[c];
                sum -= dt * cv * rt_old * dot(&prev.u[c], &gm[c]);
                let mut a = st[c];
                for i in 0..g.dim() {
                    a[i][i] -= rt_old;
                }
                sum -= dt * ddot(&a, &lev.grad[c]) * im[c];
            }
            for a in 0..g.dim() {
                let hg = half_gradient_integrals(g, a, &f);
                sum += dt * kappa * hg.pair(|id, _| lev.dtheta[a].values[id]);
            }
            Ok(sum)
        })
    }

    /// `<error_{rho s}; phi>` with `chi_h = 1`.
    pub fn consistency_entropy(&self, phi: &ScalarFn) -> Result<f64> {
        let g = self.run.grid;
        let kappa = self.run.phys.kappa;
        let ints: Vec<Vec<f64>> = (0..=self.steps())
            .map(|k| cell_integrals(g, &Self::at(phi, self.t(k))))
            .collect();
        let init: f64 = self.levels[0]
            .rho_s
            .iter()
            .zip(&ints[0])
            .map(|(r, i)| r * i)
            .sum();
        let body = self.over_intervals(|k| {
            let s = self.state(k - 1);
            let lev = &self.levels[k - 1];
            let st = self.stress(k - 1)?;
            let f = Self::at(phi, self.mid(k));
            let im = cell_integrals(g, &f);
            let gm = gradient_integrals(g, &f);
            let dt = self.dt();
            let mut sum = 0.0;
            for c in 0..g.cell_count() {
                sum += lev.rho_s[c] * (ints[k][c] - ints[k - 1][c]);
                sum += dt * lev.rho_s[c] * dot(&s.u[c], &gm[c]);
                sum += dt * ddot(&st[c], &lev.grad[c]) / s.theta[c] * im[c];
            }
            for a in 0..g.dim() {
                let dth = &lev.dtheta[a].values;
                let hg = half_gradient_integrals(g, a, &f);
                let hv = half_integrals(g, a, &f);
                sum -= dt * kappa * hg.pair(|id, c| dth[id] / s.theta[c]);
                sum += dt * kappa * hv.pair(|id, c| dth[id] * dth[id] / (s.theta[c] * s.theta[c]));
            }
            Ok(sum)
        })?;
        Ok(init + body)
    }

    /// `<error_BE; psi>` for a time weight `psi` and temperature extension `Theta`.
    pub fn consistency_ballistic(
        &self,
        psi: &(dyn Fn(f64) -> f64 + Sync),
        theta_ext: &ScalarFn,
    ) -> Result<f64> {
        let g = self.run.grid;
        let (cv, kappa) = (self.run.phys.c_v, self.run.phys.kappa);
        let vol = g.cell_volume();
        let gravity = self.run.phys.gravity;
        let ints: Vec<Vec<f64>> = (0..=self.steps())
            .map(|k| cell_integrals(g, &Self::at(theta_ext, self.t(k))))
            .collect();
        let energy = |s: &State, c: usize| {
            vol * (0.5 * s.rho[c] * dot(&s.u[c], &s.u[c]) + cv * s.rho[c] * s.theta[c])
        };
        let s0 = self.state(0);
        let init = psi(0.0)
            * (0..g.cell_count())
                .map(|c| energy(s0, c) - self.levels[0].rho_s[c] * ints[0][c])
                .sum::<f64>();
        let body = self.over_intervals(|k| {
            let s = self.state(k - 1);
            let lev = &self.levels[k - 1];
            let st = self.stress(k - 1)?;
            let dt = self.dt();
            let pm = psi(self.mid(k));
            let dpsi = psi(self.t(k)) - psi(self.t(k - 1));
            let f = Self::at(theta_ext, self.mid(k));
            let im = cell_integrals(g, &f);
            let gm = gradient_integrals(g, &f);
            let mut sum = 0.0;
            for c in 0..g.cell_count() {
                let (r, u, th) = (s.rho[c], s.u[c], s.theta[c]);
                sum += pm * dt * vol * r * dot(&gravity, &u);
                sum += dpsi * (energy(s, c) - lev.rho_s[c] * im[c]);
                sum -= pm * dt * ddot(&st[c], &lev.grad[c]) / th * im[c];
                sum -= pm * lev.rho_s[c] * (ints[k][c] - ints[k - 1][c]);
                sum -= pm * dt * lev.rho_s[c] * dot(&u, &gm[c]);
            }
            for a in 0..g.dim() {
                let dth = &lev.dtheta[a].values;
                let hv = half_integrals(g, a, &f);
                let hg = half_gradient_integrals(g, a, &f);
                sum -= pm
                    * dt
                    * kappa
                    * hv.pair(|id, c| dth[id] * dth[id] / (s.theta[c] * s.theta[c]));
                sum += pm * dt * kappa * hg.pair(|id, c| dth[id] / s.theta[c]);
            }
            Ok(sum)
        })?;
        Ok(init + body)
    }

    /// Compatibility of `u_h` with `D_h` against a symmetric tensor field.
    pub fn compatibility_velocity(&self, tensor: &[Vec<ScalarFn>]) -> Result<f64> {
        let g = self.run.grid;
        let d = g.dim();
        self.over_intervals(|k| {
            let s = self.state(k - 1);
            let lev = &self.levels[k - 1];
            let tm = self.mid(k);
            let mut sum = 0.0;
            for i in 0..d {
                for j in 0..d {
                    let f = Self::at(&tensor[i][j], tm);
                    let gm = gradient_integrals(g, &f);
                    let im = cell_integrals(g, &f);
                    for c in 0..g.cell_count() {
                        let dij = 0.5 * (lev.grad[c][i][j] + lev.grad[c][j][i]);
                        sum += s.u[c][i] * gm[c][j] + dij * im[c];
                    }
                }
            }
            Ok(self.dt() * sum)
        })
    }

    /// Compatibility of `|u_h|^2` with `grad_h` against a vector field.
    pub fn compatibility_kinetic(&self, psi: &[ScalarFn]) -> Result<f64> {
        let g = self.run.grid;
        let d = g.dim();
        self.over_intervals(|k| {
            let s = self.state(k - 1);
            let q: Vec<f64> = s.u.iter().map(|u| dot(u, u)).collect();
            let tm = self.mid(k);
            let mut sum = 0.0;
            for a in 0..d {
                let f = Self::at(&psi[a], tm);
                let gm = gradient_integrals(g, &f);
                let im = cell_integrals(g, &f);
                let dq = crate::operators::partial_h(g, &q, a, &GhostPolicy::Even)?;
                for c in 0..g.cell_count() {
                    sum += q[c] * gm[c][a] + dq[c] * im[c];
                }
            }
            Ok(self.dt() * sum)
        })
    }

    /// Compatibility of `G(theta_h)` with `grad_E` against a vector field,
    /// for `G(theta) = theta^power` with `power` 1 or 2. The smooth part
    /// `int (Theta^p div Psi + grad Theta^p . Psi)` is replaced by its exact
    /// value, the plate flux `int_{dOmega} Theta^p Psi . n`.
    pub fn compatibility_temperature(
        &self,
        psi: &[ScalarFn],
        theta_ext: &ScalarFn,
        power: i32,
    ) -> Result<f64> {
        let g = self.run.grid;
        let d = g.dim();
        let v = g.vertical_axis();
        self.over_intervals(|k| {
            let s = self.state(k - 1);
            let tm = self.mid(k);
            let q: Vec<f64> = s.theta.iter().map(|t| t.powi(power)).collect();
            let ghost = GhostPolicy::Custom(
                (0..g.exterior_count())
                    .map(|e| {
                        let inner = s.theta[g.face(g.exterior_face(e)).inner];
                        (2.0 * s.theta_b[e] - inner).powi(power)
                    })
                    .collect(),
            );
            let dq = grad_edge(g, &q, &ghost)?;
            let mut sum = 0.0;
            for a in 0..d {
                let f = Self::at(&psi[a], tm);
                let gm = gradient_integrals(g, &f);
                for c in 0..g.cell_count() {
                    sum += q[c] * gm[c][a];
                }
                let hv = half_integrals(g, a, &f);
                sum += hv.pair(|id, _| dq[a].values[id]);
            }
            let flux = |x: &Vec3| theta_ext(tm, x).powi(power) * psi[v](tm, x);
            let plates = face_integrals(g, v, &flux);
            for face_id in (0..g.exterior_count()).map(|e| g.exterior_face(e)) {
                sum -= g.face(face_id).normal * plates[face_id.id];
            }
            Ok(self.dt() * sum)
        })
    }

    /// `L_h = int int psi phi rho_h (rho_h theta_h - (2 mu + lambda) div_h u_h)`.
    pub fn lions_defect(&self, psi: &ScalarFn, phi: &ScalarFn) -> Result<f64> {
        let g = self.run.grid;
        let sp = self.run.phys.stress_params()?;
        let coef = 2.0 * sp.mu + sp.lambda(g.dim());
        self.over_intervals(|k| {
            let s = self.state(k - 1);
            let lev = &self.levels[k - 1];
            let tm = self.mid(k);
            let w = cell_integrals(g, &|x: &Vec3| psi(tm, x) * phi(tm, x));
            Ok(self.dt()
                * (0..g.cell_count())
                    .map(|c| s.rho[c] * (s.rho[c] * s.theta[c] - coef * lev.div[c]) * w[c])
                    .sum::<f64>())
        })
    }

    /// Uniform-bound quantities of the trajectory.
    pub fn stability(&self) -> StabilityReport {
        self.stability_series()
            .pop()
            .unwrap_or_else(|| self.report(&[0.0; 6], 0, Extremes::from_state(self.state(0))))
    }

    /// The stability report of every prefix `[0, t_n]`, `n = 1..=N`.
    pub fn stability_series(&self) -> Vec<StabilityReport> {
        let g = self.run.grid;
        let d = g.dim();
        let dt = self.dt();
        let area = g.face_area();
        let ha = g.h().powf(self.run.num.alpha);
        let per_level: Vec<[f64; 6]> = (1..=self.steps())
            .into_par_iter()
            .map(|k| {
                let (prev, s) = (self.state(k - 1), self.state(k));
                let lev = &self.levels[k];
                let mut out = [0.0; 6];
                out[0] = lev.dtheta.iter().map(|f| f.l2_norm(g).powi(2)).sum();
                out[1] = g.cell_volume() * lev.grad.iter().map(|m| ddot(m, m)).sum::<f64>();
                let mut dtsq = 0.0;
                for c in 0..g.cell_count() {
                    let mut v = ((s.rho[c] - prev.rho[c]) / dt).powi(2)
                        + ((s.theta[c] - prev.theta[c]) / dt).powi(2);
                    for j in 0..d {
                        v += ((s.u[c][j] - prev.u[c][j]) / dt).powi(2);
                    }
                    dtsq += g.cell_volume() * v;
                }
                out[2] = dtsq;
                let mut jumps = 0.0;
                let mut mismatch = 0.0;
                for a in 0..d {
                    for f in g.faces(a) {
                        match f.outer {
                            Neighbor::Cell(o) => {
                                let i = f.inner;
                                let w = 0.5 * (s.u[i][a] + s.u[o][a]);
                                let mut jj = (s.rho[o] - s.rho[i]).powi(2)
                                    + (s.theta[o] - s.theta[i]).powi(2);
                                for j in 0..d {
                                    jj += (s.u[o][j] - s.u[i][j]).powi(2);
                                }
                                jumps += area * (ha + w.abs()) * jj;
                            }
                            Neighbor::Ghost(e) => {
                                mismatch += area * (s.theta[f.inner] - s.theta_b[e]).powi(2);
                            }
                        }
                    }
                }
                out[3] = jumps;
                out[4] = mismatch;
                let mut ge = 0.0;
                for j in 0..d {
                    let uj = s.u.component(j);
                    if let Ok(e) = grad_edge(g, &uj, &GhostPolicy::MirrorOdd) {
                        ge += e.iter().map(|f| f.l2_norm(g).powi(2)).sum::<f64>();
                    }
                }
                out[5] = ge;
                out
            })
            .collect();
        let mut acc = [0.0; 6];
        let mut ext = Extremes::from_state(self.state(0));
        let mut out = Vec::with_capacity(per_level.len());
        for (k, row) in per_level.iter().enumerate() {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += dt * v;
            }
            ext.update(self.state(k + 1));
            out.push(self.report(&acc, k + 1, ext));
        }
        out
    }

    fn report(&self, acc: &[f64; 6], steps: usize, extremes: Extremes) -> StabilityReport {
        let dt = self.dt();
        StabilityReport {
            h: self.run.grid.h(),
            dt,
            final_time: self.t(steps),
            grad_theta: acc[0].sqrt(),
            grad_u: acc[1].sqrt(),
            time_increments: (dt * acc[2]).sqrt(),
            jump_dissipation: acc[3],
            boundary_mismatch: acc[4],
            edge_grad_u: acc[5].sqrt(),
            extremes,
        }
    }
}

/// Bounds of the solution over all levels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extremes {
    pub rho_min: f64,
    pub rho_max: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    pub u_max: f64,
}

impl Extremes {
    pub fn from_state(s: &State) -> Self {
        let mut e = Self {
            rho_min: f64::INFINITY,
            rho_max: f64::NEG_INFINITY,
            theta_min: f64::INFINITY,
            theta_max: f64::NEG_INFINITY,
            u_max: 0.0,
        };
        e.update(s);
        e
    }

    pub fn update(&mut self, s: &State) {
        self.rho_min = self.rho_min.min(s.rho.min());
        self.rho_max = self.rho_max.max(s.rho.max());
        self.theta_min = self.theta_min.min(s.theta.min());
        self.theta_max = self.theta_max.max(s.theta.max());
        self.u_max = self.u_max.max(s.u.max_norm());
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StabilityReport {
    pub h: f64,
    pub dt: f64,
    pub final_time: f64,
    /// `||grad_E theta_h||_{L^2((0,T) x Omega)}`.
    pub grad_theta: f64,
    /// `||grad_h u_h||_{L^2((0,T) x Omega)}`.
    pub grad_u: f64,
    /// `dt^{1/2} ||D_t (rho, u, theta)||_{L^2}`.
    pub time_increments: f64,
    /// `int sum_int (h^alpha + |<u>.n|) |[[(rho, u, theta)]]|^2`.
    pub jump_dissipation: f64,
    /// `int sum_ext |theta_in - theta_B|^2`.
    pub boundary_mismatch: f64,
    /// `||grad_E u_h||_{L^2((0,T) x Omega)}`.
    pub edge_grad_u: f64,
    pub extremes: Extremes,
}

impl StabilityReport {
    /// The five bound quantities divided by their expected `h` scaling.
    pub fn normalized(&self, alpha: f64) -> [f64; 5] {
        [
            self.grad_theta + self.grad_u,
            self.time_increments,
            self.jump_dissipation,
            self.edge_grad_u * self.h.powf(0.5 * (1.0 + alpha)),
            self.boundary_mismatch / self.h,
        ]
    }

    pub const NAMES: [&'static str; 5] = [
        "gradients",
        "time_increments",
        "jump_dissipation",
        "edge_gradient_u",
        "boundary_mismatch",
    ];

    /// `Lambda = T + ||theta_B||_{W^{2,inf}} + 1/rho_min + rho_max + 1/theta_min
    /// + theta_max + u_max + 1/c_low + c_high` with `c = dt / h`.
    pub fn lambda(&self, theta_b_w2inf: f64) -> f64 {
        let e = &self.extremes;
        let c = self.dt / self.h;
        self.final_time
            + theta_b_w2inf
            + 1.0 / e.rho_min
            + e.rho_max
            + 1.0 / e.theta_min
            + e.theta_max
            + e.u_max
            + 1.0 / c
            + c
    }
}

/// Sampled `W^{2,inf}` norm of the temperature extension on `[0,T] x Omega`:
/// the sum of the maxima of `|Theta|`, of its first and of its second
/// derivatives (central differences).
pub fn extension_w2inf(theta_ext: &ScalarFn, grid: &Grid, t_final: f64) -> f64 {
    let d = grid.dim();
    let (l, hh) = (grid.spec().half_period, grid.spec().half_height);
    let step = 1e-4;
    let samples = 6usize;
    let mut m0 = 0.0f64;
    let mut m1 = 0.0f64;
    let mut m2 = 0.0f64;
    let total = samples.pow(d as u32 + 1);
    for idx in 0..total {
        let mut rem = idx;
        let mut p = [0.0; MAX_DIM + 1];
        for (a, slot) in p.iter_mut().enumerate().take(d + 1) {
            let i = rem % samples;
            rem /= samples;
            let s = (i as f64 + 0.5) / samples as f64;
            *slot = if a == d {
                s * t_final
            } else if a + 1 == d {
                (2.0 * s - 1.0) * (hh - 2.0 * step)
            } else {
                (2.0 * s - 1.0) * l
            };
        }
        let eval = |q: &[f64; MAX_DIM + 1]| theta_ext(q[d], &[q[0], q[1], q[2]]);
        let f0 = eval(&p);
        m0 = m0.max(f0.abs());
        for a in 0..=d {
            let mut pp = p;
            let mut pm = p;
            pp[a] += step;
            pm[a] -= step;
            let (fp, fm) = (eval(&pp), eval(&pm));
            m1 = m1.max(((fp - fm) / (2.0 * step)).abs());
            m2 = m2.max(((fp - 2.0 * f0 + fm) / (step * step)).abs());
        }
    }
    m0 + m1 + m2
}

/// A convex (or linear) renormalization `B`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Renormalization {
    Linear,
    Square,
    /// `B(z) = z log z`.
    EntropyLog,
}

impl Renormalization {
    pub fn b(self, z: f64) -> f64 {
        match self {
            Renormalization::Linear => z,
            Renormalization::Square => z * z,
            Renormalization::EntropyLog => z * z.ln(),
        }
    }

    pub fn db(self, z: f64) -> f64 {
        match self {
            Renormalization::Linear => 1.0,
            Renormalization::Square => 2.0 * z,
            Renormalization::EntropyLog => z.ln() + 1.0,
        }
    }

    /// `E_B(v1 | v2) = B(v1) - B'(v2)(v1 - v2) - B(v2)`.
    pub fn relative(self, v1: f64, v2: f64) -> f64 {
        self.b(v1) - self.db(v2) * (v1 - v2) - self.b(v2)
    }
}

/// Both sides of the renormalized continuity identity on one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenormTerms {
    pub lhs: f64,
    /// `-(1/dt) int phi E_B(rho_prev | rho)`.
    pub time: f64,
    /// `-h^alpha sum_int |sigma| [[rho]] [[B'(rho) phi]]`.
    pub jump: f64,
    /// `-sum_int |sigma| |<u>.n| phi_down E_B(rho_up | rho_down)`.
    pub upwind: f64,
}

impl RenormTerms {
    pub fn rhs(&self) -> f64 {
        self.time + self.jump + self.upwind
    }

    pub fn residual(&self) -> f64 {
        self.lhs - self.rhs()
    }
}

/// Evaluates the renormalized continuity identity for the step `prev -> next`.
pub fn renormalized_terms(
    grid: &Grid,
    prev: &State,
    next: &State,
    dt: f64,
    alpha: f64,
    b: Renormalization,
    phi: &[f64],
) -> Result<RenormTerms> {
    let vol = grid.cell_volume();
    let area = grid.face_area();
    let ha = grid.h().powf(alpha);
    let rho = &next.rho;
    let div = crate::operators::div_h(grid, &next.u, &[GhostPolicy::MirrorOdd])?;
    let mut lhs = 0.0;
    let mut time = 0.0;
    for c in 0..grid.cell_count() {
        let r = rho[c];
        lhs += vol * (b.b(r) - b.b(prev.rho[c])) / dt * phi[c];
        lhs += vol * phi[c] * (r * b.db(r) - b.b(r)) * div[c];
        time -= vol * phi[c] * b.relative(prev.rho[c], r) / dt;
    }
    let mut jump = 0.0;
    let mut upwind = 0.0;
    for a in 0..grid.dim() {
        for f in grid.faces(a) {
            let Neighbor::Cell(o) = f.outer else { continue };
            let i = f.inner;
            let w = 0.5 * (next.u[i][a] + next.u[o][a]);
            let (up, down) = if w >= 0.0 { (i, o) } else { (o, i) };
            let flux = b.b(rho[up]) * w;
            lhs -= area * flux * (phi[o] - phi[i]);
            jump -= ha * area * (rho[o] - rho[i]) * (b.db(rho[o]) * phi[o] - b.db(rho[i]) * phi[i]);
            upwind -= area * w.abs() * phi[down] * b.relative(rho[up], rho[down]);
        }
    }
    Ok(RenormTerms {
        lhs,
        time,
        jump,
        upwind,
    })
}

/// `int rho^n log rho^n + sum_{k<=n} dt int rho^k div_h u^k - int rho^0 log rho^0`
/// for every level `n`.
pub fn rho_log_rho_defect(grid: &Grid, traj: &Trajectory) -> Result<Vec<f64>> {
    let vol = grid.cell_volume();
    let entropy = |s: &State| -> f64 { vol * s.rho.iter().map(|r| r * r.ln()).sum::<f64>() };
    let e0 = entropy(&traj.states[0]);
    let mut out = vec![0.0];
    let mut acc = 0.0;
    for s in &traj.states[1..] {
        let div = crate::operators::div_h(grid, &s.u, &[GhostPolicy::MirrorOdd])?;
        acc += traj.dt
            * vol
            * s.rho
                .iter()
                .zip(div.iter())
                .map(|(r, d)| r * d)
                .sum::<f64>();
        out.push(entropy(s) + acc - e0);
    }
    Ok(out)
}

/// Values of one functional across refinement levels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DefectSeries {
    /// `(h, value)` pairs.
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateFit {
    pub order: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the log-log fit.
    pub residual: f64,
    pub used: usize,
    /// Points dropped because their value was zero or not finite.
    pub dropped: usize,
}

/// Least-squares slope of `log |value|` against `log h`.
pub fn rate_fit(series: &DefectSeries) -> Result<RateFit> {
    let pts: Vec<(f64, f64)> = series
        .points
        .iter()
        .filter(|(h, v)| *h > 0.0 && v.abs() > 0.0 && v.is_finite())
        .map(|(h, v)| (h.ln(), v.abs().ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::TooFewPoints(pts.len()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let order = sxy / sxx;
    let intercept = my - order * mx;
    let residual = (pts
        .iter()
        .map(|p| (p.1 - intercept - order * p.0).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(RateFit {
        order,
        intercept,
        residual,
        used: pts.len(),
        dropped: series.points.len() - pts.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::scheme::{advance, constant_state, init_state};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn phys(dim: usize, g: f64, theta_b: BoundaryTemperature) -> PhysParams {
        let mut gravity = [0.0; MAX_DIM];
        gravity[dim - 1] = g;
        PhysParams {
            mu: 0.1,
            eta: 0.0,
            kappa: 0.1,
            c_v: 1.5,
            gravity,
            theta_b,
        }
    }

    #[test]
    fn bump_shapes() {
        assert_eq!(bump(0.0), 1.0);
        assert_eq!(bump(1.0), 0.0);
        assert_eq!(time_cutoff(0.0, 1.0), 1.0);
        assert_eq!(time_cutoff(1.0, 1.0), 0.0);
        assert!(time_cutoff(0.5, 1.0) > 0.0);
    }

    #[test]
    fn rate_fit_examples() {
        let exact = DefectSeries {
            points: [8.0, 16.0, 32.0, 64.0]
                .iter()
                .map(|n| (1.0 / n, 3.0 / n))
                .collect(),
        };
        assert!((rate_fit(&exact).unwrap().order - 1.0).abs() < 1e-12);
        let quarter = DefectSeries {
            points: [8.0, 16.0, 32.0, 64.0]
                .iter()
                .map(|n: &f64| (1.0 / n, 2.0 * (1.0 / n).powf(0.25)))
                .collect(),
        };
        assert!((rate_fit(&quarter).unwrap().order - 0.25).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let noisy = DefectSeries {
                points: [8.0, 16.0, 32.0, 64.0]
                    .iter()
                    .map(|n: &f64| {
                        let noise = 1.0 + 0.05 * rng.random_range(-1.0..1.0);
                        (1.0 / n, 0.7 * (1.0 / n).powf(0.6) * noise)
                    })
                    .collect(),
            };
            assert!((rate_fit(&noisy).unwrap().order - 0.6).abs() <= 0.05);
        }
        let short = DefectSeries {
            points: vec![(0.1, 1.0), (0.05, 0.0), (0.025, 0.3)],
        };
        assert_eq!(rate_fit(&short), Err(Error::TooFewPoints(2)));
    }

    #[test]
    fn renormalization_relative_entropy() {
        assert_eq!(Renormalization::Linear.relative(2.0, 1.0), 0.0);
        assert_eq!(Renormalization::Square.relative(3.0, 1.0), 4.0);
        assert!(Renormalization::EntropyLog.relative(2.0, 1.0) > 0.0);
    }

    #[test]
    fn constant_trajectory_has_no_defects() {
        let grid = Grid::new(GridSpec::unit(2, 8)).unwrap();
        let p = phys(2, 0.0, BoundaryTemperature::constant(1.1));
        let num = NumParams::default();
        let s0 = constant_state(&grid, 0.9, 1.1);
        let traj = advance(&grid, s0, 6, &p, &num, |_, _| {});
        let t_final = traj.dt * 6.0;
        let diag = Diagnostics::new(Run {
            grid: &grid,
            traj: &traj,
            phys: &p,
            num: &num,
        })
        .unwrap();
        let smooth = TestFunctionFamily::new(&grid, t_final, Flavor::SlabSmooth, false);
        let compact = TestFunctionFamily::new(&grid, t_final, Flavor::CompactBump, false);
        let positive = TestFunctionFamily::new(&grid, t_final, Flavor::CompactBump, true);
        let open = TestFunctionFamily::new(&grid, t_final, Flavor::Open, false);
        let theta = theta_extension(&p.theta_b, &grid);
        let values = [
            diag.consistency_continuity(&smooth.scalar()).unwrap(),
            diag.consistency_momentum(&compact.vector()).unwrap(),
            diag.consistency_internal_energy(&compact.scalar()).unwrap(),
            diag.consistency_entropy(&positive.scalar()).unwrap(),
            diag.consistency_ballistic(&|t| time_cutoff(t, t_final), &theta)
                .unwrap(),
            diag.compatibility_velocity(&open.sym_tensor()).unwrap(),
            diag.compatibility_kinetic(&open.vector()).unwrap(),
            diag.compatibility_temperature(&open.vector(), &theta, 1)
                .unwrap(),
            diag.compatibility_temperature(&open.vector(), &theta, 2)
                .unwrap(),
        ];
        for (i, v) in values.iter().enumerate() {
            assert!(v.abs() <= 1e-10, "functional {i}: {v:e}");
        }
        let st = diag.stability();
        assert_eq!(st.grad_theta, 0.0);
        assert_eq!(st.grad_u, 0.0);
        assert_eq!(st.jump_dissipation, 0.0);
        assert!(st.boundary_mismatch < 1e-28);
        let (psi, phi) = lions_pair(&grid, t_final);
        let lions = diag.lions_defect(&psi, &phi).unwrap();
        // u = 0 and rho theta = 0.99: L_h = rho * rho theta * int int psi phi
        let mut direct = 0.0;
        for k in 1..=6 {
            let tm = traj.dt * (k as f64 - 0.5);
            direct += traj.dt
                * cell_integrals(&grid, &|x| psi(tm, x) * phi(tm, x))
                    .iter()
                    .sum::<f64>();
        }
        assert!((lions - 0.9 * 0.99 * direct).abs() < 1e-13);
    }

    #[test]
    fn stability_hand_sum_on_small_grid() {
        // two by two cells, one step, only a density jump across x_1 faces
        let grid = Grid::new(GridSpec::new(2, 0.5, 0.5, 0.5)).unwrap();
        let p = phys(2, 0.0, BoundaryTemperature::constant(1.0));
        let num = NumParams::default();
        let s0 = constant_state(&grid, 1.0, 1.0);
        let mut s1 = s0.clone();
        s1.level = 1;
        for c in 0..grid.cell_count() {
            if grid.cell_index(c)[0] == 1 {
                s1.rho[c] = 2.0;
            }
        }
        let traj = Trajectory {
            dt: 0.05,
            states: vec![s0, s1],
            stats: vec![],
            failure: None,
        };
        let diag = Diagnostics::new(Run {
            grid: &grid,
            traj: &traj,
            phys: &p,
            num: &num,
        })
        .unwrap();
        let st = diag.stability();
        // 4 x_1-faces carry [[rho]]^2 = 1 with weight h^alpha; |sigma| = 0.5, dt = 0.05
        let expected = 0.05 * 4.0 * 0.5 * 0.5f64.powf(0.5);
        assert!((st.jump_dissipation - expected).abs() < 1e-15);
    }

    #[test]
    fn continuity_hand_evaluation() {
        // one step, two columns: only the initial and time terms survive for u = 0
        let grid = Grid::new(GridSpec::new(2, 0.5, 0.25, 0.5)).unwrap();
        let p = phys(2, 0.0, BoundaryTemperature::constant(1.0));
        let num = NumParams::default();
        let mut s0 = constant_state(&grid, 1.0, 1.0);
        s0.rho[1] = 3.0;
        let mut s1 = s0.clone();
        s1.level = 1;
        let traj = Trajectory {
            dt: 0.1,
            states: vec![s0.clone(), s1],
            stats: vec![],
            failure: None,
        };
        let diag = Diagnostics::new(Run {
            grid: &grid,
            traj: &traj,
            phys: &p,
            num: &num,
        })
        .unwrap();
        let phi: ScalarFn = Arc::new(|t, x| (1.0 - 10.0 * t) * (1.0 + x[0]));
        // rho^0 phi(0) + rho^0 (phi(0.1) - phi(0)) = rho^0 phi(0.1) = 0
        let v = diag.consistency_continuity(&phi).unwrap();
        assert!(v.abs() < 1e-15, "{v}");
        let phi: ScalarFn = Arc::new(|_, x| 1.0 + x[0]);
        // int rho^0 (1 + x_1): cells at x_1 centre -0.25 and 0.25, area 0.25
        let v = diag.consistency_continuity(&phi).unwrap();
        let expected = 0.25 * (1.0 * 0.75 + 3.0 * 1.25);
        assert!((v - expected).abs() < 1e-14, "{v} {expected}");
    }

    #[test]
    fn renormalized_identity_on_perturbed_steps() {
        let grid = Grid::new(GridSpec::unit(2, 8)).unwrap();
        let p = phys(2, -1.0, BoundaryTemperature::two_plate(1.2, 1.0, 2));
        let num = NumParams::default();
        let pi = std::f64::consts::PI;
        let s0 = init_state(
            &grid,
            |x| 1.0 + 0.2 * (2.0 * pi * x[0]).sin() * (pi * x[1]).cos(),
            |x| {
                [
                    0.2 * (2.0 * pi * x[0]).cos(),
                    0.1 * (2.0 * pi * x[0]).sin(),
                    0.0,
                ]
            },
            |x| 1.1 - 0.2 * x[1],
            &p,
        )
        .unwrap();
        let traj = advance(&grid, s0, 5, &p, &num, |_, _| {});
        assert!(traj.is_complete());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for w in traj.states.windows(2) {
            for b in [
                Renormalization::Square,
                Renormalization::EntropyLog,
                Renormalization::Linear,
            ] {
                let phi: Vec<f64> = (0..grid.cell_count())
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect();
                let t =
                    renormalized_terms(&grid, &w[0], &w[1], traj.dt, num.alpha, b, &phi).unwrap();
                assert!(t.residual().abs() <= 1e-8, "{b:?}: {:e}", t.residual());
                let ones = vec![1.0; grid.cell_count()];
                let t =
                    renormalized_terms(&grid, &w[0], &w[1], traj.dt, num.alpha, b, &ones).unwrap();
                assert!(t.rhs() <= 1e-12);
            }
        }
        let defect = rho_log_rho_defect(&grid, &traj).unwrap();
        let mut oracle = 0.0;
        for (n, w) in traj.states.windows(2).enumerate() {
            let ones = vec![1.0; grid.cell_count()];
            let t = renormalized_terms(
                &grid,
                &w[0],
                &w[1],
                traj.dt,
                num.alpha,
                Renormalization::EntropyLog,
                &ones,
            )
            .unwrap();
            oracle += traj.dt * t.rhs();
            assert!(defect[n + 1] <= 1e-10);
            assert!(
                (defect[n + 1] - oracle).abs() <= 1e-10,
                "{} {}",
                defect[n + 1],
                oracle
            );
        }
    }

    #[test]
    fn half_cell_gradients_telescope() {
        let grid = Grid::new(GridSpec::unit(2, 4)).unwrap();
        let f = |x: &Vec3| (x[0] * 3.0).sin() + x[1] * x[1];
        for axis in 0..2 {
            let hg = half_gradient_integrals(&grid, axis, &f);
            let cells = gradient_integrals(&grid, &f);
            let mut per_cell = vec![0.0; grid.cell_count()];
            hg.pair(|_, _| 1.0);
            for (vals, &n) in hg.values.iter().zip(&hg.counts) {
                for &(c, v) in &vals[..n] {
                    per_cell[c] += v;
                }
            }
            for c in 0..grid.cell_count() {
                assert!((per_cell[c] - cells[c][axis]).abs() < 1e-14);
            }
        }
    }
}
