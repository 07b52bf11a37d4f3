//! Backward-Euler upwind finite volume scheme: residual assembly, analytic
//! Jacobian, semismooth Newton solve per step and trajectory advance.
//!
//! Unknowns are primitive `(rho, u_1..u_d, theta)` per cell, stored with the
//! cell index outermost: `cell * (d + 2) + var`.

use std::fmt;
use std::sync::Arc;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMat, SymbolicSparseColMat};
use faer::{Mat, Par};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{
    ddot, project_boundary, project_cell_average, project_cell_average_vector, trace,
    BoundaryFaceField, CellScalarField, CellVectorField, InterpolationMode, Mat3, Quadrature,
    State, TimeInterpolant, Vec3, ZERO_MAT,
};
use crate::grid::{Grid, Neighbor, MAX_DIM};
use crate::operators::{check_alpha, stress_from_gradient, StressParams};

type PlateFn = dyn Fn(f64, &Vec3) -> f64 + Send + Sync;

/// Boundary temperature `theta_B(t, x)`, read on the plates `x_d = +-H`.
#[derive(Clone)]
pub struct BoundaryTemperature {
    f: Arc<PlateFn>,
    label: String,
}

impl fmt::Debug for BoundaryTemperature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BoundaryTemperature({})", self.label)
    }
}

impl BoundaryTemperature {
    pub fn constant(value: f64) -> Self {
        Self {
            f: Arc::new(move |_, _| value),
            label: format!("constant {value}"),
        }
    }

    /// `bottom` on `x_d = -H` and `top` on `x_d = +H`.
    pub fn two_plate(bottom: f64, top: f64, dim: usize) -> Self {
        Self {
            f: Arc::new(move |_, x| if x[dim - 1] < 0.0 { bottom } else { top }),
            label: format!("plates {bottom} / {top}"),
        }
    }

    pub fn from_fn(
        label: impl Into<String>,
        f: impl Fn(f64, &Vec3) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            f: Arc::new(f),
            label: label.into(),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn eval(&self, t: f64, x: &Vec3) -> f64 {
        (self.f)(t, x)
    }

    /// Affine blend in `x_d` of the two plate values, a smooth extension of
    /// the boundary data into the slab.
    pub fn extension(&self, t: f64, x: &Vec3, dim: usize, half_height: f64) -> f64 {
        let v = dim - 1;
        let mut lo = *x;
        let mut hi = *x;
        lo[v] = -half_height;
        hi[v] = half_height;
        let s = (x[v] + half_height) / (2.0 * half_height);
        (1.0 - s) * self.eval(t, &lo) + s * self.eval(t, &hi)
    }

    /// `Pi_E^(d) theta_B(t, .)` on the exterior faces.
    pub fn faces(&self, grid: &Grid, t: f64) -> BoundaryFaceField {
        project_boundary(grid, |x| self.eval(t, x), Quadrature::Gauss(3))
    }
}

/// Physical coefficients.
#[derive(Clone, Debug)]
pub struct PhysParams {
    pub mu: f64,
    pub eta: f64,
    pub kappa: f64,
    pub c_v: f64,
    pub gravity: Vec3,
    pub theta_b: BoundaryTemperature,
}

impl PhysParams {
    pub fn stress_params(&self) -> Result<StressParams> {
        StressParams::new(self.mu, self.eta)
    }

    pub fn validate(&self) -> Result<()> {
        self.stress_params()?;
        if !(self.kappa > 0.0) {
            return Err(Error::InvalidParameter {
                name: "kappa",
                reason: format!("heat conductivity must be positive, got {}", self.kappa),
            });
        }
        if !(self.c_v > 0.0) {
            return Err(Error::InvalidParameter {
                name: "c_v",
                reason: format!("heat capacity must be positive, got {}", self.c_v),
            });
        }
        Ok(())
    }
}

/// Discretisation and solver controls.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NumParams {
    pub alpha: f64,
    /// `dt = c_t * h`.
    pub c_t: f64,
    /// Newton stops once the residual max-norm is at most this.
    pub newton_tol: f64,
    pub max_newton: usize,
    /// Relative residual accepted from the sparse direct solve.
    pub linear_tol: f64,
    /// Smallest line-search step before giving up on descent.
    pub min_damping: f64,
}

impl Default for NumParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            c_t: 0.1,
            newton_tol: 1e-11,
            max_newton: 30,
            linear_tol: 1e-8,
            min_damping: 1.0 / 1024.0,
        }
    }
}

impl NumParams {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        let positive = [
            ("c_t", self.c_t),
            ("newton_tol", self.newton_tol),
            ("linear_tol", self.linear_tol),
            ("min_damping", self.min_damping),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::InvalidParameter {
                    name,
                    reason: format!("must be positive, got {v}"),
                });
            }
        }
        if self.max_newton == 0 {
            return Err(Error::InvalidParameter {
                name: "max_newton",
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }

    pub fn dt(&self, h: f64) -> f64 {
        self.c_t * h
    }
}

/// `rho_h^0 = Pi_Q rho_0` and so on, with the plate temperature at `t = 0`.
pub fn init_state(
    grid: &Grid,
    rho0: impl Fn(&Vec3) -> f64,
    u0: impl Fn(&Vec3) -> Vec3,
    theta0: impl Fn(&Vec3) -> f64,
    phys: &PhysParams,
) -> Result<State> {
    let quad = Quadrature::Gauss(3);
    let state = State {
        rho: project_cell_average(grid, rho0, quad),
        u: project_cell_average_vector(grid, u0, quad),
        theta: project_cell_average(grid, theta0, quad),
        theta_b: phys.theta_b.faces(grid, 0.0),
        level: 0,
    };
    state.check_positive()?;
    Ok(state)
}

/// Per-cell residual blocks `(R_rho, R_m, R_theta)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Residual {
    pub nv: usize,
    pub values: Vec<f64>,
}

impl Residual {
    pub fn get(&self, cell: usize, var: usize) -> f64 {
        self.values[cell * self.nv + var]
    }

    pub fn inf_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Per face: does the upwind value come from the `in` cell?
#[derive(Clone, Debug, PartialEq)]
pub struct UpwindFlags(pub Vec<Vec<bool>>);

pub fn upwind_flags(grid: &Grid, u: &CellVectorField) -> UpwindFlags {
    UpwindFlags(
        (0..grid.dim())
            .map(|a| {
                grid.faces(a)
                    .iter()
                    .map(|f| match f.outer {
                        Neighbor::Cell(c) => u[f.inner][a] + u[c][a] >= 0.0,
                        Neighbor::Ghost(_) => true,
                    })
                    .collect()
            })
            .collect(),
    )
}

/// The two cells of the MirrorOdd centred difference `partial_x` at `c`.
#[inline]
fn stencil(grid: &Grid, c: usize, x: usize) -> [(usize, f64); 2] {
    let w = 0.5 / grid.h();
    let plus = match grid.neighbor(c, x, true) {
        Neighbor::Cell(p) => (p, w),
        Neighbor::Ghost(_) => (c, -w),
    };
    let minus = match grid.neighbor(c, x, false) {
        Neighbor::Cell(m) => (m, -w),
        Neighbor::Ghost(_) => (c, w),
    };
    [plus, minus]
}

/// `G[a][b] = partial_a u_b` with velocity ghosts `-u`.
fn velocity_gradient(grid: &Grid, u: &CellVectorField, c: usize) -> Mat3 {
    let mut g = ZERO_MAT;
    for x in 0..grid.dim() {
        for (e, w) in stencil(grid, c, x) {
            for b in 0..grid.dim() {
                g[x][b] += w * u[e][b];
            }
        }
    }
    g
}

struct Ctx<'a> {
    grid: &'a Grid,
    prev: &'a State,
    guess: &'a State,
    phys: &'a PhysParams,
    sp: StressParams,
    alpha: f64,
    dt: f64,
    flags: &'a UpwindFlags,
    grads: Vec<Mat3>,
    stresses: Vec<Mat3>,
}

/// Residual rows of one cell and, when asked, their Jacobian entries.
struct Block {
    res: [f64; MAX_DIM + 2],
    jac: Option<Vec<Vec<(usize, f64)>>>,
}

impl Block {
    #[inline]
    fn add(&mut self, row: usize, col: usize, v: f64) {
        if let Some(j) = self.jac.as_mut() {
            j[row].push((col, v));
        }
    }
}

impl<'a> Ctx<'a> {
    fn new(
        grid: &'a Grid,
        prev: &'a State,
        guess: &'a State,
        phys: &'a PhysParams,
        num: &NumParams,
        flags: &'a UpwindFlags,
    ) -> Result<Self> {
        let sp = phys.stress_params()?;
        let dim = grid.dim();
        let grads: Vec<Mat3> = (0..grid.cell_count())
            .into_par_iter()
            .map(|c| velocity_gradient(grid, &guess.u, c))
            .collect();
        let stresses = grads
            .par_iter()
            .map(|g| stress_from_gradient(g, &sp, dim))
            .collect();
        Ok(Self {
            grid,
            prev,
            guess,
            phys,
            sp,
            alpha: num.alpha,
            dt: num.dt(grid.h()),
            flags,
            grads,
            stresses,
        })
    }

    fn nv(&self) -> usize {
        self.grid.dim() + 2
    }

    #[inline]
    fn col(&self, cell: usize, var: usize) -> usize {
        cell * self.nv() + var
    }

    /// `A_c = S_c - p_c I`.
    fn total_stress(&self, c: usize) -> Mat3 {
        let mut a = self.stresses[c];
        let p = self.guess.rho[c] * self.guess.theta[c];
        for i in 0..self.grid.dim() {
            a[i][i] -= p;
        }
        a
    }

    /// Adds `sign * d A_c[j][a]` to `row`.
    fn stress_entry_jac(
        &self,
        blk: &mut Block,
        row: usize,
        c: usize,
        j: usize,
        a: usize,
        sign: f64,
    ) {
        if blk.jac.is_none() {
            return;
        }
        let d = self.grid.dim();
        let (mu, lambda) = (self.sp.mu, self.sp.lambda(d));
        for (e, w) in stencil(self.grid, c, j) {
            blk.add(row, self.col(e, 1 + a), sign * mu * w);
        }
        for (e, w) in stencil(self.grid, c, a) {
            blk.add(row, self.col(e, 1 + j), sign * mu * w);
        }
        if j == a {
            for y in 0..d {
                for (e, w) in stencil(self.grid, c, y) {
                    blk.add(row, self.col(e, 1 + y), sign * lambda * w);
                }
            }
            blk.add(row, self.col(c, 0), -sign * self.guess.theta[c]);
            blk.add(row, self.col(c, d + 1), -sign * self.guess.rho[c]);
        }
    }

    fn block(&self, k: usize, want_jac: bool) -> Block {
        let grid = self.grid;
        let d = grid.dim();
        let nv = d + 2;
        let th = d + 1;
        let h = grid.h();
        let hd = grid.cell_volume();
        let af = grid.face_area();
        let ha = h.powf(self.alpha);
        let kap = self.phys.kappa * h.powi(d as i32 - 2);
        let cv = self.phys.c_v;
        let (g, p) = (self.guess, self.prev);
        let mut blk = Block {
            res: [0.0; MAX_DIM + 2],
            jac: want_jac.then(|| vec![Vec::with_capacity(64); nv]),
        };
        let c = |cell, var| self.col(cell, var);
        let rk = g.rho[k];
        let tk = g.theta[k];
        let uk = g.u[k];
        let s = hd / self.dt;

        // time differences of rho, rho u and c_v rho theta
        blk.res[0] += s * (rk - p.rho[k]);
        blk.add(0, c(k, 0), s);
        for j in 0..d {
            blk.res[1 + j] += s * (rk * uk[j] - p.rho[k] * p.u[k][j]);
            blk.add(1 + j, c(k, 0), s * uk[j]);
            blk.add(1 + j, c(k, 1 + j), s * rk);
        }
        blk.res[th] += cv * s * (rk * tk - p.rho[k] * p.theta[k]);
        blk.add(th, c(k, 0), cv * s * tk);
        blk.add(th, c(k, th), cv * s * rk);

        let a_k = self.total_stress(k);
        for cf in grid.faces_of(k) {
            let ax = cf.face.axis;
            let n = match cf.neighbor {
                Neighbor::Cell(n) => n,
                Neighbor::Ghost(e) => {
                    blk.res[th] += 2.0 * kap * (tk - g.theta_b[e]);
                    blk.add(th, c(k, th), 2.0 * kap);
                    continue;
                }
            };
            let sgn = cf.outward;
            let un = g.u[n];
            let w = 0.5 * sgn * (uk[ax] + un[ax]);
            let from_in = self.flags.0[ax][cf.face.id];
            let up_k = if sgn > 0.0 { from_in } else { !from_in };
            let (ik, iu) = if up_k { (1.0, 0.0) } else { (0.0, 1.0) };
            let rn = g.rho[n];

            // transported quantities rho * phi, phi = 1, u_j, theta
            for (row, scale, phi) in std::iter::once((0usize, 1.0, None))
                .chain((0..d).map(|j| (1 + j, 1.0, Some(1 + j))))
                .chain(std::iter::once((th, cv, Some(th))))
            {
                let value = |cell: usize| -> f64 {
                    match phi {
                        None => 1.0,
                        Some(v) if v == th => g.theta[cell],
                        Some(v) => g.u[cell][v - 1],
                    }
                };
                let (pk, pn) = (value(k), value(n));
                let (qk, qn) = (rk * pk, rn * pn);
                let qup = ik * qk + iu * qn;
                let f = qup * w - ha * (qn - qk);
                let sc = scale * af;
                blk.res[row] += sc * f;
                if want_jac {
                    blk.add(row, c(k, 0), sc * (ik * pk * w + ha * pk));
                    blk.add(row, c(n, 0), sc * (iu * pn * w - ha * pn));
                    if let Some(v) = phi {
                        blk.add(row, c(k, v), sc * (ik * rk * w + ha * rk));
                        blk.add(row, c(n, v), sc * (iu * rn * w - ha * rn));
                    }
                    blk.add(row, c(k, 1 + ax), sc * qup * 0.5 * sgn);
                    blk.add(row, c(n, 1 + ax), sc * qup * 0.5 * sgn);
                }
            }

            // V term: the adjoint of the stress against D_h
            let a_n = self.total_stress(n);
            for j in 0..d {
                let row = 1 + j;
                blk.res[row] += 0.5 * af * sgn * (a_k[j][ax] - a_n[j][ax]);
                self.stress_entry_jac(&mut blk, row, k, j, ax, 0.5 * af * sgn);
                self.stress_entry_jac(&mut blk, row, n, j, ax, -0.5 * af * sgn);
            }

            blk.res[th] += kap * (tk - g.theta[n]);
            blk.add(th, c(k, th), kap);
            blk.add(th, c(n, th), -kap);
        }

        for j in 0..d {
            let gj = self.phys.gravity[j];
            blk.res[1 + j] -= hd * rk * gj;
            blk.add(1 + j, c(k, 0), -hd * gj);
        }

        // dissipation -h^d A_K : (grad_h u)_K
        let gk = self.grads[k];
        blk.res[th] -= hd * ddot(&a_k, &gk);
        if want_jac {
            let sk = self.stresses[k];
            let pk = rk * tk;
            for x in 0..d {
                for (e, wt) in stencil(grid, k, x) {
                    for b in 0..d {
                        let mut v = 2.0 * sk[x][b] * wt;
                        if x == b {
                            v -= pk * wt;
                        }
                        blk.add(th, c(e, 1 + b), -hd * v);
                    }
                }
            }
            let tr = trace(&gk);
            blk.add(th, c(k, 0), hd * tk * tr);
            blk.add(th, c(k, th), hd * rk * tr);
        }
        blk
    }
}

/// Residual of the step `prev -> guess` with the given upwind choices. The
/// plate temperatures are taken from `guess.theta_b`.
pub fn assemble_with_flags(
    grid: &Grid,
    prev: &State,
    guess: &State,
    phys: &PhysParams,
    num: &NumParams,
    flags: &UpwindFlags,
) -> Result<Residual> {
    let ctx = Ctx::new(grid, prev, guess, phys, num, flags)?;
    let nv = ctx.nv();
    let blocks: Vec<[f64; MAX_DIM + 2]> = (0..grid.cell_count())
        .into_par_iter()
        .map(|k| ctx.block(k, false).res)
        .collect();
    Ok(Residual {
        nv,
        values: blocks
            .iter()
            .flat_map(|b| b[..nv].iter().copied())
            .collect(),
    })
}

/// Residual of the step `prev -> guess`, upwinding w.r.t. `guess`. The plate
/// temperatures at the new level are read from `guess.theta_b`.
pub fn assemble_residual(
    grid: &Grid,
    prev: &State,
    guess: &State,
    phys: &PhysParams,
    num: &NumParams,
) -> Result<Residual> {
    let flags = upwind_flags(grid, &guess.u);
    assemble_with_flags(grid, prev, guess, phys, num, &flags)
}

/// Compressed sparse rows.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl CsrMatrix {
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|r| {
                (self.row_ptr[r]..self.row_ptr[r + 1])
                    .map(|i| self.vals[i] * x[self.cols[i]])
                    .sum()
            })
            .collect()
    }

    /// Column-compressed copy `(col_ptr, row_idx, vals)`.
    fn to_csc(&self) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
        let nnz = self.vals.len();
        let mut col_ptr = vec![0usize; self.n + 1];
        for &c in &self.cols {
            col_ptr[c + 1] += 1;
        }
        for i in 0..self.n {
            col_ptr[i + 1] += col_ptr[i];
        }
        let mut next = col_ptr.clone();
        let mut rows = vec![0usize; nnz];
        let mut vals = vec![0.0; nnz];
        for r in 0..self.n {
            for i in self.row_ptr[r]..self.row_ptr[r + 1] {
                let slot = next[self.cols[i]];
                rows[slot] = r;
                vals[slot] = self.vals[i];
                next[self.cols[i]] += 1;
            }
        }
        (col_ptr, rows, vals)
    }
}

/// Jacobian of [`assemble_with_flags`] with the upwind choices held fixed.
/// The sparsity pattern depends on the grid only.
pub fn assemble_jacobian(
    grid: &Grid,
    prev: &State,
    guess: &State,
    phys: &PhysParams,
    num: &NumParams,
    flags: &UpwindFlags,
) -> Result<CsrMatrix> {
    let ctx = Ctx::new(grid, prev, guess, phys, num, flags)?;
    let nv = ctx.nv();
    let rows: Vec<Vec<Vec<(usize, f64)>>> = (0..grid.cell_count())
        .into_par_iter()
        .map(|k| {
            let mut rows = ctx.block(k, true).jac.expect("jacobian requested");
            for row in rows.iter_mut() {
                row.sort_by_key(|e| e.0);
                let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
                for &(col, v) in row.iter() {
                    match merged.last_mut() {
                        Some(last) if last.0 == col => last.1 += v,
                        _ => merged.push((col, v)),
                    }
                }
                *row = merged;
            }
            rows
        })
        .collect();
    let n = grid.cell_count() * nv;
    let mut row_ptr = Vec::with_capacity(n + 1);
    row_ptr.push(0);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    for block in rows {
        for row in block {
            for (c, v) in row {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
    }
    Ok(CsrMatrix {
        n,
        row_ptr,
        cols,
        vals,
    })
}

/// Sparse LU with the symbolic analysis kept between factorisations.
#[derive(Default)]
pub struct LinearSolver {
    symbolic: Option<(Vec<usize>, Vec<usize>, SymbolicLu<usize>)>,
}

impl fmt::Debug for LinearSolver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LinearSolver")
            .field("cached", &self.symbolic.is_some())
            .finish()
    }
}

impl LinearSolver {
    pub fn new() -> Self {
        faer::set_global_parallelism(Par::Seq);
        Self::default()
    }

    /// Solves `J x = b`; the relative residual must not exceed `tol`.
    pub fn solve(&mut self, jac: &CsrMatrix, b: &[f64], tol: f64) -> Result<Vec<f64>> {
        let (col_ptr, rows, vals) = jac.to_csc();
        let reuse = matches!(&self.symbolic, Some((cp, ri, _)) if *cp == col_ptr && *ri == rows);
        let sym =
            SymbolicSparseColMat::new_checked(jac.n, jac.n, col_ptr.clone(), None, rows.clone());
        if !reuse {
            let s = SymbolicLu::try_new(sym.as_ref())
                .map_err(|e| Error::LinearSolve(format!("{e:?}")))?;
            self.symbolic = Some((col_ptr, rows, s));
        }
        let symbolic = self
            .symbolic
            .as_ref()
            .map(|s| s.2.clone())
            .expect("analysed");
        let mat = SparseColMat::new(sym, vals);
        let lu = Lu::try_new_with_symbolic(symbolic, mat.as_ref())
            .map_err(|e| Error::LinearSolve(format!("{e:?}")))?;
        let mut x = Mat::<f64>::from_fn(jac.n, 1, |i, _| b[i]);
        lu.solve_in_place(&mut x);
        let sol: Vec<f64> = (0..jac.n).map(|i| x[(i, 0)]).collect();
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(Error::LinearSolve("non-finite solution".into()));
        }
        let r = jac.matvec(&sol);
        let err = r
            .iter()
            .zip(b)
            .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if err > tol * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::LinearSolve(format!(
                "relative residual {:e} exceeds {tol:e}",
                err / scale
            )));
        }
        Ok(sol)
    }
}

/// Outcome of one Newton solve.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SolveStats {
    /// Newton passes, the final convergence check included.
    pub iterations: usize,
    pub residual: f64,
    /// Total halvings of the line-search step.
    pub backtracks: usize,
    /// Faces whose upwind choice changed between the first and last pass.
    pub flag_flips: usize,
}

fn with_update(x: &State, delta: &[f64], step: f64, dim: usize) -> State {
    let nv = dim + 2;
    let mut y = x.clone();
    for c in 0..x.rho.len() {
        let b = &delta[c * nv..(c + 1) * nv];
        y.rho[c] += step * b[0];
        for j in 0..dim {
            y.u[c][j] += step * b[1 + j];
        }
        y.theta[c] += step * b[dim + 1];
    }
    y
}

fn positive(s: &State) -> bool {
    s.rho.iter().all(|v| *v > 0.0 && v.is_finite())
        && s.theta.iter().all(|v| *v > 0.0 && v.is_finite())
        && s.u.iter().all(|v| v.iter().all(|x| x.is_finite()))
}

/// One backward-Euler step from `prev` to time `t_k`, reusing `solver`.
pub fn solve_step_with(
    grid: &Grid,
    prev: &State,
    t_k: f64,
    phys: &PhysParams,
    num: &NumParams,
    solver: &mut LinearSolver,
) -> Result<(State, SolveStats)> {
    num.validate()?;
    phys.validate()?;
    prev.check(grid)?;
    let level = prev.level + 1;
    let mut x = prev.clone();
    x.level = level;
    x.theta_b = phys.theta_b.faces(grid, t_k);
    x.check_positive()?;

    let first_flags = upwind_flags(grid, &x.u);
    let mut flags = first_flags.clone();
    let mut res = assemble_with_flags(grid, prev, &x, phys, num, &flags)?;
    let mut norm = res.inf_norm();
    let mut stats = SolveStats::default();
    loop {
        stats.iterations += 1;
        stats.residual = norm;
        if norm <= num.newton_tol {
            stats.flag_flips = first_flags
                .0
                .iter()
                .zip(&flags.0)
                .map(|(a, b)| a.iter().zip(b).filter(|(p, q)| p != q).count())
                .sum();
            return Ok((x, stats));
        }
        if stats.iterations > num.max_newton {
            return Err(Error::NonConvergence {
                level,
                iterations: num.max_newton,
                residual: norm,
            });
        }
        let jac = assemble_jacobian(grid, prev, &x, phys, num, &flags)?;
        let rhs: Vec<f64> = res.values.iter().map(|v| -v).collect();
        let delta = solver.solve(&jac, &rhs, num.linear_tol)?;

        let mut step = 1.0;
        let mut best: Option<(f64, State, UpwindFlags, Residual)> = None;
        while step >= num.min_damping {
            let cand = with_update(&x, &delta, step, grid.dim());
            if positive(&cand) {
                let cf = upwind_flags(grid, &cand.u);
                let cr = assemble_with_flags(grid, prev, &cand, phys, num, &cf)?;
                let cn = cr.inf_norm();
                let better = best.as_ref().map_or(true, |b| cn < b.0);
                if better {
                    best = Some((cn, cand, cf, cr));
                }
                if cn <= (1.0 - 1e-4 * step) * norm {
                    break;
                }
            }
            step *= 0.5;
            stats.backtracks += 1;
        }
        let Some((cn, cand, cf, cr)) = best else {
            return Err(Error::PositivityLoss { level });
        };
        x = cand;
        flags = cf;
        res = cr;
        norm = cn;
    }
}

/// One backward-Euler step from `prev` to time `t_k`.
pub fn solve_step(
    grid: &Grid,
    prev: &State,
    t_k: f64,
    phys: &PhysParams,
    num: &NumParams,
) -> Result<(State, SolveStats)> {
    solve_step_with(grid, prev, t_k, phys, num, &mut LinearSolver::new())
}

/// A computed sequence of time levels.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Vec<State>,
    pub stats: Vec<SolveStats>,
    /// Set when the run stopped early; `states` then holds the levels reached.
    pub failure: Option<Error>,
}

impl Trajectory {
    pub fn interpolant(&self, mode: InterpolationMode) -> TimeInterpolant<'_> {
        TimeInterpolant {
            dt: self.dt,
            states: &self.states,
            mode,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.failure.is_none()
    }

    pub fn final_state(&self) -> &State {
        self.states
            .last()
            .expect("trajectory holds the initial state")
    }
}

/// Applies `n_steps` backward-Euler steps. `hook` sees every new level with
/// its solver statistics.
pub fn advance(
    grid: &Grid,
    state0: State,
    n_steps: usize,
    phys: &PhysParams,
    num: &NumParams,
    mut hook: impl FnMut(&State, &SolveStats),
) -> Trajectory {
    let dt = num.dt(grid.h());
    let mut traj = Trajectory {
        dt,
        states: vec![state0],
        stats: Vec::with_capacity(n_steps),
        failure: None,
    };
    let mut solver = LinearSolver::new();
    for k in 1..=n_steps {
        let t_k = k as f64 * dt;
        match solve_step_with(grid, traj.final_state(), t_k, phys, num, &mut solver) {
            Ok((s, st)) => {
                hook(&s, &st);
                traj.states.push(s);
                traj.stats.push(st);
            }
            Err(e) => {
                traj.failure = Some(e);
                break;
            }
        }
    }
    traj
}

/// `sum_{K,j} V_{K,j}(A) Phi_{K,j}` for an arbitrary cellwise tensor `A`.
pub fn stress_adjoint_pairing(grid: &Grid, a: &[Mat3], phi: &CellVectorField) -> f64 {
    let af = grid.face_area();
    let d = grid.dim();
    let mut total = 0.0;
    for k in 0..grid.cell_count() {
        for cf in grid.faces_of(k) {
            if let Neighbor::Cell(n) = cf.neighbor {
                let ax = cf.face.axis;
                for j in 0..d {
                    total += 0.5 * af * cf.outward * (a[k][j][ax] - a[n][j][ax]) * phi[k][j];
                }
            }
        }
    }
    total
}

/// `sum_K h^d A_K : (D_h Phi)_K` with `Phi` continued by `MirrorOdd`.
pub fn stress_direct_pairing(grid: &Grid, a: &[Mat3], phi: &CellVectorField) -> f64 {
    let hd = grid.cell_volume();
    (0..grid.cell_count())
        .map(|k| {
            let g = velocity_gradient(grid, phi, k);
            hd * ddot(&a[k], &crate::fields::sym(&g))
        })
        .sum()
}

/// The V term of one cell, exposed for diagnostics.
pub fn stress_divergence(grid: &Grid, a: &[Mat3]) -> CellVectorField {
    let af = grid.face_area();
    CellVectorField::from_fn(grid, |k| {
        let mut v = [0.0; MAX_DIM];
        for cf in grid.faces_of(k) {
            if let Neighbor::Cell(n) = cf.neighbor {
                let ax = cf.face.axis;
                for (j, slot) in v.iter_mut().enumerate().take(grid.dim()) {
                    *slot += 0.5 * af * cf.outward * (a[k][j][ax] - a[n][j][ax]);
                }
            }
        }
        v
    })
}

/// Total stress `A = S_h - p I` of a state, cell by cell.
pub fn total_stress_field(grid: &Grid, s: &State, phys: &PhysParams) -> Result<Vec<Mat3>> {
    let sp = phys.stress_params()?;
    Ok((0..grid.cell_count())
        .map(|k| {
            let g = velocity_gradient(grid, &s.u, k);
            let mut a = stress_from_gradient(&g, &sp, grid.dim());
            for i in 0..grid.dim() {
                a[i][i] -= s.rho[k] * s.theta[k];
            }
            a
        })
        .collect())
}

pub fn constant_state(grid: &Grid, rho: f64, theta: f64) -> State {
    State {
        rho: CellScalarField::constant(grid, rho),
        u: CellVectorField::zeros(grid),
        theta: CellScalarField::constant(grid, theta),
        theta_b: BoundaryFaceField(vec![theta; grid.exterior_count()]),
        level: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::operators::{grad_h_vector, GhostPolicy};
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

    fn random_state(grid: &Grid, rng: &mut ChaCha8Rng, amp: f64) -> State {
        let d = grid.dim();
        let mut s = constant_state(grid, 1.0, 1.0);
        for c in 0..grid.cell_count() {
            s.rho[c] = 1.0 + amp * rng.random_range(-1.0..1.0);
            s.theta[c] = 1.0 + amp * rng.random_range(-1.0..1.0);
            for j in 0..d {
                s.u[c][j] = amp * rng.random_range(-1.0..1.0);
            }
        }
        for e in 0..grid.exterior_count() {
            s.theta_b.0[e] = 1.0 + amp * rng.random_range(-1.0..1.0);
        }
        s
    }

    #[test]
    fn constant_state_is_a_fixed_point() {
        for dim in [2, 3] {
            let grid = Grid::new(GridSpec::unit(dim, 4)).unwrap();
            let p = phys(dim, 0.0, BoundaryTemperature::constant(1.3));
            let s = constant_state(&grid, 0.8, 1.3);
            let r = assemble_residual(&grid, &s, &s, &p, &NumParams::default()).unwrap();
            assert!(r.inf_norm() < 1e-14, "{}", r.inf_norm());
            let (next, stats) = solve_step(&grid, &s, 0.1, &p, &NumParams::default()).unwrap();
            assert_eq!(stats.iterations, 1);
            assert_eq!(next.rho, s.rho);
            assert_eq!(next.theta, s.theta);
        }
    }

    #[test]
    fn centred_gradient_matches_operator() {
        let grid = Grid::new(GridSpec::unit(2, 4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_state(&grid, &mut rng, 0.5);
        let g = grad_h_vector(&grid, &s.u, &[GhostPolicy::MirrorOdd]).unwrap();
        for c in 0..grid.cell_count() {
            let m = velocity_gradient(&grid, &s.u, c);
            for a in 0..2 {
                for b in 0..2 {
                    assert!((m[a][b] - g[c][a][b]).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn hand_stencil_for_density_row() {
        // h = dt = 1, alpha = 0, columns of one cell along x_2 split by a plate-free row
        let grid = Grid::new(GridSpec::new(2, 1.5, 1.5, 1.0)).unwrap();
        let p = phys(2, 0.0, BoundaryTemperature::constant(1.0));
        let num = NumParams {
            alpha: 0.0,
            c_t: 1.0,
            ..NumParams::default()
        };
        let mut prev = constant_state(&grid, 1.0, 1.0);
        let k = grid.cell_id([1, 1, 0]);
        let east = grid.cell_id([2, 1, 0]);
        let west = grid.cell_id([0, 1, 0]);
        let north = grid.cell_id([1, 2, 0]);
        let south = grid.cell_id([1, 0, 0]);
        let mut guess = prev.clone();
        guess.rho[k] = 2.0;
        guess.rho[east] = 3.0;
        guess.u[k] = [0.5, 0.0, 0.0];
        guess.u[east] = [0.5, 0.0, 0.0];
        guess.u[west] = [-0.5, 0.0, 0.0];
        prev.rho[k] = 1.5;
        let r = assemble_residual(&grid, &prev, &guess, &p, &num).unwrap();
        // time: 2 - 1.5; east: w = 0.5, rho_up = 2 -> 1, diffusion -(3-2);
        // west: w = -(0.5 - 0.5)/2 = 0 -> 0, diffusion -(1-2);
        // north/south: w = 0, diffusion -(1-2) each
        let _ = (north, south);
        let expected = 0.5 + (1.0 - 1.0) + (0.0 + 1.0) + 2.0 * 1.0;
        assert!((r.get(k, 0) - expected).abs() < 1e-14, "{}", r.get(k, 0));
    }

    #[test]
    fn stress_adjoint_identity() {
        for dim in [2, 3] {
            let grid = Grid::new(GridSpec::unit(dim, 4)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(11 + dim as u64);
            let a: Vec<Mat3> = (0..grid.cell_count())
                .map(|_| {
                    let mut m = ZERO_MAT;
                    for row in m.iter_mut().take(dim) {
                        for v in row.iter_mut().take(dim) {
                            *v = rng.random_range(-1.0..1.0);
                        }
                    }
                    crate::fields::sym(&m)
                })
                .collect();
            let phi = random_state(&grid, &mut rng, 1.0).u;
            let lhs = stress_adjoint_pairing(&grid, &a, &phi);
            let rhs = stress_direct_pairing(&grid, &a, &phi);
            assert!(
                (lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0),
                "{lhs} {rhs}"
            );
        }
    }

    fn state_to_vec(s: &State, dim: usize) -> Vec<f64> {
        let mut v = Vec::new();
        for c in 0..s.rho.len() {
            v.push(s.rho[c]);
            v.extend_from_slice(&s.u[c][..dim]);
            v.push(s.theta[c]);
        }
        v
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        for (dim, n) in [(2, 8), (3, 4)] {
            let grid = Grid::new(GridSpec::unit(dim, n)).unwrap();
            let p = phys(dim, -1.0, BoundaryTemperature::two_plate(1.2, 1.0, dim));
            let num = NumParams::default();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let prev = random_state(&grid, &mut rng, 0.3);
            let guess = random_state(&grid, &mut rng, 0.3);
            let flags = upwind_flags(&grid, &guess.u);
            let jac = assemble_jacobian(&grid, &prev, &guess, &p, &num, &flags).unwrap();
            for trial in 0..3 {
                let dir: Vec<f64> = (0..jac.n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let jv = jac.matvec(&dir);
                let eps = 1e-6;
                let plus = with_update(&guess, &dir, eps, dim);
                let minus = with_update(&guess, &dir, -eps, dim);
                let rp = assemble_with_flags(&grid, &prev, &plus, &p, &num, &flags).unwrap();
                let rm = assemble_with_flags(&grid, &prev, &minus, &p, &num, &flags).unwrap();
                let fd: Vec<f64> = rp
                    .values
                    .iter()
                    .zip(&rm.values)
                    .map(|(a, b)| (a - b) / (2.0 * eps))
                    .collect();
                let err = fd
                    .iter()
                    .zip(&jv)
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                let scale = jv.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(
                    err <= 1e-6 * scale,
                    "dim {dim} trial {trial}: {err:e} vs {scale:e}"
                );
            }
            assert_eq!(state_to_vec(&guess, dim).len(), jac.n);
        }
    }

    #[test]
    fn jacobian_pattern_is_fixed() {
        let grid = Grid::new(GridSpec::unit(2, 4)).unwrap();
        let p = phys(2, -1.0, BoundaryTemperature::constant(1.0));
        let num = NumParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_state(&grid, &mut rng, 0.4);
        let b = random_state(&grid, &mut rng, 0.4);
        let ja = assemble_jacobian(&grid, &a, &a, &p, &num, &upwind_flags(&grid, &a.u)).unwrap();
        let jb = assemble_jacobian(&grid, &a, &b, &p, &num, &upwind_flags(&grid, &b.u)).unwrap();
        assert_eq!(ja.row_ptr, jb.row_ptr);
        assert_eq!(ja.cols, jb.cols);
    }

    #[test]
    fn perturbed_step_conserves_mass() {
        let grid = Grid::new(GridSpec::unit(2, 8)).unwrap();
        let p = phys(2, 0.0, BoundaryTemperature::constant(1.0));
        let num = NumParams::default();
        let s0 = init_state(
            &grid,
            |x| 1.0 + 0.1 * (2.0 * std::f64::consts::PI * x[0]).sin(),
            |x| [0.1 * (2.0 * std::f64::consts::PI * x[0]).cos(), 0.0, 0.0],
            |_| 1.0,
            &p,
        )
        .unwrap();
        let traj = advance(&grid, s0.clone(), 5, &p, &num, |_, _| {});
        assert!(traj.is_complete(), "{:?}", traj.failure);
        let m0 = s0.mass(&grid);
        for s in &traj.states {
            assert!((s.mass(&grid) - m0).abs() <= 1e-10 * m0);
        }
        // converged with re-evaluated upwind directions
        for w in traj.states.windows(2) {
            let r = assemble_residual(&grid, &w[0], &w[1], &p, &num).unwrap();
            assert!(r.inf_norm() <= num.newton_tol);
        }
    }

    #[test]
    fn init_state_examples() {
        let grid = Grid::new(GridSpec::unit(2, 4)).unwrap();
        let p = phys(2, 0.0, BoundaryTemperature::constant(1.0));
        let s = init_state(&grid, |_| 1.0, |_| [0.0; 3], |_| 1.0, &p).unwrap();
        assert!(s.rho.iter().all(|v| *v == 1.0));
        let pi = std::f64::consts::PI;
        let s = init_state(
            &grid,
            |x| 1.0 + 0.1 * (pi * x[0] / 0.5).sin(),
            |_| [0.0; 3],
            |_| 1.0,
            &p,
        )
        .unwrap();
        // closed form: mean of sin(2 pi x) over [0, 0.25] is (1 - cos(pi/2)) / (2 pi * 0.25)
        let c = grid.cell_id([2, 0, 0]);
        let exact = 1.0 + 0.1 * (1.0 - (pi / 2.0).cos()) / (2.0 * pi * 0.25);
        assert!((s.rho[c] - exact).abs() < 1e-6, "{} {}", s.rho[c], exact);
        assert!(init_state(&grid, |_| 1.0, |_| [0.0; 3], |x| x[0], &p).is_err());
    }

    #[test]
    fn parameter_validation() {
        let mut num = NumParams::default();
        num.alpha = 1.0;
        assert!(num.validate().is_err());
        let mut p = phys(2, 0.0, BoundaryTemperature::constant(1.0));
        p.kappa = 0.0;
        assert!(p.validate().is_err());
    }
}
