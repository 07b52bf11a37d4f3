//! Piecewise-constant fields on primal and dual cells, projections of
//! analytic data, the vertex-based multilinear lift and time interpolants.

use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};
use crate::grid::{FaceIndex, Grid, Neighbor, MAX_DIM};
use crate::operators::GhostPolicy;

pub type Vec3 = [f64; MAX_DIM];
pub type Mat3 = [[f64; MAX_DIM]; MAX_DIM];

pub const ZERO_MAT: Mat3 = [[0.0; MAX_DIM]; MAX_DIM];

pub fn identity(dim: usize) -> Mat3 {
    let mut m = ZERO_MAT;
    for (a, row) in m.iter_mut().enumerate().take(dim) {
        row[a] = 1.0;
    }
    m
}

pub fn ddot(a: &Mat3, b: &Mat3) -> f64 {
    let mut s = 0.0;
    for i in 0..MAX_DIM {
        for j in 0..MAX_DIM {
            s += a[i][j] * b[i][j];
        }
    }
    s
}

pub fn trace(a: &Mat3) -> f64 {
    a[0][0] + a[1][1] + a[2][2]
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut t = ZERO_MAT;
    for i in 0..MAX_DIM {
        for j in 0..MAX_DIM {
            t[j][i] = a[i][j];
        }
    }
    t
}

pub fn sym(a: &Mat3) -> Mat3 {
    let mut s = ZERO_MAT;
    for i in 0..MAX_DIM {
        for j in 0..MAX_DIM {
            s[i][j] = 0.5 * (a[i][j] + a[j][i]);
        }
    }
    s
}

pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// One value per primal cell (the space `Q_h`).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct CellScalarField(pub Vec<f64>);

impl CellScalarField {
    pub fn constant(grid: &Grid, value: f64) -> Self {
        Self(vec![value; grid.cell_count()])
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(usize) -> f64) -> Self {
        Self((0..grid.cell_count()).map(f).collect())
    }

    pub fn check(&self, grid: &Grid) -> Result<()> {
        if self.0.len() != grid.cell_count() {
            return Err(Error::LengthMismatch {
                expected: grid.cell_count(),
                got: self.0.len(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self(self.0.iter().map(|&v| f(v)).collect())
    }

    /// `int_Omega r`.
    pub fn integral(&self, grid: &Grid) -> f64 {
        grid.cell_volume() * self.0.iter().sum::<f64>()
    }

    pub fn l2_norm(&self, grid: &Grid) -> f64 {
        (grid.cell_volume() * self.0.iter().map(|v| v * v).sum::<f64>()).sqrt()
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl Deref for CellScalarField {
    type Target = Vec<f64>;
    fn deref(&self) -> &Vec<f64> {
        &self.0
    }
}

impl DerefMut for CellScalarField {
    fn deref_mut(&mut self) -> &mut Vec<f64> {
        &mut self.0
    }
}

/// `d` values per primal cell (the space `Q_h^d`); unused slots are zero.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct CellVectorField(pub Vec<Vec3>);

impl CellVectorField {
    pub fn zeros(grid: &Grid) -> Self {
        Self(vec![[0.0; MAX_DIM]; grid.cell_count()])
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(usize) -> Vec3) -> Self {
        Self((0..grid.cell_count()).map(f).collect())
    }

    pub fn component(&self, a: usize) -> CellScalarField {
        CellScalarField(self.0.iter().map(|v| v[a]).collect())
    }

    pub fn from_components(comps: &[CellScalarField]) -> Self {
        let n = comps.first().map_or(0, |c| c.len());
        Self(
            (0..n)
                .map(|k| {
                    let mut v = [0.0; MAX_DIM];
                    for (a, c) in comps.iter().enumerate() {
                        v[a] = c[k];
                    }
                    v
                })
                .collect(),
        )
    }

    pub fn check(&self, grid: &Grid) -> Result<()> {
        if self.0.len() != grid.cell_count() {
            return Err(Error::LengthMismatch {
                expected: grid.cell_count(),
                got: self.0.len(),
            });
        }
        Ok(())
    }

    pub fn max_norm(&self) -> f64 {
        self.0.iter().map(|v| dot(v, v).sqrt()).fold(0.0, f64::max)
    }
}

impl Deref for CellVectorField {
    type Target = Vec<Vec3>;
    fn deref(&self) -> &Vec<Vec3> {
        &self.0
    }
}

impl DerefMut for CellVectorField {
    fn deref_mut(&mut self) -> &mut Vec<Vec3> {
        &mut self.0
    }
}

/// One value per face (equivalently dual cell) of one axis (the space `W_h^(i)`).
#[derive(Clone, Debug, PartialEq)]
pub struct FaceScalarField {
    pub axis: usize,
    pub values: Vec<f64>,
}

impl FaceScalarField {
    /// `||w||_{L^2(Omega)}`, counting only the half of a boundary dual cell
    /// that lies inside the slab.
    pub fn l2_norm(&self, grid: &Grid) -> f64 {
        let half = 0.5 * grid.cell_volume();
        let s: f64 = self
            .values
            .iter()
            .enumerate()
            .map(|(id, v)| {
                let pieces = grid
                    .dual_halves(FaceIndex {
                        axis: self.axis,
                        id,
                    })
                    .1;
                pieces as f64 * half * v * v
            })
            .sum();
        s.sqrt()
    }
}

/// One value per exterior face, indexed by exterior ordinal.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct BoundaryFaceField(pub Vec<f64>);

impl Deref for BoundaryFaceField {
    type Target = Vec<f64>;
    fn deref(&self) -> &Vec<f64> {
        &self.0
    }
}

/// One time level of the discrete solution.
#[derive(Clone, Debug, PartialEq)]
pub struct State {
    pub rho: CellScalarField,
    pub u: CellVectorField,
    pub theta: CellScalarField,
    /// Projected boundary temperature on the exterior faces.
    pub theta_b: BoundaryFaceField,
    pub level: usize,
}

impl State {
    pub fn check(&self, grid: &Grid) -> Result<()> {
        self.rho.check(grid)?;
        self.u.check(grid)?;
        self.theta.check(grid)?;
        if self.theta_b.len() != grid.exterior_count() {
            return Err(Error::LengthMismatch {
                expected: grid.exterior_count(),
                got: self.theta_b.len(),
            });
        }
        Ok(())
    }

    /// Reports the first cell (or face) violating `rho > 0`, `theta > 0`.
    pub fn check_positive(&self) -> Result<()> {
        for (quantity, values) in [
            ("density", &self.rho.0),
            ("temperature", &self.theta.0),
            ("boundary temperature", &self.theta_b.0),
        ] {
            if let Some((cell, &value)) = values.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
                return Err(Error::NonPositive {
                    quantity,
                    cell,
                    value,
                });
            }
        }
        Ok(())
    }

    pub fn mass(&self, grid: &Grid) -> f64 {
        self.rho.integral(grid)
    }
}

/// Tensor-product quadrature on cells and faces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quadrature {
    Midpoint,
    /// Gauss-Legendre with the given number of points per direction (1..=4).
    Gauss(usize),
}

impl Quadrature {
    /// Nodes on `[-1/2, 1/2]` and weights summing to one.
    fn rule(self) -> &'static [(f64, f64)] {
        const G1: [(f64, f64); 1] = [(0.0, 1.0)];
        const G2: [(f64, f64); 2] = [
            (-0.288_675_134_594_812_9, 0.5),
            (0.288_675_134_594_812_9, 0.5),
        ];
        const G3: [(f64, f64); 3] = [
            (-0.387_298_334_620_741_7, 5.0 / 18.0),
            (0.0, 8.0 / 18.0),
            (0.387_298_334_620_741_7, 5.0 / 18.0),
        ];
        const G4: [(f64, f64); 4] = [
            (-0.430_568_155_797_026_3, 0.173_927_422_568_726_9),
            (-0.169_990_521_792_428_1, 0.326_072_577_431_273_1),
            (0.169_990_521_792_428_1, 0.326_072_577_431_273_1),
            (0.430_568_155_797_026_3, 0.173_927_422_568_726_9),
        ];
        match self {
            Quadrature::Midpoint | Quadrature::Gauss(0) | Quadrature::Gauss(1) => &G1,
            Quadrature::Gauss(2) => &G2,
            Quadrature::Gauss(3) => &G3,
            Quadrature::Gauss(_) => &G4,
        }
    }

    /// Average of `f` over the box centred at `center` with side `h` along
    /// the axes in `axes` (other coordinates are held fixed).
    pub fn box_average(
        self,
        center: &Vec3,
        h: f64,
        axes: &[usize],
        f: &mut impl FnMut(&Vec3) -> f64,
    ) -> f64 {
        let rule = self.rule();
        let m = rule.len();
        let total = m.pow(axes.len() as u32);
        let mut acc = 0.0;
        for k in 0..total {
            let mut x = *center;
            let mut w = 1.0;
            let mut rem = k;
            for &a in axes {
                let (node, weight) = rule[rem % m];
                rem /= m;
                x[a] += node * h;
                w *= weight;
            }
            acc += w * f(&x);
        }
        acc
    }
}

/// `Pi_Q f`: cell averages of an analytic function.
pub fn project_cell_average(
    grid: &Grid,
    f: impl Fn(&Vec3) -> f64,
    quad: Quadrature,
) -> CellScalarField {
    let axes: Vec<usize> = (0..grid.dim()).collect();
    CellScalarField::from_fn(grid, |c| {
        quad.box_average(&grid.cell_center(c), grid.h(), &axes, &mut |x| f(x))
    })
}

pub fn project_cell_average_vector(
    grid: &Grid,
    f: impl Fn(&Vec3) -> Vec3,
    quad: Quadrature,
) -> CellVectorField {
    let comps: Vec<CellScalarField> = (0..grid.dim())
        .map(|a| project_cell_average(grid, |x| f(x)[a], quad))
        .collect();
    CellVectorField::from_components(&comps)
}

fn face_axes(grid: &Grid, axis: usize) -> Vec<usize> {
    (0..grid.dim()).filter(|&a| a != axis).collect()
}

/// `Pi_E^(i) f`: face averages over the faces of one axis.
pub fn project_face_average(
    grid: &Grid,
    f: impl Fn(&Vec3) -> f64,
    axis: usize,
    quad: Quadrature,
) -> FaceScalarField {
    let axes = face_axes(grid, axis);
    FaceScalarField {
        axis,
        values: grid
            .faces(axis)
            .iter()
            .map(|face| quad.box_average(&face.center, grid.h(), &axes, &mut |x| f(x)))
            .collect(),
    }
}

/// Face averages on the exterior plates, indexed by exterior ordinal.
pub fn project_boundary(
    grid: &Grid,
    f: impl Fn(&Vec3) -> f64,
    quad: Quadrature,
) -> BoundaryFaceField {
    let axes = face_axes(grid, grid.vertical_axis());
    BoundaryFaceField(
        grid.exterior_faces()
            .map(|face| quad.box_average(&face.center, grid.h(), &axes, &mut |x| f(x)))
            .collect(),
    )
}

/// `Pi_W^(i) r` for a piecewise-constant `r`: the mean over the straddled
/// cells, the outer one replaced by the ghost on boundary dual cells.
pub fn project_dual_average(
    grid: &Grid,
    r: &CellScalarField,
    axis: usize,
    ghost: &GhostPolicy,
) -> Result<FaceScalarField> {
    ghost.check(grid)?;
    let values = grid
        .faces(axis)
        .iter()
        .map(|face| {
            let vin = r[face.inner];
            let vout = match face.outer {
                Neighbor::Cell(c) => r[c],
                Neighbor::Ghost(e) => ghost.ghost(e, vin),
            };
            0.5 * (vin + vout)
        })
        .collect();
    Ok(FaceScalarField { axis, values })
}

/// `Pi_W^(i) f` for analytic `f`, averaged over the part of each dual cell
/// inside the slab.
pub fn project_dual_function(
    grid: &Grid,
    f: impl Fn(&Vec3) -> f64,
    axis: usize,
    quad: Quadrature,
) -> FaceScalarField {
    let axes: Vec<usize> = (0..grid.dim()).collect();
    let h = grid.h();
    let values = (0..grid.face_count(axis))
        .map(|id| {
            let (halves, n) = grid.dual_halves(FaceIndex { axis, id });
            let sum: f64 = halves[..n]
                .iter()
                .map(|(_, c)| half_box_average(quad, c, h, axis, &axes, &f))
                .sum();
            sum / n as f64
        })
        .collect();
    FaceScalarField { axis, values }
}

pub(crate) fn half_box_average(
    quad: Quadrature,
    center: &Vec3,
    h: f64,
    thin_axis: usize,
    axes: &[usize],
    f: &impl Fn(&Vec3) -> f64,
) -> f64 {
    // a (h/2) x h^{d-1} box: integrate the thin axis with a rescaled rule
    let others: Vec<usize> = axes.iter().copied().filter(|&a| a != thin_axis).collect();
    let rule_pts = match quad {
        Quadrature::Midpoint => vec![(0.0, 1.0)],
        q => q.rule().to_vec(),
    };
    rule_pts
        .iter()
        .map(|&(node, w)| {
            let mut c = *center;
            c[thin_axis] += node * 0.5 * h;
            w * quad.box_average(&c, h, &others, &mut |x| f(x))
        })
        .sum()
}

/// `||Pi_Q f - f||_{L^2}` by Gauss quadrature inside each cell.
pub fn cell_projection_error(grid: &Grid, f: impl Fn(&Vec3) -> f64) -> f64 {
    let p = project_cell_average(grid, &f, Quadrature::Gauss(4));
    let axes: Vec<usize> = (0..grid.dim()).collect();
    let vol = grid.cell_volume();
    let s: f64 = (0..grid.cell_count())
        .map(|c| {
            vol * Quadrature::Gauss(4).box_average(
                &grid.cell_center(c),
                grid.h(),
                &axes,
                &mut |x| (p[c] - f(x)).powi(2),
            )
        })
        .sum();
    s.sqrt()
}

/// `||Pi_X f - f||_{L^2}` for a face-based projection `X` of one axis,
/// the error measured on the dual cells of that axis.
pub fn dual_projection_error(
    grid: &Grid,
    f: impl Fn(&Vec3) -> f64,
    projected: &FaceScalarField,
) -> f64 {
    let axes: Vec<usize> = (0..grid.dim()).collect();
    let h = grid.h();
    let half = 0.5 * grid.cell_volume();
    let s: f64 = (0..projected.values.len())
        .map(|id| {
            let (halves, n) = grid.dual_halves(FaceIndex {
                axis: projected.axis,
                id,
            });
            let v = projected.values[id];
            halves[..n]
                .iter()
                .map(|(_, c)| {
                    half * half_box_average(
                        Quadrature::Gauss(4),
                        c,
                        h,
                        projected.axis,
                        &axes,
                        &|x| (v - f(x)).powi(2),
                    )
                })
                .sum::<f64>()
        })
        .sum();
    s.sqrt()
}

/// `||g||_{L^2(Omega)}` of an analytic function.
pub fn analytic_l2_norm(grid: &Grid, g: impl Fn(&Vec3) -> f64) -> f64 {
    let axes: Vec<usize> = (0..grid.dim()).collect();
    let vol = grid.cell_volume();
    (0..grid.cell_count())
        .map(|c| {
            vol * Quadrature::Gauss(4).box_average(
                &grid.cell_center(c),
                grid.h(),
                &axes,
                &mut |x| g(x).powi(2),
            )
        })
        .sum::<f64>()
        .sqrt()
}

/// Continuous multilinear interpolant `Pi^L_h r` built from vertex means.
#[derive(Clone, Debug)]
pub struct VertexLift {
    dim: usize,
    h: f64,
    vcounts: [usize; MAX_DIM],
    /// Vertex values, lexicographic with the last index fastest.
    pub values: Vec<f64>,
    cell_idx: Vec<[usize; MAX_DIM]>,
}

impl VertexLift {
    fn vertex_id(&self, v: [usize; MAX_DIM]) -> usize {
        let mut id = 0;
        for a in 0..self.dim {
            id = id * self.vcounts[a] + v[a];
        }
        id
    }

    /// Vertex values of the `2^d` corners of a cell, corner bit `a` set when
    /// the corner is on the upper side along axis `a`.
    pub fn corner_values(&self, cell: usize) -> [f64; 8] {
        let idx = self.cell_idx[cell];
        let mut out = [0.0; 8];
        for (corner, slot) in out.iter_mut().enumerate().take(1 << self.dim) {
            let mut v = [0; MAX_DIM];
            for a in 0..self.dim {
                let up = (corner >> a) & 1;
                v[a] = if a + 1 < self.dim {
                    (idx[a] + up) % self.vcounts[a]
                } else {
                    idx[a] + up
                };
            }
            *slot = self.values[self.vertex_id(v)];
        }
        out
    }

    /// Value and gradient at local coordinates `xi in [0,1]^d` of a cell.
    pub fn eval_local(&self, cell: usize, xi: &Vec3) -> (f64, Vec3) {
        let c = self.corner_values(cell);
        let mut val = 0.0;
        let mut grad = [0.0; MAX_DIM];
        for (corner, &cv) in c.iter().enumerate().take(1 << self.dim) {
            let mut w = 1.0;
            let mut dw = [1.0; MAX_DIM];
            for a in 0..self.dim {
                let up = (corner >> a) & 1 == 1;
                let (fa, da) = if up {
                    (xi[a], 1.0)
                } else {
                    (1.0 - xi[a], -1.0)
                };
                w *= fa;
                for (b, slot) in dw.iter_mut().enumerate().take(self.dim) {
                    *slot *= if a == b { da } else { fa };
                }
            }
            val += w * cv;
            for a in 0..self.dim {
                grad[a] += dw[a] * cv / self.h;
            }
        }
        (val, grad)
    }

    fn gauss_sum(&self, mut g: impl FnMut(usize, &Vec3) -> f64) -> f64 {
        let rule = Quadrature::Gauss(2).rule();
        let m = rule.len();
        let vol = self.h.powi(self.dim as i32);
        let mut acc = 0.0;
        for cell in 0..self.cell_idx.len() {
            for k in 0..m.pow(self.dim as u32) {
                let mut xi = [0.0; MAX_DIM];
                let mut w = 1.0;
                let mut rem = k;
                for slot in xi.iter_mut().take(self.dim) {
                    let (node, weight) = rule[rem % m];
                    rem /= m;
                    *slot = 0.5 + node;
                    w *= weight;
                }
                acc += vol * w * g(cell, &xi);
            }
        }
        acc
    }

    /// `||grad Pi^L_h r||_{L^2}` (exact: the integrand is a tensor quadratic).
    pub fn grad_l2(&self) -> f64 {
        self.gauss_sum(|c, xi| {
            let (_, g) = self.eval_local(c, xi);
            dot(&g, &g)
        })
        .sqrt()
    }

    /// `||Pi^L_h r - r||_{L^2}` (exact for the same reason).
    pub fn diff_l2(&self, r: &CellScalarField) -> f64 {
        self.gauss_sum(|c, xi| {
            let (v, _) = self.eval_local(c, xi);
            (v - r[c]).powi(2)
        })
        .sqrt()
    }
}

/// `Pi^L_h r`: every vertex takes the mean of the cells sharing it; on the
/// plates only the cells inside the slab are counted.
pub fn lift_vertex_linear(grid: &Grid, r: &CellScalarField) -> VertexLift {
    let dim = grid.dim();
    let n = grid.counts();
    let vcounts = grid.vertex_counts();
    let total: usize = vcounts[..dim].iter().product();
    let mut lift = VertexLift {
        dim,
        h: grid.h(),
        vcounts,
        values: vec![0.0; total],
        cell_idx: (0..grid.cell_count()).map(|c| grid.cell_index(c)).collect(),
    };
    for vid in 0..total {
        let mut rem = vid;
        let mut v = [0usize; MAX_DIM];
        for a in (0..dim).rev() {
            v[a] = rem % vcounts[a];
            rem /= vcounts[a];
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        'corners: for corner in 0..(1usize << dim) {
            let mut idx = [0usize; MAX_DIM];
            for a in 0..dim {
                let below = (corner >> a) & 1 == 1;
                if a + 1 < dim {
                    idx[a] = if below {
                        (v[a] + n[a] - 1) % n[a]
                    } else {
                        v[a]
                    };
                } else if below {
                    if v[a] == 0 {
                        continue 'corners;
                    }
                    idx[a] = v[a] - 1;
                } else {
                    if v[a] == n[a] {
                        continue 'corners;
                    }
                    idx[a] = v[a];
                }
            }
            sum += r[grid.cell_id(idx)];
            count += 1;
        }
        lift.values[vid] = sum / count as f64;
    }
    lift
}

/// `(sum_{sigma in E_int} |sigma| [[r]]^2 / h)^{1/2}`.
pub fn interior_jump_seminorm(grid: &Grid, r: &CellScalarField) -> f64 {
    let area = grid.face_area();
    let mut s = 0.0;
    for axis in 0..grid.dim() {
        for face in grid.faces(axis) {
            if let Neighbor::Cell(out) = face.outer {
                s += area * (r[out] - r[face.inner]).powi(2) / grid.h();
            }
        }
    }
    s.sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterpolationMode {
    PiecewiseConstant,
    PiecewiseLinear,
}

/// A sequence of time levels `t_k = k dt` viewed as a function of time.
#[derive(Clone, Copy, Debug)]
pub struct TimeInterpolant<'a> {
    pub dt: f64,
    pub states: &'a [State],
    pub mode: InterpolationMode,
}

/// Field values of an interpolated state.
#[derive(Clone, Debug, PartialEq)]
pub struct StateValues {
    pub rho: CellScalarField,
    pub u: CellVectorField,
    pub theta: CellScalarField,
}

impl<'a> TimeInterpolant<'a> {
    pub fn final_time(&self) -> f64 {
        self.dt * self.states.len().saturating_sub(1) as f64
    }

    pub fn at(&self, t: f64) -> Result<StateValues> {
        let t_final = self.final_time();
        let tol = 1e-12 * self.dt.max(1.0);
        if !(t <= t_final + tol) || self.states.is_empty() {
            return Err(Error::TimeOutOfRange { t, t_final });
        }
        if t < -tol {
            return Err(Error::TimeOutOfRange { t, t_final });
        }
        let last = self.states.len() - 1;
        let s = (t / self.dt).max(0.0);
        let pick = |k: usize| {
            let st = &self.states[k.min(last)];
            StateValues {
                rho: st.rho.clone(),
                u: st.u.clone(),
                theta: st.theta.clone(),
            }
        };
        // snap to a level when t hits t_k up to round-off
        let nearest = s.round();
        if (s - nearest).abs() < 1e-9 {
            let k = nearest as usize;
            return Ok(match self.mode {
                InterpolationMode::PiecewiseLinear => pick(k),
                // phi_h = phi^{k-1} on [t_{k-1}, t_k), and phi^{N_T} at t_{N_T}
                InterpolationMode::PiecewiseConstant => pick(k),
            });
        }
        let k = (s.floor() as usize).min(last.saturating_sub(1));
        match self.mode {
            InterpolationMode::PiecewiseConstant => Ok(pick(k)),
            InterpolationMode::PiecewiseLinear => {
                let w = s - k as f64;
                let (a, b) = (&self.states[k], &self.states[k + 1]);
                let blend = |x: &[f64], y: &[f64]| -> Vec<f64> {
                    x.iter()
                        .zip(y)
                        .map(|(p, q)| (1.0 - w) * p + w * q)
                        .collect()
                };
                Ok(StateValues {
                    rho: CellScalarField(blend(&a.rho, &b.rho)),
                    u: CellVectorField(
                        a.u.iter()
                            .zip(b.u.iter())
                            .map(|(p, q)| {
                                let mut v = [0.0; MAX_DIM];
                                for i in 0..MAX_DIM {
                                    v[i] = (1.0 - w) * p[i] + w * q[i];
                                }
                                v
                            })
                            .collect(),
                    ),
                    theta: CellScalarField(blend(&a.theta, &b.theta)),
                })
            }
        }
    }

    /// `d/dt` of the linear interpolant on `(t_{k-1}, t_k)`, i.e. `D_t` at level `k`.
    pub fn linear_slope(&self, k: usize) -> CellScalarField {
        let (a, b) = (&self.states[k - 1], &self.states[k]);
        CellScalarField(
            a.rho
                .iter()
                .zip(b.rho.iter())
                .map(|(p, q)| (q - p) / self.dt)
                .collect(),
        )
    }
}
