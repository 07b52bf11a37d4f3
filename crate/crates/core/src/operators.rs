//! Discrete difference operators on the staggered primal/dual grid, their
//! ghost-cell conventions on the plates, and the constitutive relations.
//!
//! Interior faces are oriented by `+e_i` with `in` the lower cell. Exterior
//! faces are oriented outward with `in` the cell inside the slab, so every
//! exterior trace has a well defined inner value.

use crate::error::{Error, Result};
use crate::fields::{
    identity, sym, trace, CellScalarField, CellVectorField, FaceScalarField, Mat3, ZERO_MAT,
};
use crate::grid::{FaceIndex, Grid, Neighbor, MAX_DIM};

/// How a cell field is continued behind an exterior face.
#[derive(Clone, Debug, PartialEq)]
pub enum GhostPolicy {
    /// `v_out = -v_in`, so the face average vanishes.
    MirrorOdd,
    /// `v_out = 2 g - v_in`, so the face average equals `g`; one `g` per exterior face.
    DirichletAffine(Vec<f64>),
    /// `v_out = v_in`, so the jump vanishes.
    Even,
    /// `v_out = 0`, used for derived gradient tensors.
    ZeroGradientTensor,
    /// Explicit ghost values, one per exterior face.
    Custom(Vec<f64>),
}

impl GhostPolicy {
    /// Confirms that every exterior face of `grid` can be served.
    pub fn check(&self, grid: &Grid) -> Result<()> {
        let n = grid.exterior_count();
        match self {
            GhostPolicy::DirichletAffine(g) if g.len() != n => Err(Error::LengthMismatch {
                expected: n,
                got: g.len(),
            }),
            GhostPolicy::Custom(v) if v.len() < n => Err(Error::MissingGhost { face: v.len() }),
            _ => Ok(()),
        }
    }

    /// Ghost value behind exterior face `ordinal`; call [`GhostPolicy::check`] first.
    #[inline]
    pub fn ghost(&self, ordinal: usize, inner: f64) -> f64 {
        match self {
            GhostPolicy::MirrorOdd => -inner,
            GhostPolicy::DirichletAffine(g) => 2.0 * g[ordinal] - inner,
            GhostPolicy::Even => inner,
            GhostPolicy::ZeroGradientTensor => 0.0,
            GhostPolicy::Custom(v) => v[ordinal],
        }
    }

    pub fn try_ghost(&self, ordinal: usize, inner: f64) -> Result<f64> {
        match self {
            GhostPolicy::Custom(v) if ordinal >= v.len() => {
                Err(Error::MissingGhost { face: ordinal })
            }
            GhostPolicy::DirichletAffine(g) if ordinal >= g.len() => {
                Err(Error::MissingGhost { face: ordinal })
            }
            _ => Ok(self.ghost(ordinal, inner)),
        }
    }
}

/// Picks the policy for component `a` of a vector field: a single policy is
/// shared by all components.
fn component<'a>(ghosts: &'a [GhostPolicy], a: usize) -> &'a GhostPolicy {
    if ghosts.len() == 1 {
        &ghosts[0]
    } else {
        &ghosts[a]
    }
}

fn check_all(grid: &Grid, ghosts: &[GhostPolicy]) -> Result<()> {
    if ghosts.len() != 1 && ghosts.len() < grid.dim() {
        return Err(Error::InvalidParameter {
            name: "ghosts",
            reason: format!("need 1 or {} policies, got {}", grid.dim(), ghosts.len()),
        });
    }
    ghosts.iter().try_for_each(|g| g.check(grid))
}

/// Traces of a cell field on one face.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaceTraces {
    pub v_in: f64,
    pub v_out: f64,
    pub jump: f64,
    pub average: f64,
    /// Sign of the face normal along its axis.
    pub normal: f64,
}

impl FaceTraces {
    pub fn new(v_in: f64, v_out: f64, normal: f64) -> Self {
        Self {
            v_in,
            v_out,
            jump: v_out - v_in,
            average: 0.5 * (v_in + v_out),
            normal,
        }
    }
}

/// Value on the far side of a face.
#[inline]
fn outer(v: &[f64], nb: Neighbor, inner: f64, ghost: &GhostPolicy) -> f64 {
    match nb {
        Neighbor::Cell(c) => v[c],
        Neighbor::Ghost(e) => ghost.ghost(e, inner),
    }
}

pub fn traces(grid: &Grid, v: &[f64], face: FaceIndex, ghost: &GhostPolicy) -> Result<FaceTraces> {
    let f = grid.face(face);
    let v_in = v[f.inner];
    let v_out = match f.outer {
        Neighbor::Cell(c) => v[c],
        Neighbor::Ghost(e) => ghost.try_ghost(e, v_in)?,
    };
    Ok(FaceTraces::new(v_in, v_out, f.normal))
}

/// `r^up <u>.n` for scalar traces; a zero normal velocity selects `r_in`.
#[inline]
pub fn upwind(r_in: f64, r_out: f64, normal_velocity: f64) -> f64 {
    if normal_velocity >= 0.0 {
        r_in * normal_velocity
    } else {
        r_out * normal_velocity
    }
}

/// `Up[r, u]` on a face, velocity continued by `MirrorOdd`.
pub fn upwind_flux(grid: &Grid, r: &[f64], u: &CellVectorField, face: FaceIndex) -> f64 {
    let f = grid.face(face);
    let a = face.axis;
    let (r_out, u_out) = match f.outer {
        Neighbor::Cell(c) => (r[c], u[c][a]),
        Neighbor::Ghost(_) => (r[f.inner], -u[f.inner][a]),
    };
    let w = 0.5 * (u[f.inner][a] + u_out) * f.normal;
    upwind(r[f.inner], r_out, w)
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > -1.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name: "alpha",
            reason: format!("{alpha} lies outside (-1, 1)"),
        })
    }
}

/// `Up - h^alpha [[r]]` from scalar traces.
#[inline]
pub fn diffusive_flux_value(
    r_in: f64,
    r_out: f64,
    normal_velocity: f64,
    h: f64,
    alpha: f64,
) -> f64 {
    upwind(r_in, r_out, normal_velocity) - h.powf(alpha) * (r_out - r_in)
}

/// `F_h^alpha(r, u)` on a face.
pub fn diffusive_flux(
    grid: &Grid,
    r: &[f64],
    u: &CellVectorField,
    face: FaceIndex,
    alpha: f64,
) -> Result<f64> {
    check_alpha(alpha)?;
    let f = grid.face(face);
    let r_out = outer(r, f.outer, r[f.inner], &GhostPolicy::Even);
    Ok(upwind_flux(grid, r, u, face) - grid.h().powf(alpha) * (r_out - r[f.inner]))
}

/// `partial_a` of the centred gradient: `(<v>_upper - <v>_lower) / h` per cell.
pub fn partial_h(
    grid: &Grid,
    v: &[f64],
    axis: usize,
    ghost: &GhostPolicy,
) -> Result<CellScalarField> {
    ghost.check(grid)?;
    let h = grid.h();
    Ok(CellScalarField::from_fn(grid, |c| {
        let vk = v[c];
        let up = outer(v, grid.neighbor(c, axis, true), vk, ghost);
        let down = outer(v, grid.neighbor(c, axis, false), vk, ghost);
        0.5 * (up - down) / h
    }))
}

/// `grad_h v` of a scalar field.
pub fn grad_h(grid: &Grid, v: &[f64], ghost: &GhostPolicy) -> Result<CellVectorField> {
    let comps = (0..grid.dim())
        .map(|a| partial_h(grid, v, a, ghost))
        .collect::<Result<Vec<_>>>()?;
    Ok(CellVectorField::from_components(&comps))
}

/// `grad_h u` of a vector field, stored as `g[a][b] = partial_a u_b`.
pub fn grad_h_vector(
    grid: &Grid,
    u: &CellVectorField,
    ghosts: &[GhostPolicy],
) -> Result<Vec<Mat3>> {
    check_all(grid, ghosts)?;
    let d = grid.dim();
    let mut g = vec![ZERO_MAT; grid.cell_count()];
    for b in 0..d {
        let ub = u.component(b);
        for a in 0..d {
            let p = partial_h(grid, &ub, a, component(ghosts, b))?;
            for (gc, v) in g.iter_mut().zip(p.iter()) {
                gc[a][b] = *v;
            }
        }
    }
    Ok(g)
}

/// `div_h u = tr(D_h u)`.
pub fn div_h(grid: &Grid, u: &CellVectorField, ghosts: &[GhostPolicy]) -> Result<CellScalarField> {
    Ok(CellScalarField(
        grad_h_vector(grid, u, ghosts)?.iter().map(trace).collect(),
    ))
}

/// `D_h u`, the symmetric part of the centred gradient.
pub fn sym_grad_h(grid: &Grid, u: &CellVectorField, ghosts: &[GhostPolicy]) -> Result<Vec<Mat3>> {
    Ok(grad_h_vector(grid, u, ghosts)?.iter().map(sym).collect())
}

/// Result of `curl_h`: a scalar in two dimensions, a vector in three.
#[derive(Clone, Debug, PartialEq)]
pub enum Curl {
    Scalar(CellScalarField),
    Vector(CellVectorField),
}

/// `curl_h u = sum_a e_a x partial_a u`.
pub fn curl_h(grid: &Grid, u: &CellVectorField, ghosts: &[GhostPolicy]) -> Result<Curl> {
    let g = grad_h_vector(grid, u, ghosts)?;
    if grid.dim() == 2 {
        Ok(Curl::Scalar(CellScalarField(
            g.iter().map(|m| m[0][1] - m[1][0]).collect(),
        )))
    } else {
        Ok(Curl::Vector(CellVectorField(
            g.iter()
                .map(|m| [m[1][2] - m[2][1], m[2][0] - m[0][2], m[0][1] - m[1][0]])
                .collect(),
        )))
    }
}

/// Planar curl of a scalar, `(partial_2 w, -partial_1 w)`.
pub fn curl_h_scalar(grid: &Grid, w: &[f64], ghost: &GhostPolicy) -> Result<CellVectorField> {
    let d1 = partial_h(grid, w, 0, ghost)?;
    let d2 = partial_h(grid, w, 1, ghost)?;
    Ok(CellVectorField(
        d1.iter()
            .zip(d2.iter())
            .map(|(p, q)| [*q, -*p, 0.0])
            .collect(),
    ))
}

/// `grad_E r`: one face field per axis, `[[r]] / h` in the `+e_i` orientation.
pub fn grad_edge(grid: &Grid, r: &[f64], ghost: &GhostPolicy) -> Result<Vec<FaceScalarField>> {
    ghost.check(grid)?;
    let h = grid.h();
    Ok((0..grid.dim())
        .map(|axis| FaceScalarField {
            axis,
            values: grid
                .faces(axis)
                .iter()
                .map(|f| {
                    let vin = r[f.inner];
                    f.normal * (outer(r, f.outer, vin, ghost) - vin) / h
                })
                .collect(),
        })
        .collect())
}

/// `div_T w = sum_i (w_upper - w_lower) / h` for face fields of every axis.
pub fn div_t(grid: &Grid, w: &[FaceScalarField]) -> CellScalarField {
    let h = grid.h();
    CellScalarField::from_fn(grid, |c| {
        w.iter()
            .map(|wi| {
                let up = grid.cell_face(c, wi.axis, true).id;
                let down = grid.cell_face(c, wi.axis, false).id;
                (wi.values[up] - wi.values[down]) / h
            })
            .sum()
    })
}

/// `Delta_h r = div_T grad_E r`.
pub fn laplace_h(grid: &Grid, r: &[f64], ghost: &GhostPolicy) -> Result<CellScalarField> {
    ghost.check(grid)?;
    let h2 = grid.h() * grid.h();
    Ok(CellScalarField::from_fn(grid, |c| {
        grid.faces_of(c)
            .iter()
            .map(|cf| (outer(r, cf.neighbor, r[c], ghost) - r[c]) / h2)
            .sum()
    }))
}

/// Shear and bulk viscosities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StressParams {
    pub mu: f64,
    pub eta: f64,
}

impl StressParams {
    pub fn new(mu: f64, eta: f64) -> Result<Self> {
        if !(mu > 0.0) {
            return Err(Error::InvalidParameter {
                name: "mu",
                reason: format!("shear viscosity must be positive, got {mu}"),
            });
        }
        if !(eta >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "eta",
                reason: format!("bulk viscosity must be nonnegative, got {eta}"),
            });
        }
        Ok(Self { mu, eta })
    }

    /// `lambda = eta - 2 mu / d`.
    pub fn lambda(&self, dim: usize) -> f64 {
        self.eta - 2.0 * self.mu / dim as f64
    }

    /// `mu + lambda` vanishes (two dimensions without bulk viscosity).
    pub fn is_degenerate(&self, dim: usize) -> bool {
        (self.mu + self.lambda(dim)).abs() <= 1e-14 * self.mu
    }
}

/// `S = 2 mu D + lambda tr(D) I`, given the full gradient `g`.
pub fn stress_from_gradient(g: &Mat3, params: &StressParams, dim: usize) -> Mat3 {
    let lambda = params.lambda(dim);
    let tr = trace(g);
    let mut s = ZERO_MAT;
    for a in 0..dim {
        for b in 0..dim {
            s[a][b] = params.mu * (g[a][b] + g[b][a]);
        }
        s[a][a] += lambda * tr;
    }
    s
}

/// Cellwise `S_h` with the velocity continued by `MirrorOdd`.
pub fn stress(grid: &Grid, u: &CellVectorField, params: &StressParams) -> Result<Vec<Mat3>> {
    let g = grad_h_vector(grid, u, &[GhostPolicy::MirrorOdd])?;
    Ok(g.iter()
        .map(|m| stress_from_gradient(m, params, grid.dim()))
        .collect())
}

/// `A = S - p I`.
pub fn total_stress(s: &Mat3, p: f64, dim: usize) -> Mat3 {
    let id = identity(dim);
    let mut a = *s;
    for i in 0..MAX_DIM {
        a[i][i] -= p * id[i][i];
    }
    a
}

#[inline]
pub fn pressure(rho: f64, theta: f64) -> f64 {
    rho * theta
}

#[inline]
pub fn internal_energy(c_v: f64, theta: f64) -> f64 {
    c_v * theta
}

/// `s = c_v log theta - log rho`.
pub fn entropy(c_v: f64, rho: f64, theta: f64) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(Error::NonPositive {
            quantity: "density",
            cell: 0,
            value: rho,
        });
    }
    if !(theta > 0.0) {
        return Err(Error::NonPositive {
            quantity: "temperature",
            cell: 0,
            value: theta,
        });
    }
    Ok(c_v * theta.ln() - rho.ln())
}
