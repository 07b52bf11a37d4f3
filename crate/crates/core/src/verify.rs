//! Randomised checks of the exact discrete calculus identities:
//! summation by parts with boundary terms, commutation of the composite
//! operators, the Korn identity, `Delta_h = div_T grad_E` and the adjointness
//! of the momentum stress term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::fields::{ddot, trace, CellScalarField, CellVectorField, Mat3, ZERO_MAT};
use crate::grid::{Grid, GridSpec, Neighbor};
use crate::operators::{
    curl_h, div_h, div_t, grad_edge, grad_h, grad_h_vector, laplace_h, partial_h,
    stress_from_gradient, Curl, GhostPolicy, StressParams,
};
use crate::scheme::{stress_adjoint_pairing, stress_direct_pairing};

/// Identity names in report order.
pub const IBP_GRADIENT: &str = "ibp_gradient_divergence";
pub const IBP_LAPLACE: &str = "ibp_laplace";
pub const IBP_CURL: &str = "ibp_curl";
pub const COMPAT_INTERIOR: &str = "op_compat_interior";
pub const COMPAT_GHOST_LAYERS: &str = "op_compat_extension_i";
pub const COMPAT_EVEN: &str = "op_compat_extension_ii";
pub const KORN_STATED: &str = "korn_stated";
pub const KORN_BOUNDARY: &str = "korn_with_boundary_term";
pub const LAPLACE_SPLIT: &str = "laplace_div_grad_edge";
pub const STRESS_ADJOINT: &str = "stress_adjoint";
pub const NEGATIVE_CONTROL: &str = "negative_control_even_velocity";

#[derive(Clone, Debug)]
pub struct VerifyConfig {
    pub seed: u64,
    pub trials: usize,
    /// `(dim, cells per unit length)` pairs.
    pub sizes: Vec<(usize, usize)>,
    pub tolerance: f64,
    /// Replaces the velocity ghosts of the Korn check by `Even`.
    pub inject_wrong_ghost: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            trials: 100,
            sizes: vec![(2, 8), (2, 64), (3, 4), (3, 16)],
            tolerance: 1e-11,
            inject_wrong_ghost: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IdentityCheck {
    pub name: &'static str,
    pub dim: usize,
    pub cells: usize,
    pub trials: usize,
    pub max_residual: f64,
    pub tolerance: f64,
    /// Informational checks do not decide the overall verdict.
    pub gating: bool,
    /// Controls are expected to exceed the tolerance.
    pub expect_failure: bool,
}

impl IdentityCheck {
    pub fn passed(&self) -> bool {
        (self.max_residual <= self.tolerance) != self.expect_failure
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<IdentityCheck>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks
            .iter()
            .filter(|c| c.gating)
            .all(IdentityCheck::passed)
    }

    /// One table row per check.
    pub fn rows(&self) -> Vec<VerifyRow> {
        self.checks
            .iter()
            .map(|c| VerifyRow {
                identity: c.name,
                dim: c.dim,
                cells: c.cells,
                trials: c.trials,
                max_residual: c.max_residual,
                tolerance: c.tolerance,
                gating: c.gating,
                expect_failure: c.expect_failure,
                passed: c.passed(),
            })
            .collect()
    }

    /// Largest residual of one identity over all grid sizes.
    pub fn worst(&self, name: &str) -> Option<f64> {
        self.checks
            .iter()
            .filter(|c| c.name == name)
            .map(|c| c.max_residual)
            .reduce(f64::max)
    }
}

/// Row of the `verify.csv` table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyRow {
    pub identity: &'static str,
    pub dim: usize,
    pub cells: usize,
    pub trials: usize,
    pub max_residual: f64,
    pub tolerance: f64,
    pub gating: bool,
    pub expect_failure: bool,
    pub passed: bool,
}

fn rel(diff: f64, scale: f64) -> f64 {
    diff.abs() / scale.max(f64::MIN_POSITIVE)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_scalar(grid: &Grid, rng: &mut ChaCha8Rng) -> CellScalarField {
    CellScalarField(random_vec(rng, grid.cell_count()))
}

fn random_vector(grid: &Grid, rng: &mut ChaCha8Rng) -> CellVectorField {
    let d = grid.dim();
    let mut v = CellVectorField::zeros(grid);
    for x in v.iter_mut() {
        for slot in x.iter_mut().take(d) {
            *slot = rng.random_range(-1.0..1.0);
        }
    }
    v
}

fn custom(rng: &mut ChaCha8Rng, grid: &Grid) -> GhostPolicy {
    GhostPolicy::Custom(random_vec(rng, grid.exterior_count()))
}

fn ghost_values(grid: &Grid, v: &[f64], g: &GhostPolicy) -> Vec<f64> {
    (0..grid.exterior_count())
        .map(|e| g.ghost(e, v[grid.face(grid.exterior_face(e)).inner]))
        .collect()
}

/// Summation by parts of `grad_h` against `div_h`; returns the larger
/// residual of the two boundary forms.
fn ibp_gradient(grid: &Grid, rng: &mut ChaCha8Rng) -> Result<f64> {
    let d = grid.dim();
    let f = random_scalar(grid, rng);
    let fg = custom(rng, grid);
    let w = random_vector(grid, rng);
    let wg: Vec<GhostPolicy> = (0..d).map(|_| custom(rng, grid)).collect();
    let gf = grad_h(grid, &f, &fg)?;
    let dw = div_h(grid, &w, &wg)?;
    let vol = grid.cell_volume();
    let mut lhs = 0.0;
    let mut scale = 0.0;
    for c in 0..grid.cell_count() {
        let a: f64 = (0..d).map(|i| gf[c][i] * w[c][i]).sum();
        let b = f[c] * dw[c];
        lhs += vol * (a + b);
        scale += vol * (a.abs() + b.abs());
    }
    let wd = w.component(d - 1);
    let f_out = ghost_values(grid, &f, &fg);
    let w_out = ghost_values(grid, &wd, &wg[d - 1]);
    let (mut rhs1, mut rhs2) = (0.0, 0.0);
    for e in 0..grid.exterior_count() {
        let face = grid.face(grid.exterior_face(e));
        let (fi, wi) = (f[face.inner], wd[face.inner]);
        let (fo, wo) = (f_out[e], w_out[e]);
        let area_n = grid.face_area() * face.normal;
        rhs1 += area_n * (0.5 * (fi + fo) * wi + 0.5 * fi * (wo - wi));
        rhs2 += area_n * (fi * 0.5 * (wi + wo) + 0.5 * (fo - fi) * wi);
    }
    Ok(rel(lhs - rhs1, scale).max(rel(lhs - rhs2, scale)))
}

/// `int Delta_h f v = sum_ext [[f]]/h v_in - h sum_int grad_E f grad_E v`.
fn ibp_laplace(grid: &Grid, rng: &mut ChaCha8Rng) -> Result<f64> {
    let f = random_scalar(grid, rng);
    let v = random_scalar(grid, rng);
    let fg = custom(rng, grid);
    let lap = laplace_h(grid, &f, &fg)?;
    let vol = grid.cell_volume();
    let area = grid.face_area();
    let h = grid.h();
    let lhs: f64 = (0..grid.cell_count()).map(|c| vol * lap[c] * v[c]).sum();
    let scale: f64 = (0..grid.cell_count())
        .map(|c| vol * (lap[c] * v[c]).abs())
        .sum();
    let ef = grad_edge(grid, &f, &fg)?;
    let ev = grad_edge(grid, &v, &GhostPolicy::Even)?;
    let f_out = ghost_values(grid, &f, &fg);
    let mut rhs = 0.0;
    for axis in 0..grid.dim() {
        for (id, face) in grid.faces(axis).iter().enumerate() {
            match face.outer {
                Neighbor::Cell(_) => rhs -= h * area * ef[axis].values[id] * ev[axis].values[id],
                Neighbor::Ghost(e) => {
                    rhs += area * (f_out[e] - f[face.inner]) / h * v[face.inner];
                }
            }
        }
    }
    Ok(rel(lhs - rhs, scale))
}

fn cross_n(a: &[f64; 3], b: &[f64; 3], n: f64) -> f64 {
    n * (a[0] * b[1] - a[1] * b[0])
}

/// Summation by parts of `curl_h` in three dimensions.
fn ibp_curl(grid: &Grid, rng: &mut ChaCha8Rng) -> Result<f64> {
    let f = random_vector(grid, rng);
    let w = random_vector(grid, rng);
    let fg: Vec<GhostPolicy> = (0..3).map(|_| custom(rng, grid)).collect();
    let wg: Vec<GhostPolicy> = (0..3).map(|_| custom(rng, grid)).collect();
    let (Curl::Vector(cf), Curl::Vector(cw)) = (curl_h(grid, &f, &fg)?, curl_h(grid, &w, &wg)?)
    else {
        unreachable!("three-dimensional grid");
    };
    let vol = grid.cell_volume();
    let mut lhs = 0.0;
    let mut scale = 0.0;
    for c in 0..grid.cell_count() {
        let a: f64 = (0..3).map(|i| cf[c][i] * w[c][i]).sum();
        let b: f64 = (0..3).map(|i| f[c][i] * cw[c][i]).sum();
        lhs += vol * (a - b);
        scale += vol * (a.abs() + b.abs());
    }
    let outs = |v: &CellVectorField, g: &[GhostPolicy]| -> Vec<Vec<f64>> {
        (0..3)
            .map(|i| ghost_values(grid, &v.component(i), &g[i]))
            .collect()
    };
    let (fo, wo) = (outs(&f, &fg), outs(&w, &wg));
    let (mut rhs1, mut rhs2) = (0.0, 0.0);
    for e in 0..grid.exterior_count() {
        let face = grid.face(grid.exterior_face(e));
        let (fi, wi) = (f[face.inner], w[face.inner]);
        let fe = [fo[0][e], fo[1][e], fo[2][e]];
        let we = [wo[0][e], wo[1][e], wo[2][e]];
        let avg = |a: &[f64; 3], b: &[f64; 3]| {
            [
                0.5 * (a[0] + b[0]),
                0.5 * (a[1] + b[1]),
                0.5 * (a[2] + b[2]),
            ]
        };
        let jump = |a: &[f64; 3], b: &[f64; 3]| [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let area = grid.face_area();
        let n = face.normal;
        rhs1 += area * (cross_n(&avg(&fi, &fe), &wi, n) + 0.5 * cross_n(&fi, &jump(&wi, &we), n));
        rhs2 += area * (cross_n(&fi, &avg(&wi, &we), n) + 0.5 * cross_n(&jump(&fi, &fe), &wi, n));
    }
    Ok(rel(lhs - rhs1, scale).max(rel(lhs - rhs2, scale)))
}

/// Ghost values of the intermediate fields `q_ab = partial_a w_b`, indexed `[a][b][ordinal]`.
type TensorGhosts = Vec<Vec<Vec<f64>>>;

/// Per-cell residuals of `grad div = curl curl + div grad` and
/// `div grad^T = grad div`, with their magnitudes.
struct CompatResidual {
    first: Vec<f64>,
    second: Vec<f64>,
    scale: Vec<f64>,
}

fn compat_residuals(
    grid: &Grid,
    w: &CellVectorField,
    wg: &[GhostPolicy],
    qg: &TensorGhosts,
) -> Result<CompatResidual> {
    let d = grid.dim();
    let n = grid.cell_count();
    let q = grad_h_vector(grid, w, wg)?;
    let field = |a: usize, b: usize| -> Vec<f64> { q.iter().map(|m| m[a][b]).collect() };
    let combine = |terms: &[(f64, usize, usize)]| -> (Vec<f64>, GhostPolicy) {
        let mut v = vec![0.0; n];
        let mut g = vec![0.0; grid.exterior_count()];
        for &(s, a, b) in terms {
            for (slot, m) in v.iter_mut().zip(&q) {
                *slot += s * m[a][b];
            }
            for (slot, x) in g.iter_mut().zip(&qg[a][b]) {
                *slot += s * x;
            }
        }
        (v, GhostPolicy::Custom(g))
    };
    let (div, div_g) = combine(&(0..d).map(|a| (1.0, a, a)).collect::<Vec<_>>());
    let grad_div: Vec<CellScalarField> = (0..d)
        .map(|j| partial_h(grid, &div, j, &div_g))
        .collect::<Result<_>>()?;
    let mut lap = vec![vec![0.0; n]; d];
    let mut div_t = vec![vec![0.0; n]; d];
    let mut mag = vec![0.0f64; n];
    for j in 0..d {
        for a in 0..d {
            let p = partial_h(
                grid,
                &field(a, j),
                a,
                &GhostPolicy::Custom(qg[a][j].clone()),
            )?;
            let r = partial_h(
                grid,
                &field(j, a),
                a,
                &GhostPolicy::Custom(qg[j][a].clone()),
            )?;
            for c in 0..n {
                lap[j][c] += p[c];
                div_t[j][c] += r[c];
            }
        }
    }
    let curl_curl: Vec<Vec<f64>> = if d == 2 {
        let (om, om_g) = combine(&[(1.0, 0, 1), (-1.0, 1, 0)]);
        let d0 = partial_h(grid, &om, 0, &om_g)?;
        let d1 = partial_h(grid, &om, 1, &om_g)?;
        vec![d1.0, d0.iter().map(|x| -x).collect()]
    } else {
        let omega: Vec<(Vec<f64>, GhostPolicy)> = vec![
            combine(&[(1.0, 1, 2), (-1.0, 2, 1)]),
            combine(&[(1.0, 2, 0), (-1.0, 0, 2)]),
            combine(&[(1.0, 0, 1), (-1.0, 1, 0)]),
        ];
        let dd = |i: usize, a: usize| partial_h(grid, &omega[i].0, a, &omega[i].1);
        let (o21, o12) = (dd(2, 1)?, dd(1, 2)?);
        let (o02, o20) = (dd(0, 2)?, dd(2, 0)?);
        let (o10, o01) = (dd(1, 0)?, dd(0, 1)?);
        vec![
            (0..n).map(|c| o21[c] - o12[c]).collect(),
            (0..n).map(|c| o02[c] - o20[c]).collect(),
            (0..n).map(|c| o10[c] - o01[c]).collect(),
        ]
    };
    let mut first = vec![0.0f64; n];
    let mut second = vec![0.0f64; n];
    for c in 0..n {
        for j in 0..d {
            first[c] = first[c].max((grad_div[j][c] - curl_curl[j][c] - lap[j][c]).abs());
            second[c] = second[c].max((div_t[j][c] - grad_div[j][c]).abs());
            mag[c] = mag[c]
                .max(grad_div[j][c].abs())
                .max(curl_curl[j][c].abs())
                .max(lap[j][c].abs())
                .max(div_t[j][c].abs());
        }
    }
    Ok(CompatResidual {
        first,
        second,
        scale: mag,
    })
}

fn compat_max(res: &CompatResidual, cells: impl Iterator<Item = usize>) -> f64 {
    let scale = res.scale.iter().cloned().fold(0.0, f64::max);
    cells
        .map(|c| rel(res.first[c].max(res.second[c]), scale))
        .fold(0.0, f64::max)
}

/// Any ghosts, checked on cells away from the plates.
fn compat_interior(grid: &Grid, rng: &mut ChaCha8Rng) -> Result<f64> {
    let d = grid.dim();
    let w = random_vector(grid, rng);
    let wg: Vec<GhostPolicy> = (0..d).map(|_| custom(rng, grid)).collect();
    let qg: TensorGhosts = (0..d)
        .map(|_| {
            (0..d)
                .map(|_| random_vec(rng, grid.exterior_count()))
                .collect()
        })
        .collect();
    let res = compat_residuals(grid, &w, &wg, &qg)?;
    Ok(compat_max(
        &res,
        (0..grid.cell_count()).filter(|&c| !grid.is_boundary_cell(c)),
    ))
}

/// Extension (ii): zero jumps of `w` and of its gradient across the plates.
fn compat_even(grid: &Grid, rng: &mut ChaCha8Rng) -> Result<f64> {
    let d = grid.dim();
    let w = random_vector(grid, rng);
    let wg = vec![GhostPolicy::Even];
    let q = grad_h_vector(grid, &w, &wg)?;
    let qg: TensorGhosts = (0..d)
        .map(|a| {
            (0..d)
                .map(|b| {
                    (0..grid.exterior_count())
                        .map(|e| q[grid.face(grid.exterior_face(e)).inner][a][b])
                        .collect()
                })
                .collect()
        })
        .collect();
    let res = compat_residuals(grid, &w, &wg, &qg)?;
    Ok(compat_max(&res, 0..grid.cell_count()))
}

/// Extension (i): two arbitrary ghost layers; the derived fields behind the
/// plates are the centred differences of the extended `w`.
fn compat_ghost_layers(grid: &Grid, rng: &mut ChaCha8Rng) -> Result<f64> {
    let d = grid.dim();
    let ne = grid.exterior_count();
    let ncols = grid.column_count();
    let h = grid.h();
    let w = random_vector(grid, rng);
    let layer1: Vec<Vec<f64>> = (0..d).map(|_| random_vec(rng, ne)).collect();
    let layer2: Vec<Vec<f64>> = (0..d).map(|_| random_vec(rng, ne)).collect();
    let wg: Vec<GhostPolicy> = layer1
        .iter()
        .map(|g| GhostPolicy::Custom(g.clone()))
        .collect();
    let ghost_neighbor = |e: usize, a: usize, upper: bool| -> usize {
        let inner = grid.face(grid.exterior_face(e)).inner;
        let Neighbor::Cell(nb) = grid.neighbor(inner, a, upper) else {
            unreachable!("horizontal neighbours are periodic");
        };
        let side = e / ncols;
        side * ncols + nb / grid.counts()[d - 1]
    };
    let qg: TensorGhosts = (0..d)
        .map(|a| {
            (0..d)
                .map(|b| {
                    (0..ne)
                        .map(|e| {
                            let face = grid.face(grid.exterior_face(e));
                            if a + 1 == d {
                                let inner = w[face.inner][b];
                                face.normal * (layer2[b][e] - inner) / (2.0 * h)
                            } else {
                                let up = layer1[b][ghost_neighbor(e, a, true)];
                                let down = layer1[b][ghost_neighbor(e, a, false)];
                                (up - down) / (2.0 * h)
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let res = compat_residuals(grid, &w, &wg, &qg)?;
    Ok(compat_max(&res, 0..grid.cell_count()))
}

/// `(int S_h : grad_h u, mu |grad_h u|^2 + (mu + lambda) |div_h u|^2, boundary term, scale)`.
fn korn_terms(
    grid: &Grid,
    u: &CellVectorField,
    ghost: &GhostPolicy,
    sp: &StressParams,
) -> Result<[f64; 4]> {
    let d = grid.dim();
    let g = grad_h_vector(grid, u, std::slice::from_ref(ghost))?;
    let vol = grid.cell_volume();
    let lambda = sp.lambda(d);
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    let mut scale = 0.0;
    for m in &g {
        let s = stress_from_gradient(m, sp, d);
        lhs += vol * ddot(&s, m);
        let a = sp.mu * ddot(m, m);
        let b = (sp.mu + lambda) * trace(m).powi(2);
        rhs += vol * (a + b);
        scale += vol * (a.abs() + b.abs());
    }
    let mut boundary = 0.0;
    for e in 0..grid.exterior_count() {
        let face = grid.face(grid.exterior_face(e));
        let m = &g[face.inner];
        let tangential: f64 = (0..d - 1).map(|j| m[j][j]).sum();
        boundary +=
            2.0 * sp.mu * grid.face_area() * face.normal * u[face.inner][d - 1] * tangential;
    }
    Ok([lhs, rhs, boundary, scale])
}

fn random_stress_params(rng: &mut ChaCha8Rng) -> StressParams {
    StressParams {
        mu: rng.random_range(0.1..1.0),
        eta: rng.random_range(0.0..1.0),
    }
}

fn korn(grid: &Grid, rng: &mut ChaCha8Rng, ghost: &GhostPolicy) -> Result<(f64, f64)> {
    let u = random_vector(grid, rng);
    let sp = random_stress_params(rng);
    let [lhs, rhs, boundary, scale] = korn_terms(grid, &u, ghost, &sp)?;
    Ok((rel(lhs - rhs, scale), rel(lhs - rhs - boundary, scale)))
}

fn laplace_split(grid: &Grid, rng: &mut ChaCha8Rng) -> Result<f64> {
    let f = random_scalar(grid, rng);
    let g = custom(rng, grid);
    let a = laplace_h(grid, &f, &g)?;
    let b = div_t(grid, &grad_edge(grid, &f, &g)?);
    let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    Ok(a.iter()
        .zip(b.iter())
        .fold(0.0, |m, (x, y)| m.max(rel(x - y, scale))))
}

fn stress_adjoint(grid: &Grid, rng: &mut ChaCha8Rng) -> f64 {
    let d = grid.dim();
    let a: Vec<Mat3> = (0..grid.cell_count())
        .map(|_| {
            let mut m = ZERO_MAT;
            for i in 0..d {
                for j in i..d {
                    m[i][j] = rng.random_range(-1.0..1.0);
                    m[j][i] = m[i][j];
                }
            }
            m
        })
        .collect();
    let phi = random_vector(grid, rng);
    let x = stress_adjoint_pairing(grid, &a, &phi);
    let y = stress_direct_pairing(grid, &a, &phi);
    rel(x - y, x.abs().max(y.abs()))
}

/// Runs every identity on every configured grid.
pub fn verify_operators(cfg: &VerifyConfig) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    for &(dim, n) in &cfg.sizes {
        let grid = Grid::new(GridSpec::unit(dim, n))?;
        let per_trial = (0..cfg.trials)
            .into_par_iter()
            .map(|trial| -> Result<Vec<(&'static str, f64)>> {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(((dim as u64) << 48) ^ ((n as u64) << 24) ^ trial as u64);
                let mut out = vec![
                    (IBP_GRADIENT, ibp_gradient(&grid, &mut rng)?),
                    (IBP_LAPLACE, ibp_laplace(&grid, &mut rng)?),
                ];
                if dim == 3 {
                    out.push((IBP_CURL, ibp_curl(&grid, &mut rng)?));
                }
                out.push((COMPAT_INTERIOR, compat_interior(&grid, &mut rng)?));
                out.push((COMPAT_GHOST_LAYERS, compat_ghost_layers(&grid, &mut rng)?));
                out.push((COMPAT_EVEN, compat_even(&grid, &mut rng)?));
                let velocity = if cfg.inject_wrong_ghost {
                    GhostPolicy::Even
                } else {
                    GhostPolicy::MirrorOdd
                };
                let (stated, corrected) = korn(&grid, &mut rng, &velocity)?;
                out.push((KORN_STATED, stated));
                out.push((KORN_BOUNDARY, corrected));
                out.push((LAPLACE_SPLIT, laplace_split(&grid, &mut rng)?));
                out.push((STRESS_ADJOINT, stress_adjoint(&grid, &mut rng)));
                out.push((
                    NEGATIVE_CONTROL,
                    korn(&grid, &mut rng, &GhostPolicy::Even)?.1,
                ));
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        for (i, &(name, _)) in per_trial.first().into_iter().flatten().enumerate() {
            let max_residual = per_trial.iter().map(|t| t[i].1).fold(0.0, f64::max);
            checks.push(IdentityCheck {
                name,
                dim,
                cells: grid.cell_count(),
                trials: cfg.trials,
                max_residual,
                tolerance: cfg.tolerance,
                gating: name != KORN_STATED,
                expect_failure: name == NEGATIVE_CONTROL,
            });
        }
    }
    Ok(VerifyReport { checks })
}
