//! Uniform cube mesh on the slab `T^{d-1} x [-H, H]`.
//!
//! Cells are numbered lexicographically with the last (vertical) index
//! running fastest. Faces are numbered per axis. For a periodic axis the face
//! id coincides with the id of the cell below it; for the vertical axis the
//! face id is `column * (N_d + 1) + layer`, layers `0` and `N_d` being the
//! exterior plates.
//!
//! Every face carries a normal sign. Interior faces use the fixed normal
//! `+e_i`, so `in` is the cell below and `out` the cell above. Exterior faces
//! use the outward normal and `in` is always the cell inside the domain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_DIM: usize = 3;

/// Geometric description of the slab and its resolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    /// Horizontal half period `L`.
    pub half_period: f64,
    /// Vertical half height `H`.
    pub half_height: f64,
    pub h: f64,
}

impl GridSpec {
    pub fn new(dim: usize, half_period: f64, half_height: f64, h: f64) -> Self {
        Self {
            dim,
            half_period,
            half_height,
            h,
        }
    }

    /// Square/cube slab with `n` cells per direction and `L = H = 0.5`.
    pub fn unit(dim: usize, n: usize) -> Self {
        Self::new(dim, 0.5, 0.5, 1.0 / n as f64)
    }

    /// Cell counts per axis; unused axes report 1.
    pub fn counts(&self) -> Result<[usize; MAX_DIM]> {
        if self.dim != 2 && self.dim != 3 {
            return Err(Error::InvalidGrid(format!(
                "dimension must be 2 or 3, got {}",
                self.dim
            )));
        }
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "h must be positive, got {}",
                self.h
            )));
        }
        if !(self.half_period > 0.0) || !(self.half_height > 0.0) {
            return Err(Error::InvalidGrid("L and H must be positive".into()));
        }
        let nh = integer_ratio(2.0 * self.half_period, self.h)?;
        let nv = integer_ratio(2.0 * self.half_height, self.h)?;
        let mut n = [1; MAX_DIM];
        for slot in n.iter_mut().take(self.dim - 1) {
            *slot = nh;
        }
        n[self.dim - 1] = nv;
        Ok(n)
    }
}

fn integer_ratio(extent: f64, h: f64) -> Result<usize> {
    let r = extent / h;
    let n = r.round();
    if n < 1.0 || (r - n).abs() > 1e-9 * r.max(1.0) {
        return Err(Error::Divisibility { extent, h });
    }
    Ok(n as usize)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FaceClass {
    Interior,
    Exterior,
}

/// A face identified by its axis and its id within that axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FaceIndex {
    pub axis: usize,
    pub id: usize,
}

/// What lies on the far side of a face.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Neighbor {
    Cell(usize),
    /// Ghost cell behind the exterior face with the given ordinal.
    Ghost(usize),
}

impl Neighbor {
    pub fn cell(self) -> Option<usize> {
        match self {
            Neighbor::Cell(c) => Some(c),
            Neighbor::Ghost(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Face {
    pub axis: usize,
    pub class: FaceClass,
    /// Cell on the `in` side (always inside the domain).
    pub inner: usize,
    pub outer: Neighbor,
    /// `+1` for interior faces; outward sign for exterior faces.
    pub normal: f64,
    pub center: [f64; MAX_DIM],
}

impl Face {
    pub fn exterior_ordinal(&self) -> Option<usize> {
        match self.outer {
            Neighbor::Ghost(e) => Some(e),
            Neighbor::Cell(_) => None,
        }
    }
}

/// Cube of size `h` centred on a face of one axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualCell {
    pub axis: usize,
    pub face: usize,
    pub center: [f64; MAX_DIM],
    /// Straddles an exterior plate; half of it lies in ghost space.
    pub boundary: bool,
}

/// Face of a cell seen from that cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellFace {
    pub face: FaceIndex,
    pub class: FaceClass,
    /// Outward normal sign along `face.axis`.
    pub outward: f64,
    pub neighbor: Neighbor,
}

impl CellFace {
    pub fn outward_normal(&self) -> [f64; MAX_DIM] {
        let mut n = [0.0; MAX_DIM];
        n[self.face.axis] = self.outward;
        n
    }
}

#[derive(Clone, Debug)]
pub struct Grid {
    spec: GridSpec,
    dim: usize,
    n: [usize; MAX_DIM],
    strides: [usize; MAX_DIM],
    ncells: usize,
    ncols: usize,
    faces: Vec<Vec<Face>>,
}

impl Grid {
    pub fn new(spec: GridSpec) -> Result<Self> {
        let n = spec.counts()?;
        let dim = spec.dim;
        let mut strides = [0; MAX_DIM];
        let mut s = 1;
        for a in (0..dim).rev() {
            strides[a] = s;
            s *= n[a];
        }
        let ncells = s;
        let ncols = ncells / n[dim - 1];
        let mut grid = Self {
            spec,
            dim,
            n,
            strides,
            ncells,
            ncols,
            faces: Vec::new(),
        };
        grid.faces = (0..dim).map(|a| grid.build_faces(a)).collect();
        Ok(grid)
    }

    fn build_faces(&self, axis: usize) -> Vec<Face> {
        let h = self.spec.h;
        if axis + 1 < self.dim {
            (0..self.ncells)
                .map(|c| {
                    let mut center = self.cell_center(c);
                    center[axis] += 0.5 * h;
                    if center[axis] > self.spec.half_period {
                        center[axis] -= 2.0 * self.spec.half_period;
                    }
                    Face {
                        axis,
                        class: FaceClass::Interior,
                        inner: c,
                        outer: Neighbor::Cell(self.shift(c, axis, 1).expect("periodic")),
                        normal: 1.0,
                        center,
                    }
                })
                .collect()
        } else {
            let nv = self.n[axis];
            let mut faces = Vec::with_capacity(self.ncols * (nv + 1));
            for col in 0..self.ncols {
                for layer in 0..=nv {
                    let below = (layer > 0).then(|| col * nv + layer - 1);
                    let above = (layer < nv).then(|| col * nv + layer);
                    let reference = below.or(above).unwrap();
                    let mut center = self.cell_center(reference);
                    center[axis] = -self.spec.half_height + layer as f64 * h;
                    let face = match (below, above) {
                        (Some(b), Some(a)) => Face {
                            axis,
                            class: FaceClass::Interior,
                            inner: b,
                            outer: Neighbor::Cell(a),
                            normal: 1.0,
                            center,
                        },
                        (None, Some(a)) => Face {
                            axis,
                            class: FaceClass::Exterior,
                            inner: a,
                            outer: Neighbor::Ghost(col),
                            normal: -1.0,
                            center,
                        },
                        (Some(b), None) => Face {
                            axis,
                            class: FaceClass::Exterior,
                            inner: b,
                            outer: Neighbor::Ghost(self.ncols + col),
                            normal: 1.0,
                            center,
                        },
                        (None, None) => unreachable!(),
                    };
                    faces.push(face);
                }
            }
            faces
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn h(&self) -> f64 {
        self.spec.h
    }

    /// Cell counts per axis (unused axes are 1).
    pub fn counts(&self) -> [usize; MAX_DIM] {
        self.n
    }

    pub fn vertical_axis(&self) -> usize {
        self.dim - 1
    }

    pub fn cell_count(&self) -> usize {
        self.ncells
    }

    /// Number of vertical cell columns, `prod_{j<d} N_j`.
    pub fn column_count(&self) -> usize {
        self.ncols
    }

    pub fn cell_volume(&self) -> f64 {
        self.spec.h.powi(self.dim as i32)
    }

    pub fn face_area(&self) -> f64 {
        self.spec.h.powi(self.dim as i32 - 1)
    }

    pub fn domain_volume(&self) -> f64 {
        self.cell_volume() * self.ncells as f64
    }

    pub fn cell_id(&self, idx: [usize; MAX_DIM]) -> usize {
        (0..self.dim).map(|a| idx[a] * self.strides[a]).sum()
    }

    pub fn cell_index(&self, mut id: usize) -> [usize; MAX_DIM] {
        let mut idx = [0; MAX_DIM];
        for a in 0..self.dim {
            idx[a] = id / self.strides[a];
            id %= self.strides[a];
        }
        idx
    }

    pub fn cell_center(&self, id: usize) -> [f64; MAX_DIM] {
        let idx = self.cell_index(id);
        let mut x = [0.0; MAX_DIM];
        for a in 0..self.dim {
            let lo = if a + 1 < self.dim {
                -self.spec.half_period
            } else {
                -self.spec.half_height
            };
            x[a] = lo + (idx[a] as f64 + 0.5) * self.spec.h;
        }
        x
    }

    /// Lower corner of the domain.
    pub fn origin(&self) -> [f64; MAX_DIM] {
        let mut o = [0.0; MAX_DIM];
        for (a, slot) in o.iter_mut().enumerate().take(self.dim) {
            *slot = if a + 1 < self.dim {
                -self.spec.half_period
            } else {
                -self.spec.half_height
            };
        }
        o
    }

    /// Cell shifted by `step` along `axis`, wrapping periodic axes; `None`
    /// when the shift leaves the slab vertically.
    pub fn shift(&self, cell: usize, axis: usize, step: isize) -> Option<usize> {
        let mut idx = self.cell_index(cell);
        let n = self.n[axis] as isize;
        let pos = idx[axis] as isize + step;
        if axis + 1 < self.dim {
            idx[axis] = pos.rem_euclid(n) as usize;
        } else {
            if pos < 0 || pos >= n {
                return None;
            }
            idx[axis] = pos as usize;
        }
        Some(self.cell_id(idx))
    }

    pub fn face_count(&self, axis: usize) -> usize {
        self.faces[axis].len()
    }

    pub fn faces(&self, axis: usize) -> &[Face] {
        &self.faces[axis]
    }

    pub fn face(&self, f: FaceIndex) -> &Face {
        &self.faces[f.axis][f.id]
    }

    pub fn exterior_count(&self) -> usize {
        2 * self.ncols
    }

    /// Face index of the exterior face with the given ordinal.
    pub fn exterior_face(&self, ordinal: usize) -> FaceIndex {
        let nv = self.n[self.dim - 1];
        let (col, layer) = if ordinal < self.ncols {
            (ordinal, 0)
        } else {
            (ordinal - self.ncols, nv)
        };
        FaceIndex {
            axis: self.dim - 1,
            id: col * (nv + 1) + layer,
        }
    }

    pub fn exterior_faces(&self) -> impl Iterator<Item = &Face> + '_ {
        (0..self.exterior_count()).map(move |e| self.face(self.exterior_face(e)))
    }

    /// `(in, out)` across a face; `out` is a ghost for exterior faces.
    pub fn face_cells(&self, f: FaceIndex) -> (usize, Neighbor) {
        let face = self.face(f);
        (face.inner, face.outer)
    }

    /// Face of `cell` on its lower (`upper = false`) or upper side along `axis`.
    pub fn cell_face(&self, cell: usize, axis: usize, upper: bool) -> FaceIndex {
        if axis + 1 < self.dim {
            let id = if upper {
                cell
            } else {
                self.shift(cell, axis, -1).expect("periodic")
            };
            FaceIndex { axis, id }
        } else {
            let nv = self.n[axis];
            let col = cell / nv;
            let layer = cell % nv + usize::from(upper);
            FaceIndex {
                axis,
                id: col * (nv + 1) + layer,
            }
        }
    }

    /// Neighbour of `cell` across its lower/upper face along `axis`.
    pub fn neighbor(&self, cell: usize, axis: usize, upper: bool) -> Neighbor {
        let f = self.cell_face(cell, axis, upper);
        let face = self.face(f);
        match face.class {
            FaceClass::Interior => {
                if upper {
                    face.outer
                } else {
                    Neighbor::Cell(face.inner)
                }
            }
            FaceClass::Exterior => face.outer,
        }
    }

    /// The `2d` faces of a cell, lower before upper, axis by axis.
    pub fn faces_of(&self, cell: usize) -> Vec<CellFace> {
        let mut out = Vec::with_capacity(2 * self.dim);
        for axis in 0..self.dim {
            for upper in [false, true] {
                let face = self.cell_face(cell, axis, upper);
                let class = self.face(face).class;
                out.push(CellFace {
                    face,
                    class,
                    outward: if upper { 1.0 } else { -1.0 },
                    neighbor: self.neighbor(cell, axis, upper),
                });
            }
        }
        out
    }

    /// Does the cell touch an exterior plate?
    pub fn is_boundary_cell(&self, cell: usize) -> bool {
        let nv = self.n[self.dim - 1];
        let k = cell % nv;
        k == 0 || k + 1 == nv
    }

    pub fn dual_cells(&self, axis: usize) -> impl Iterator<Item = DualCell> + '_ {
        self.faces[axis]
            .iter()
            .enumerate()
            .map(move |(id, f)| DualCell {
                axis,
                face: id,
                center: f.center,
                boundary: f.class == FaceClass::Exterior,
            })
    }

    /// Pieces of the dual cell of a face that lie inside the domain, as
    /// `(cell, centre of the half cube)`. Each piece has volume `h^d / 2`.
    pub fn dual_halves(&self, f: FaceIndex) -> ([(usize, [f64; MAX_DIM]); 2], usize) {
        let face = self.face(f);
        let q = 0.25 * self.spec.h;
        let mut lo = face.center;
        let mut hi = face.center;
        lo[f.axis] -= q;
        hi[f.axis] += q;
        match face.outer {
            Neighbor::Cell(out) => ([(face.inner, lo), (out, hi)], 2),
            Neighbor::Ghost(_) => {
                let mut c = face.center;
                c[f.axis] -= face.normal * q;
                ([(face.inner, c), (face.inner, c)], 1)
            }
        }
    }

    /// Vertex lattice size per axis (periodic axes: `N`, vertical: `N + 1`).
    pub fn vertex_counts(&self) -> [usize; MAX_DIM] {
        let mut v = self.n;
        v[self.dim - 1] += 1;
        v
    }
}
