//! Finite-volume discretisation of the compressible Navier-Stokes-Fourier
//! system in a horizontally periodic slab heated through its plates.

pub mod diagnostics;
pub mod error;
pub mod fields;
pub mod grid;
pub mod io;
pub mod operators;
pub mod scheme;
pub mod study;
pub mod verify;

pub use error::{Error, Result};
pub use fields::{CellScalarField, CellVectorField, FaceScalarField, State};
pub use grid::{Grid, GridSpec};
pub use operators::{GhostPolicy, StressParams};
pub use scheme::{BoundaryTemperature, NumParams, PhysParams, SolveStats, Trajectory};
pub use study::{BoundarySpec, InitialData, StudyParams};
