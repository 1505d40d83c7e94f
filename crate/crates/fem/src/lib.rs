//! Finite-element machinery for large-deformation elastostatics.
//!
//! Structured quad (2D, plane strain) and hex (3D) grids, a compressible
//! Neo-Hookean material, element residual/tangent evaluation, global
//! assembly into a banded system, and a Newton-Raphson solver with adaptive
//! load stepping.

mod band;
mod error;

pub mod assembly;
pub mod element;
pub mod kinematics;
pub mod linear;
pub mod material;
pub mod mesh;
pub mod solver;
pub mod tensor3;

pub use assembly::{assemble_system, internal_forces, total_potential_energy, SystemMatrix};
pub use band::{BandLu, BandMatrix};
pub use element::{element_energy, element_forces, finite_difference_tangent, ElementKind};
pub use error::FemError;
pub use kinematics::{deformation_state, DeformationState, QuadraturePoint};
pub use linear::LinearBaseline;
pub use material::{lame_from_e_nu, material_tangent, pk1_stress, strain_energy, Material};
pub use mesh::GridMesh;
pub use solver::{newton_solve, FemSolution, SolverOptions};

pub type Result<T> = std::result::Result<T, FemError>;
