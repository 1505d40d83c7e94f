use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FemError {
    #[error("invalid material: {0}")]
    InvalidMaterial(String),
    #[error("inverted element: isoparametric map determinant {0:.3e} is not positive")]
    InvertedElement(f64),
    #[error("non-positive volume ratio J = {0:.3e}")]
    NonPositiveJacobian(f64),
    #[error("singular deformation gradient")]
    SingularDeformation,
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("invalid load: {0}")]
    InvalidLoad(String),
    #[error("newton solver did not converge: {0}")]
    NonConverged(String),
    #[error("singular tangent matrix (zero pivot in column {0})")]
    SingularTangent(usize),
}
