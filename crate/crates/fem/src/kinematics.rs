use crate::element::ElementKind;
use crate::tensor3::{self, Mat3};
use crate::{FemError, Result};

/// Deformation gradient with its invariants. 2D states carry an
/// out-of-plane stretch of 1 (plane strain).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformationState {
    pub f: Mat3,
    pub j: f64,
    pub ic: f64,
}

impl DeformationState {
    pub fn from_gradient(f: Mat3) -> Self {
        Self {
            f,
            j: tensor3::det(&f),
            ic: tensor3::frobenius_sq(&f),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraturePoint {
    /// Reference coordinates; unused trailing entries are zero.
    pub xi: [f64; 3],
    pub weight: f64,
}

/// Shape-function gradients with respect to reference coordinates `X` and
/// the determinant of the isoparametric map at `xi`.
pub(crate) fn reference_gradients(
    kind: ElementKind,
    coords: &[[f64; 3]],
    xi: &[f64; 3],
) -> Result<(Vec<[f64; 3]>, f64)> {
    let dim = kind.dim();
    let local = kind.local_gradients(xi);
    if coords.len() != local.len() {
        return Err(FemError::InvalidMesh(format!(
            "{:?} expects {} nodes, got {}",
            kind,
            local.len(),
            coords.len()
        )));
    }
    // jac[i][a] = ∂X_i/∂ξ_a
    let mut jac = tensor3::IDENTITY;
    for i in 0..dim {
        for a in 0..dim {
            jac[i][a] = coords.iter().zip(&local).map(|(x, g)| x[i] * g[a]).sum();
        }
    }
    let det = tensor3::det(&jac);
    if !(det > 0.0) {
        return Err(FemError::InvertedElement(det));
    }
    let inv = tensor3::inverse(&jac).ok_or(FemError::InvertedElement(det))?;
    // ∂N/∂X_j = Σ_a ∂N/∂ξ_a ∂ξ_a/∂X_j
    let grads = local
        .iter()
        .map(|g| {
            let mut out = [0.0; 3];
            for (j, o) in out.iter_mut().enumerate().take(dim) {
                *o = (0..dim).map(|a| g[a] * inv[a][j]).sum();
            }
            out
        })
        .collect();
    Ok((grads, det))
}

/// `F = I + ∇u` from nodal displacements stored node-major with `dim`
/// components per node.
pub(crate) fn gradient_from_displacements(
    dim: usize,
    grads: &[[f64; 3]],
    element_u: &[f64],
) -> Mat3 {
    let mut f = tensor3::IDENTITY;
    for (node, g) in grads.iter().enumerate() {
        for i in 0..dim {
            let ui = element_u[node * dim + i];
            for j in 0..dim {
                f[i][j] += ui * g[j];
            }
        }
    }
    f
}

/// Deformation state at one quadrature point of an element.
pub fn deformation_state(
    kind: ElementKind,
    element_coords: &[[f64; 3]],
    element_u: &[f64],
    qp: &QuadraturePoint,
) -> Result<DeformationState> {
    let dim = kind.dim();
    if element_u.len() != element_coords.len() * dim {
        return Err(FemError::IndexOutOfRange(format!(
            "element displacement has {} entries, expected {}",
            element_u.len(),
            element_coords.len() * dim
        )));
    }
    let (grads, _) = reference_gradients(kind, element_coords, &qp.xi)?;
    Ok(DeformationState::from_gradient(gradient_from_displacements(
        dim, &grads, element_u,
    )))
}
