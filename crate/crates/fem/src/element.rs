//! Bilinear quad and trilinear hex elements.

use crate::kinematics::{gradient_from_displacements, reference_gradients, QuadraturePoint};
use crate::kinematics::DeformationState;
use crate::material::{material_tangent, pk1_stress, strain_energy, Material};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ElementKind {
    /// 4-node bilinear quadrilateral, plane strain.
    Quad4,
    /// 8-node trilinear hexahedron.
    Hex8,
}

const GAUSS: f64 = 0.577_350_269_189_625_8;

const QUAD_CORNERS: [[f64; 2]; 4] = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]];

impl ElementKind {
    pub fn for_dim(dim: usize) -> Option<Self> {
        match dim {
            2 => Some(Self::Quad4),
            3 => Some(Self::Hex8),
            _ => None,
        }
    }

    pub fn dim(self) -> usize {
        match self {
            Self::Quad4 => 2,
            Self::Hex8 => 3,
        }
    }

    pub fn node_count(self) -> usize {
        match self {
            Self::Quad4 => 4,
            Self::Hex8 => 8,
        }
    }

    /// Reference corner coordinates in node order: counter-clockwise in the
    /// xy plane, bottom face before top face for hexes.
    pub fn corners(self) -> Vec<[f64; 3]> {
        match self {
            Self::Quad4 => QUAD_CORNERS.iter().map(|c| [c[0], c[1], 0.0]).collect(),
            Self::Hex8 => [-1.0, 1.0]
                .iter()
                .flat_map(|&z| QUAD_CORNERS.iter().map(move |c| [c[0], c[1], z]))
                .collect(),
        }
    }

    /// Tensor-product 2-point Gauss rule.
    pub fn quadrature(self) -> Vec<QuadraturePoint> {
        self.corners()
            .into_iter()
            .map(|c| QuadraturePoint {
                xi: [c[0] * GAUSS, c[1] * GAUSS, c[2] * GAUSS],
                weight: 1.0,
            })
            .collect()
    }

    pub(crate) fn local_gradients(self, xi: &[f64; 3]) -> Vec<[f64; 3]> {
        let dim = self.dim();
        self.corners()
            .iter()
            .map(|c| {
                let factors: Vec<f64> = (0..dim).map(|a| 0.5 * (1.0 + c[a] * xi[a])).collect();
                let mut g = [0.0; 3];
                for a in 0..dim {
                    let others: f64 = (0..dim).filter(|&b| b != a).map(|b| factors[b]).product();
                    g[a] = 0.5 * c[a] * others;
                }
                g
            })
            .collect()
    }
}

/// Strain energy of one element, ∫ W dV.
pub fn element_energy(
    kind: ElementKind,
    element_coords: &[[f64; 3]],
    element_u: &[f64],
    mat: &Material,
) -> Result<f64> {
    let mut energy = 0.0;
    for qp in kind.quadrature() {
        let (grads, det) = reference_gradients(kind, element_coords, &qp.xi)?;
        let f = gradient_from_displacements(kind.dim(), &grads, element_u);
        energy += strain_energy(&DeformationState::from_gradient(f), mat)? * qp.weight * det;
    }
    Ok(energy)
}

/// Internal force vector `r_e = ∫ Bᵀ P dV` and consistent tangent
/// `K_e = ∂r_e/∂u_e` (row-major, `n × n` with `n = nodes × dim`).
pub fn element_forces(
    kind: ElementKind,
    element_coords: &[[f64; 3]],
    element_u: &[f64],
    mat: &Material,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let dim = kind.dim();
    let n = kind.node_count() * dim;
    let mut r = vec![0.0; n];
    let mut k = vec![0.0; n * n];
    for qp in kind.quadrature() {
        let (grads, det) = reference_gradients(kind, element_coords, &qp.xi)?;
        let state =
            DeformationState::from_gradient(gradient_from_displacements(dim, &grads, element_u));
        let p = pk1_stress(&state, mat)?;
        let a = material_tangent(&state, mat)?;
        let w = qp.weight * det;
        for (na, ga) in grads.iter().enumerate() {
            for i in 0..dim {
                let row = na * dim + i;
                r[row] += w * (0..dim).map(|jj| p[i][jj] * ga[jj]).sum::<f64>();
                for (nb, gb) in grads.iter().enumerate() {
                    for kk in 0..dim {
                        let mut acc = 0.0;
                        for jj in 0..dim {
                            for l in 0..dim {
                                acc += ga[jj] * a[i][jj][kk][l] * gb[l];
                            }
                        }
                        k[row * n + nb * dim + kk] += w * acc;
                    }
                }
            }
        }
    }
    Ok((r, k))
}

/// Column-wise central differences of the element residual. Used to verify
/// the analytic tangent and as a fallback when it is unavailable.
pub fn finite_difference_tangent(
    kind: ElementKind,
    element_coords: &[[f64; 3]],
    element_u: &[f64],
    mat: &Material,
    step: f64,
) -> Result<Vec<f64>> {
    let n = element_u.len();
    let mut k = vec![0.0; n * n];
    let mut u = element_u.to_vec();
    for col in 0..n {
        let orig = u[col];
        u[col] = orig + step;
        let (rp, _) = element_forces(kind, element_coords, &u, mat)?;
        u[col] = orig - step;
        let (rm, _) = element_forces(kind, element_coords, &u, mat)?;
        u[col] = orig;
        for row in 0..n {
            k[row * n + col] = (rp[row] - rm[row]) / (2.0 * step);
        }
    }
    Ok(k)
}
