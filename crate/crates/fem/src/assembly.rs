//! Global residual and tangent assembly.

use crate::band::BandMatrix;
use crate::element::{element_energy, element_forces};
use crate::material::Material;
use crate::mesh::GridMesh;
use crate::{FemError, Result};

pub type SystemMatrix = BandMatrix;

fn check_len(mesh: &GridMesh, v: &[f64], what: &str) -> Result<()> {
    if v.len() != mesh.dof_count() {
        return Err(FemError::IndexOutOfRange(format!(
            "{what} has {} entries, mesh has {} DOFs",
            v.len(),
            mesh.dof_count()
        )));
    }
    Ok(())
}

fn gather(mesh: &GridMesh, e: usize, u: &[f64]) -> Result<(Vec<usize>, Vec<[f64; 3]>, Vec<f64>)> {
    let dofs = mesh.element_dofs(e)?;
    let coords = mesh
        .element_nodes(e)
        .iter()
        .map(|&n| mesh.node_coords(n))
        .collect();
    let ue = dofs
        .iter()
        .map(|&d| {
            u.get(d).copied().ok_or_else(|| {
                FemError::IndexOutOfRange(format!("DOF {d} outside displacement vector"))
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((dofs, coords, ue))
}

/// Residual `R = f_int(u) − f_ext` and tangent `K = ∂R/∂u`. Dirichlet rows
/// and columns are replaced by the identity with zero residual.
pub fn assemble_system(
    mesh: &GridMesh,
    u: &[f64],
    mat: &Material,
    f_ext: &[f64],
) -> Result<(Vec<f64>, SystemMatrix)> {
    check_len(mesh, u, "displacement")?;
    check_len(mesh, f_ext, "external force")?;
    let n = mesh.dof_count();
    let mut residual: Vec<f64> = f_ext.iter().map(|f| -f).collect();
    let mut k = BandMatrix::zeros(n, mesh.dof_bandwidth());
    for e in 0..mesh.element_count() {
        let (dofs, coords, ue) = gather(mesh, e, u)?;
        let (re, ke) = element_forces(mesh.element_kind(), &coords, &ue, mat)?;
        let m = dofs.len();
        for (a, &da) in dofs.iter().enumerate() {
            residual[da] += re[a];
            for (b, &db) in dofs.iter().enumerate() {
                k.add(da, db, ke[a * m + b])?;
            }
        }
    }
    for d in mesh.dirichlet_dofs() {
        residual[d] = 0.0;
        k.constrain(d);
    }
    Ok((residual, k))
}

/// Unconstrained internal force vector `f_int(u)`.
pub fn internal_forces(mesh: &GridMesh, u: &[f64], mat: &Material) -> Result<Vec<f64>> {
    check_len(mesh, u, "displacement")?;
    let mut f = vec![0.0; mesh.dof_count()];
    for e in 0..mesh.element_count() {
        let (dofs, coords, ue) = gather(mesh, e, u)?;
        let (re, _) = element_forces(mesh.element_kind(), &coords, &ue, mat)?;
        for (&d, r) in dofs.iter().zip(re) {
            f[d] += r;
        }
    }
    Ok(f)
}

/// Total potential energy `Σ_e ∫ W dV − f_extᵀ u`.
pub fn total_potential_energy(
    mesh: &GridMesh,
    u: &[f64],
    mat: &Material,
    f_ext: &[f64],
) -> Result<f64> {
    check_len(mesh, u, "displacement")?;
    check_len(mesh, f_ext, "external force")?;
    let mut energy = 0.0;
    for e in 0..mesh.element_count() {
        let (_, coords, ue) = gather(mesh, e, u)?;
        energy += element_energy(mesh.element_kind(), &coords, &ue, mat)?;
    }
    Ok(energy - f_ext.iter().zip(u).map(|(f, x)| f * x).sum::<f64>())
}
