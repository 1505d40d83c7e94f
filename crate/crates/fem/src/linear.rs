use crate::assembly::assemble_system;
use crate::band::BandLu;
use crate::material::Material;
use crate::mesh::GridMesh;
use crate::{FemError, Result};

/// Small-strain predictor `u = K₀⁻¹ f` built from the tangent at rest.
///
/// This is the best linear map from loads to displacements and serves as
/// the dense fully-connected comparator for the surrogate.
#[derive(Debug, Clone)]
pub struct LinearBaseline {
    lu: BandLu,
    dirichlet: Vec<usize>,
}

impl LinearBaseline {
    pub fn new(mesh: &GridMesh, mat: &Material) -> Result<Self> {
        let n = mesh.dof_count();
        let (_, k0) = assemble_system(mesh, &vec![0.0; n], mat, &vec![0.0; n])?;
        Ok(Self {
            lu: k0.factor()?,
            dirichlet: mesh.dirichlet_dofs(),
        })
    }

    pub fn dof_count(&self) -> usize {
        self.lu.size()
    }

    /// Displacements for a load vector; loads on constrained DOFs are
    /// ignored.
    pub fn apply(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.lu.size() {
            return Err(FemError::InvalidLoad(format!(
                "load vector has {} entries, expected {}",
                f.len(),
                self.lu.size()
            )));
        }
        let mut rhs = f.to_vec();
        for &d in &self.dirichlet {
            rhs[d] = 0.0;
        }
        self.lu.solve_in_place(&mut rhs);
        Ok(rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_load_gives_zero_displacement() {
        let mesh = GridMesh::beam(&[8, 3], &[2.0, 0.5]).unwrap();
        let mat = Material::new(500.0, 0.4).unwrap();
        let lin = LinearBaseline::new(&mesh, &mat).unwrap();
        assert!(lin.apply(&vec![0.0; mesh.dof_count()]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_in_load() {
        let mesh = GridMesh::beam(&[8, 3], &[2.0, 0.5]).unwrap();
        let mat = Material::new(500.0, 0.4).unwrap();
        let lin = LinearBaseline::new(&mesh, &mat).unwrap();
        let mut f = vec![0.0; mesh.dof_count()];
        f[mesh.dof_count() - 1] = 1.0;
        let u1 = lin.apply(&f).unwrap();
        f[mesh.dof_count() - 1] = 3.0;
        let u3 = lin.apply(&f).unwrap();
        for (a, b) in u1.iter().zip(&u3) {
            assert!((3.0 * a - b).abs() < 1e-12 * b.abs().max(1.0));
        }
    }
}
