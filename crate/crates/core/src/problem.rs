//! Benchmark structures and the map between FEM DOF vectors and grids.
//!
//! Grids are the full raster node grid with `dim` channels per node, so a
//! grid vector has `grid_node_count · dim` entries. Inactive nodes (the
//! void of the L-shape) hold zeros.

use std::fmt;
use std::str::FromStr;

use nfem_fem::{newton_solve, FemSolution, GridMesh, Material, SolverOptions};

use crate::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProblemKind {
    Beam2d,
    Lshape2d,
    Beam3d,
}

impl ProblemKind {
    pub const ALL: [ProblemKind; 3] = [Self::Beam2d, Self::Lshape2d, Self::Beam3d];

    pub fn name(self) -> &'static str {
        match self {
            Self::Beam2d => "beam2d",
            Self::Lshape2d => "lshape2d",
            Self::Beam3d => "beam3d",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            Self::Beam3d => 3,
            _ => 2,
        }
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProblemKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                CoreError::Invalid(format!(
                    "unknown problem '{s}' (expected beam2d, lshape2d or beam3d)"
                ))
            })
    }
}

/// Node counts and physical extents of the bounding grid. For the L-shape
/// `arms` holds the node columns of the vertical arm and node rows of the
/// horizontal arm.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub node_counts: Vec<usize>,
    pub lengths: Vec<f64>,
    pub arms: Option<[usize; 2]>,
}

impl Geometry {
    pub fn default_for(kind: ProblemKind) -> Self {
        match kind {
            ProblemKind::Beam2d => Self {
                node_counts: vec![16, 4],
                lengths: vec![4.0, 1.0],
                arms: None,
            },
            ProblemKind::Lshape2d => Self {
                node_counts: vec![16, 8],
                lengths: vec![3.75, 1.75],
                arms: Some([4, 4]),
            },
            ProblemKind::Beam3d => Self {
                node_counts: vec![28, 12, 12],
                lengths: vec![7.0, 3.0, 3.0],
                arms: None,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct Problem {
    kind: ProblemKind,
    geometry: Geometry,
    mesh: GridMesh,
    material: Material,
}

impl Problem {
    pub fn new(kind: ProblemKind, geometry: Geometry, material: Material) -> Result<Self> {
        if geometry.node_counts.len() != kind.dim() || geometry.lengths.len() != kind.dim() {
            return Err(CoreError::Invalid(format!(
                "{kind} needs {} node counts and lengths",
                kind.dim()
            )));
        }
        let mesh = match kind {
            ProblemKind::Lshape2d => {
                let [cols, rows] = geometry.arms.ok_or_else(|| {
                    CoreError::Invalid("lshape2d needs arm sizes".into())
                })?;
                let (nx, ny) = (geometry.node_counts[0], geometry.node_counts[1]);
                if nx < 2 || ny < 2 {
                    return Err(CoreError::Invalid("lshape2d needs at least 2x2 nodes".into()));
                }
                let spacing = [
                    geometry.lengths[0] / (nx - 1) as f64,
                    geometry.lengths[1] / (ny - 1) as f64,
                ];
                GridMesh::lshape(nx, ny, cols, rows, spacing)?
            }
            _ => GridMesh::beam(&geometry.node_counts, &geometry.lengths)?,
        };
        Ok(Self {
            kind,
            geometry,
            mesh,
            material,
        })
    }

    /// Default geometry with E = 500 Pa and ν = 0.4.
    pub fn standard(kind: ProblemKind) -> Result<Self> {
        Self::new(kind, Geometry::default_for(kind), Material::new(500.0, 0.4)?)
    }

    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn mesh(&self) -> &GridMesh {
        &self.mesh
    }

    pub fn material(&self) -> &Material {
        &self.material
    }

    pub fn dim(&self) -> usize {
        self.mesh.dim()
    }

    pub fn grid_shape(&self) -> &[usize] {
        self.mesh.node_counts()
    }

    /// Entries of a grid vector: nodes times components.
    pub fn grid_len(&self) -> usize {
        self.mesh.grid_node_count() * self.dim()
    }

    /// Scatters a DOF vector over active nodes into a grid vector.
    pub fn embed(&self, dofs: &[f64]) -> Result<Vec<f64>> {
        let dim = self.dim();
        if dofs.len() != self.mesh.dof_count() {
            return Err(CoreError::Invalid(format!(
                "expected {} DOF values, got {}",
                self.mesh.dof_count(),
                dofs.len()
            )));
        }
        let mut grid = vec![0.0; self.grid_len()];
        for (c, &node) in self.mesh.active_nodes().iter().enumerate() {
            grid[node * dim..(node + 1) * dim].copy_from_slice(&dofs[c * dim..(c + 1) * dim]);
        }
        Ok(grid)
    }

    /// Gathers the active-node DOFs of a grid vector.
    pub fn extract(&self, grid: &[f64]) -> Result<Vec<f64>> {
        let dim = self.dim();
        if grid.len() != self.grid_len() {
            return Err(CoreError::Invalid(format!(
                "expected a grid of {} values, got {}",
                self.grid_len(),
                grid.len()
            )));
        }
        Ok(self
            .mesh
            .active_nodes()
            .iter()
            .flat_map(|&n| grid[n * dim..(n + 1) * dim].iter().copied())
            .collect())
    }

    /// Grid-layout flags, true on DOFs of active nodes.
    pub fn active_mask(&self) -> Vec<bool> {
        let dim = self.dim();
        self.mesh
            .active_mask()
            .iter()
            .flat_map(|&a| std::iter::repeat_n(a, dim))
            .collect()
    }

    /// Grid-layout flags, true on unconstrained DOFs of active nodes.
    pub fn free_mask(&self) -> Vec<bool> {
        let mut mask = self.active_mask();
        let dim = self.dim();
        for &n in self.mesh.dirichlet_nodes() {
            mask[n * dim..(n + 1) * dim].iter_mut().for_each(|m| *m = false);
        }
        mask
    }

    /// Node whose response is tracked in force sweeps: the top free corner.
    pub fn monitored_node(&self) -> usize {
        let counts = self.mesh.node_counts();
        match (self.kind, self.geometry.arms) {
            (ProblemKind::Lshape2d, Some([_, rows])) => self.mesh.node_index(&[counts[0] - 1, rows - 1]),
            _ => {
                let idx: Vec<usize> = counts
                    .iter()
                    .enumerate()
                    .map(|(a, &n)| if a == 2 { 0 } else { n - 1 })
                    .collect();
                self.mesh.node_index(&idx)
            }
        }
    }

    /// Grid vector with force `vector` on `node`.
    pub fn point_load(&self, node: usize, vector: &[f64]) -> Result<Vec<f64>> {
        let dim = self.dim();
        if vector.len() != dim || node >= self.mesh.grid_node_count() {
            return Err(CoreError::Invalid(format!(
                "point load needs node < {} and {dim} components",
                self.mesh.grid_node_count()
            )));
        }
        if !self.mesh.active_mask()[node] {
            return Err(CoreError::Invalid(format!("node {node} is inactive")));
        }
        let mut f = vec![0.0; self.grid_len()];
        f[node * dim..(node + 1) * dim].copy_from_slice(vector);
        Ok(f)
    }

    /// Nonlinear FEM response to a grid force, as a grid displacement.
    pub fn solve_grid(&self, f_grid: &[f64]) -> Result<(Vec<f64>, FemSolution)> {
        let f = self.extract(f_grid)?;
        let sol = newton_solve(&self.mesh, &self.material, &f, &SolverOptions::default())?;
        Ok((self.embed(&sol.u)?, sol))
    }
}
