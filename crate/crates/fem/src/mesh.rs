//! Structured node grids.
//!
//! Nodes are numbered in x-major raster order: for a grid with node counts
//! `(nx, ny, nz)` the node at `(ix, iy, iz)` has index
//! `(ix * ny + iy) * nz + iz` (with `nz = 1` in 2D). This is the row-major
//! layout of an `nx × ny [× nz]` array, so nodal fields map directly onto
//! dense grids with the displacement components as a trailing channel axis.
//!
//! Some nodes of the bounding grid can be inactive (the void of an L-shape).
//! Degrees of freedom are numbered over active nodes only, in raster order,
//! `dim` components per node.

use std::collections::BTreeSet;

use crate::element::ElementKind;
use crate::{FemError, Result};

const INACTIVE: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct GridMesh {
    dim: usize,
    node_counts: Vec<usize>,
    spacing: Vec<f64>,
    active: Vec<bool>,
    dirichlet_nodes: Vec<usize>,
    load_nodes: Vec<usize>,
    /// Flat element connectivity in grid node indices.
    connectivity: Vec<usize>,
    compact: Vec<usize>,
    active_nodes: Vec<usize>,
}

impl GridMesh {
    /// Builds a grid from node counts and element edge lengths. Elements
    /// are created for every grid cell whose corners are all active.
    pub fn new(
        node_counts: &[usize],
        spacing: &[f64],
        active: Option<Vec<bool>>,
        dirichlet_nodes: impl IntoIterator<Item = usize>,
        load_nodes: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        let dim = node_counts.len();
        let kind = ElementKind::for_dim(dim)
            .ok_or_else(|| FemError::InvalidMesh(format!("dimension must be 2 or 3, got {dim}")))?;
        if spacing.len() != dim {
            return Err(FemError::InvalidMesh(format!(
                "expected {dim} spacings, got {}",
                spacing.len()
            )));
        }
        if node_counts.iter().any(|&n| n < 2) {
            return Err(FemError::InvalidMesh(
                "every axis needs at least 2 nodes".into(),
            ));
        }
        if spacing.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
            return Err(FemError::InvalidMesh("spacings must be positive".into()));
        }
        let total: usize = node_counts.iter().product();
        let active = active.unwrap_or_else(|| vec![true; total]);
        if active.len() != total {
            return Err(FemError::InvalidMesh(format!(
                "active mask has {} entries for {total} nodes",
                active.len()
            )));
        }

        let mut compact = vec![INACTIVE; total];
        let mut active_nodes = Vec::new();
        for (node, _) in active.iter().enumerate().filter(|(_, &a)| a) {
            compact[node] = active_nodes.len();
            active_nodes.push(node);
        }

        let check_set = |nodes: BTreeSet<usize>, what: &str| -> Result<Vec<usize>> {
            for &n in &nodes {
                if n >= total || !active[n] {
                    return Err(FemError::InvalidMesh(format!(
                        "{what} node {n} is not an active grid node"
                    )));
                }
            }
            Ok(nodes.into_iter().collect())
        };
        let dirichlet_nodes = check_set(dirichlet_nodes.into_iter().collect(), "dirichlet")?;
        let load_nodes = check_set(load_nodes.into_iter().collect(), "load")?;
        if let Some(n) = load_nodes.iter().find(|n| dirichlet_nodes.binary_search(n).is_ok()) {
            return Err(FemError::InvalidMesh(format!(
                "node {n} is both a dirichlet and a load node"
            )));
        }

        let mut mesh = Self {
            dim,
            node_counts: node_counts.to_vec(),
            spacing: spacing.to_vec(),
            active,
            dirichlet_nodes,
            load_nodes,
            connectivity: Vec::new(),
            compact,
            active_nodes,
        };

        let cell_counts: Vec<usize> = node_counts.iter().map(|n| n - 1).collect();
        let cells: usize = cell_counts.iter().product();
        for cell in 0..cells {
            let origin = unravel(cell, &cell_counts);
            let corners: Vec<usize> = kind
                .corners()
                .iter()
                .map(|c| {
                    let mut idx = [0usize; 3];
                    for a in 0..dim {
                        idx[a] = origin[a] + usize::from(c[a] > 0.0);
                    }
                    mesh.node_index(&idx[..dim])
                })
                .collect();
            if corners.iter().all(|&n| mesh.active[n]) {
                mesh.connectivity.extend(corners);
            }
        }
        Ok(mesh)
    }

    /// Cantilever beam clamped on the `x = 0` face. Loads are allowed on the
    /// top face (`y = max`) away from the clamp.
    pub fn beam(node_counts: &[usize], lengths: &[f64]) -> Result<Self> {
        let spacing = spacing_from_lengths(node_counts, lengths)?;
        let ny = node_counts[1];
        let (clamped, loaded) = partition_nodes(node_counts, |idx| {
            (idx[0] == 0, idx[1] == ny - 1 && idx[0] > 0)
        });
        Self::new(node_counts, &spacing, None, clamped, loaded)
    }

    /// L-shaped domain inside an `nx × ny` bounding grid: a horizontal arm
    /// of `arm_rows` node rows along the bottom and a vertical arm of
    /// `arm_cols` node columns on the left. The top of the vertical arm is
    /// clamped; loads act on the top edge of the horizontal arm, including
    /// the inner corner.
    pub fn lshape(
        nx: usize,
        ny: usize,
        arm_cols: usize,
        arm_rows: usize,
        spacing: [f64; 2],
    ) -> Result<Self> {
        if arm_cols == 0 || arm_cols >= nx || arm_rows == 0 || arm_rows >= ny {
            return Err(FemError::InvalidMesh(format!(
                "arm sizes ({arm_cols}, {arm_rows}) must be inside the {nx}x{ny} grid"
            )));
        }
        let counts = [nx, ny];
        let active: Vec<bool> = (0..nx * ny)
            .map(|n| {
                let idx = unravel(n, &counts);
                idx[1] < arm_rows || idx[0] < arm_cols
            })
            .collect();
        let (clamped, loaded) = partition_nodes(&counts, |idx| {
            (
                idx[1] == ny - 1 && idx[0] < arm_cols,
                idx[1] == arm_rows - 1 && idx[0] + 1 >= arm_cols,
            )
        });
        Self::new(&counts, &spacing, Some(active), clamped, loaded)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn element_kind(&self) -> ElementKind {
        ElementKind::for_dim(self.dim).expect("validated at construction")
    }

    pub fn node_counts(&self) -> &[usize] {
        &self.node_counts
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    /// Number of grid nodes including inactive ones.
    pub fn grid_node_count(&self) -> usize {
        self.active.len()
    }

    pub fn active_mask(&self) -> &[bool] {
        &self.active
    }

    /// Active grid nodes in raster order; position in this list is the
    /// node's compact index.
    pub fn active_nodes(&self) -> &[usize] {
        &self.active_nodes
    }

    pub fn active_node_count(&self) -> usize {
        self.active_nodes.len()
    }

    pub fn dof_count(&self) -> usize {
        self.dim * self.active_nodes.len()
    }

    pub fn dirichlet_nodes(&self) -> &[usize] {
        &self.dirichlet_nodes
    }

    pub fn load_nodes(&self) -> &[usize] {
        &self.load_nodes
    }

    pub fn element_count(&self) -> usize {
        self.connectivity.len() / self.element_kind().node_count()
    }

    /// Corner nodes (grid indices) of element `e`.
    pub fn element_nodes(&self, e: usize) -> &[usize] {
        let n = self.element_kind().node_count();
        &self.connectivity[e * n..(e + 1) * n]
    }

    pub fn node_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.node_counts)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn node_position(&self, node: usize) -> Vec<usize> {
        unravel(node, &self.node_counts)
    }

    /// Reference coordinates of a grid node, meters.
    pub fn node_coords(&self, node: usize) -> [f64; 3] {
        let mut x = [0.0; 3];
        for (a, i) in self.node_position(node).into_iter().enumerate() {
            x[a] = i as f64 * self.spacing[a];
        }
        x
    }

    /// Compact (active) index of a grid node.
    pub fn compact_index(&self, node: usize) -> Option<usize> {
        self.compact
            .get(node)
            .copied()
            .filter(|&c| c != INACTIVE)
    }

    /// Global DOF numbers of the element's nodes, node-major.
    pub fn element_dofs(&self, e: usize) -> Result<Vec<usize>> {
        let mut dofs = Vec::with_capacity(self.element_kind().node_count() * self.dim);
        for &node in self.element_nodes(e) {
            let c = self.compact_index(node).ok_or_else(|| {
                FemError::IndexOutOfRange(format!("element {e} references inactive node {node}"))
            })?;
            dofs.extend((0..self.dim).map(|i| c * self.dim + i));
        }
        Ok(dofs)
    }

    /// Global DOFs constrained to zero displacement.
    pub fn dirichlet_dofs(&self) -> Vec<usize> {
        self.dirichlet_nodes
            .iter()
            .filter_map(|&n| self.compact_index(n))
            .flat_map(|c| (0..self.dim).map(move |i| c * self.dim + i))
            .collect()
    }

    /// Per-DOF flag, false on Dirichlet DOFs.
    pub fn free_dof_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.dof_count()];
        for d in self.dirichlet_dofs() {
            mask[d] = false;
        }
        mask
    }

    /// Largest distance between two DOFs coupled by an element.
    pub fn dof_bandwidth(&self) -> usize {
        (0..self.element_count())
            .filter_map(|e| self.element_dofs(e).ok())
            .map(|d| d.iter().max().unwrap() - d.iter().min().unwrap())
            .max()
            .unwrap_or(0)
    }
}

fn spacing_from_lengths(node_counts: &[usize], lengths: &[f64]) -> Result<Vec<f64>> {
    if node_counts.len() != lengths.len() {
        return Err(FemError::InvalidMesh(format!(
            "{} node counts but {} lengths",
            node_counts.len(),
            lengths.len()
        )));
    }
    if node_counts.iter().any(|&n| n < 2) {
        return Err(FemError::InvalidMesh(
            "every axis needs at least 2 nodes".into(),
        ));
    }
    Ok(node_counts
        .iter()
        .zip(lengths)
        .map(|(&n, &l)| l / (n - 1) as f64)
        .collect())
}

fn partition_nodes(
    node_counts: &[usize],
    classify: impl Fn(&[usize]) -> (bool, bool),
) -> (Vec<usize>, Vec<usize>) {
    let total: usize = node_counts.iter().product();
    let mut clamped = Vec::new();
    let mut loaded = Vec::new();
    for n in 0..total {
        let (c, l) = classify(&unravel(n, node_counts));
        if c {
            clamped.push(n);
        } else if l {
            loaded.push(n);
        }
    }
    (clamped, loaded)
}

pub(crate) fn unravel(mut index: usize, counts: &[usize]) -> Vec<usize> {
    let mut out = vec![0; counts.len()];
    for (o, &n) in out.iter_mut().zip(counts).rev() {
        *o = index % n;
        index /= n;
    }
    out
}
