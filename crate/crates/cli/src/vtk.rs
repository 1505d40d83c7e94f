//! Legacy ASCII VTK export of nodal fields on the active mesh.

use std::fmt::Write as _;

use nfem_core::problem::Problem;
use nfem_fem::ElementKind;

pub enum Field<'a> {
    /// `dim` components per grid node; padded to three in the file.
    Vector(&'a [f64]),
    /// One value per grid node.
    Scalar(&'a [f64]),
}

/// Unstructured grid of the active nodes with point data. Field arrays are
/// in grid layout; inactive nodes are skipped.
pub fn render(problem: &Problem, title: &str, fields: &[(&str, Field<'_>)]) -> String {
    let mesh = problem.mesh();
    let dim = problem.dim();
    let nodes = mesh.active_nodes();
    let mut out = String::new();
    let _ = writeln!(out, "# vtk DataFile Version 3.0");
    let _ = writeln!(out, "{}", title.replace('\n', " "));
    let _ = writeln!(out, "ASCII");
    let _ = writeln!(out, "DATASET UNSTRUCTURED_GRID");
    let _ = writeln!(out, "POINTS {} double", nodes.len());
    for &n in nodes {
        let x = mesh.node_coords(n);
        let _ = writeln!(out, "{} {} {}", x[0], x[1], x[2]);
    }
    let (per, cell_type) = match mesh.element_kind() {
        ElementKind::Quad4 => (4, 9),
        ElementKind::Hex8 => (8, 12),
    };
    let cells = mesh.element_count();
    let _ = writeln!(out, "CELLS {cells} {}", cells * (per + 1));
    for e in 0..cells {
        let ids: Vec<String> = mesh
            .element_nodes(e)
            .iter()
            .map(|&n| mesh.compact_index(n).expect("element node is active").to_string())
            .collect();
        let _ = writeln!(out, "{per} {}", ids.join(" "));
    }
    let _ = writeln!(out, "CELL_TYPES {cells}");
    for _ in 0..cells {
        let _ = writeln!(out, "{cell_type}");
    }
    let _ = writeln!(out, "POINT_DATA {}", nodes.len());
    for (name, field) in fields {
        let name = name.replace(char::is_whitespace, "_");
        match field {
            Field::Vector(v) => {
                let _ = writeln!(out, "VECTORS {name} double");
                for &n in nodes {
                    let mut c = [0.0; 3];
                    c[..dim].copy_from_slice(&v[n * dim..(n + 1) * dim]);
                    let _ = writeln!(out, "{} {} {}", c[0], c[1], c[2]);
                }
            }
            Field::Scalar(v) => {
                let _ = writeln!(out, "SCALARS {name} double 1");
                let _ = writeln!(out, "LOOKUP_TABLE default");
                for &n in nodes {
                    let _ = writeln!(out, "{}", v[n]);
                }
            }
        }
    }
    out
}
