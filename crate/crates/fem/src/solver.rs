//! Newton-Raphson with adaptive load stepping.

use crate::assembly::assemble_system;
use crate::material::Material;
use crate::mesh::GridMesh;
use crate::{FemError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    /// Residual max-norm tolerance relative to `max(1, ‖f_ext‖∞)`.
    pub tolerance: f64,
    /// Newton iterations allowed per load step.
    pub max_iterations: usize,
    /// Smallest load increment as a fraction of the total load.
    pub min_increment: f64,
    /// Apply the load in this many equal steps with no adaptive growth.
    pub fixed_steps: Option<usize>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 20,
            min_increment: 1.0 / 64.0,
            fixed_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FemSolution {
    pub u: Vec<f64>,
    pub f_ext: Vec<f64>,
    pub converged: bool,
    /// Residual evaluations over all accepted and rejected steps.
    pub newton_iterations: usize,
    /// Accepted load steps.
    pub load_steps: usize,
    /// Residual max-norms of the final load step, one per iteration.
    pub residual_history: Vec<f64>,
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

enum StepOutcome {
    Converged { u: Vec<f64>, history: Vec<f64> },
    Failed(FemError),
}

fn newton_step(
    mesh: &GridMesh,
    mat: &Material,
    f: &[f64],
    start: &[f64],
    tol: f64,
    max_iterations: usize,
    iterations: &mut usize,
) -> StepOutcome {
    let mut u = start.to_vec();
    let mut history = Vec::new();
    for _ in 0..=max_iterations {
        *iterations += 1;
        let (r, k) = match assemble_system(mesh, &u, mat, f) {
            Ok(sys) => sys,
            Err(e) => return StepOutcome::Failed(e),
        };
        let norm = max_norm(&r);
        history.push(norm);
        if !norm.is_finite() {
            return StepOutcome::Failed(FemError::NonConverged("non-finite residual".into()));
        }
        if norm <= tol {
            return StepOutcome::Converged { u, history };
        }
        if history.len() > max_iterations {
            break;
        }
        let lu = match k.factor() {
            Ok(lu) => lu,
            Err(e) => return StepOutcome::Failed(e),
        };
        let du = lu.solve(&r);
        for (x, d) in u.iter_mut().zip(du) {
            *x -= d;
        }
    }
    StepOutcome::Failed(FemError::NonConverged(format!(
        "no convergence in {max_iterations} iterations"
    )))
}

/// Solves `f_int(u) = f_ext` starting from the undeformed state.
///
/// The load is first applied in one step. A failed step (iteration cap,
/// inverted element, singular tangent) halves the increment down to
/// `min_increment`; two consecutive successes double it again.
pub fn newton_solve(
    mesh: &GridMesh,
    mat: &Material,
    f_ext: &[f64],
    opts: &SolverOptions,
) -> Result<FemSolution> {
    let n = mesh.dof_count();
    if f_ext.len() != n {
        return Err(FemError::InvalidLoad(format!(
            "load vector has {} entries, mesh has {n} DOFs",
            f_ext.len()
        )));
    }
    if mesh.dirichlet_nodes().is_empty() {
        return Err(FemError::InvalidMesh(
            "no dirichlet nodes: rigid-body modes are unconstrained".into(),
        ));
    }
    if let Some(d) = mesh.dirichlet_dofs().into_iter().find(|&d| f_ext[d] != 0.0) {
        return Err(FemError::InvalidLoad(format!(
            "nonzero load on constrained DOF {d}"
        )));
    }
    if f_ext.iter().any(|f| !f.is_finite()) {
        return Err(FemError::InvalidLoad("non-finite load".into()));
    }
    let tol = opts.tolerance * max_norm(f_ext).max(1.0);

    let (mut increment, adaptive) = match opts.fixed_steps {
        Some(s) if s >= 1 => (1.0 / s as f64, false),
        Some(_) => return Err(FemError::InvalidLoad("fixed_steps must be >= 1".into())),
        None => (1.0, true),
    };
    let mut u = vec![0.0; n];
    let mut applied = 0.0f64;
    let mut iterations = 0;
    let mut steps = 0;
    let mut streak = 0;
    let mut history = Vec::new();
    let mut scaled = vec![0.0; n];
    while applied < 1.0 {
        let target = (applied + increment).min(1.0);
        // Snap to the full load to avoid round-off leaving a sliver.
        let target = if 1.0 - target < 1e-12 { 1.0 } else { target };
        for (s, f) in scaled.iter_mut().zip(f_ext) {
            *s = target * f;
        }
        match newton_step(
            mesh,
            mat,
            &scaled,
            &u,
            tol,
            opts.max_iterations,
            &mut iterations,
        ) {
            StepOutcome::Converged { u: next, history: h } => {
                u = next;
                history = h;
                applied = target;
                steps += 1;
                streak += 1;
                if adaptive && streak >= 2 {
                    increment = (2.0 * increment).min(1.0);
                    streak = 0;
                }
            }
            StepOutcome::Failed(err) => {
                streak = 0;
                if increment / 2.0 < opts.min_increment * (1.0 - 1e-12) {
                    return Err(match err {
                        FemError::SingularTangent(c) if steps == 0 => FemError::SingularTangent(c),
                        other => FemError::NonConverged(format!(
                            "load increment floor reached at {:.4} of total load ({other})",
                            applied
                        )),
                    });
                }
                increment /= 2.0;
            }
        }
    }
    Ok(FemSolution {
        u,
        f_ext: f_ext.to_vec(),
        converged: true,
        newton_iterations: iterations,
        load_steps: steps,
        residual_history: history,
    })
}
