//! Point predictions, Monte Carlo predictive distributions, force sweeps
//! and the linear baseline.

use nfem_autodiff::{softplus, Tensor};
use nfem_fem::LinearBaseline;
use rayon::prelude::*;

use crate::problem::Problem;
use crate::unet::{ModelMode, UNet};
use crate::{substream, CoreError, Result};

/// Passes used for Monte Carlo prediction unless configured otherwise.
pub const DEFAULT_PASSES: usize = 300;

/// Predictive mean and spread over one force grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: Vec<f64>,
    /// Total standard deviation, `sqrt(epistemic² + aleatoric²)`.
    pub std: Vec<f64>,
    /// Sample standard deviation of the per-pass means.
    pub epistemic_std: Vec<f64>,
    /// Mean predicted `softplus(ρ)`.
    pub aleatoric_std: Vec<f64>,
    pub passes: usize,
}

impl Prediction {
    fn point(mean: Vec<f64>) -> Self {
        let zeros = vec![0.0; mean.len()];
        Self {
            std: zeros.clone(),
            epistemic_std: zeros.clone(),
            aleatoric_std: zeros,
            mean,
            passes: 1,
        }
    }
}

/// Inputs per forward call, sized so activations stay in the low hundreds
/// of megabytes.
fn chunk_size(model: &UNet) -> usize {
    let cfg = model.config();
    let cells: usize = cfg.padded_shape().iter().product();
    let width = cfg.level_channels(0).max(cfg.base_channels);
    ((1usize << 21) / (cells * width).max(1)).max(1)
}

fn stack(model: &UNet, forces: &[Vec<f64>]) -> Result<Tensor> {
    let cfg = model.config();
    let n: usize = cfg.grid_shape.iter().product::<usize>() * cfg.dim;
    let mut shape = vec![forces.len()];
    shape.extend(&cfg.grid_shape);
    shape.push(cfg.dim);
    let mut data = Vec::with_capacity(forces.len() * n);
    for f in forces {
        if f.len() != n {
            return Err(CoreError::Model(format!(
                "force grid has {} values, model expects {n}",
                f.len()
            )));
        }
        data.extend(f);
    }
    Ok(Tensor::from_vec(&shape, data)?)
}

/// Deterministic predictions for several force grids.
pub fn predict_det_batch(model: &UNet, forces: &[Vec<f64>]) -> Result<Vec<Prediction>> {
    if model.mode() != ModelMode::Deterministic {
        return Err(CoreError::Model(format!(
            "predict_det needs a deterministic model, this one is {}",
            model.mode()
        )));
    }
    let mut out = Vec::with_capacity(forces.len());
    for chunk in forces.chunks(chunk_size(model)) {
        let y = model.forward_det(&stack(model, chunk)?)?;
        let per = y.len() / chunk.len();
        out.extend(y.data().chunks(per).map(|c| Prediction::point(c.to_vec())));
    }
    Ok(out)
}

pub fn predict_det(model: &UNet, f: &[f64]) -> Result<Prediction> {
    Ok(predict_det_batch(model, &[f.to_vec()])?.remove(0))
}

/// `(μ, softplus(ρ))` for every input of one pass, with weight noise drawn
/// from `substream(seed, pass)` when `pass` is given.
fn prob_pass(model: &UNet, forces: &[Vec<f64>], seed: u64, pass: Option<usize>) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut rng = pass.map(|p| substream(seed, p as u64));
    let mut out = Vec::with_capacity(forces.len());
    for chunk in forces.chunks(chunk_size(model)) {
        let (mu, rho) = model.forward_prob(&stack(model, chunk)?, rng.as_mut())?;
        let per = mu.len() / chunk.len();
        for (m, r) in mu.data().chunks(per).zip(rho.data().chunks(per)) {
            out.push((m.to_vec(), r.iter().map(|&v| softplus(v)).collect()));
        }
    }
    Ok(out)
}

/// Monte Carlo predictive distribution for several force grids. All inputs
/// of pass `t` share one weight draw from `substream(seed, t)`, so results
/// do not depend on batching or thread count. MLE models need one pass.
pub fn predict_mc_batch(model: &UNet, forces: &[Vec<f64>], passes: usize, seed: u64) -> Result<Vec<Prediction>> {
    match model.mode() {
        ModelMode::Deterministic => Err(CoreError::Model(
            "Monte Carlo prediction needs an mle or vb model".into(),
        )),
        _ if passes < 2 => Err(CoreError::Invalid(format!(
            "Monte Carlo prediction needs at least 2 passes, got {passes}"
        ))),
        ModelMode::Mle => Ok(prob_pass(model, forces, seed, None)?
            .into_iter()
            .map(|(mean, sigma)| Prediction {
                std: sigma.clone(),
                epistemic_std: vec![0.0; mean.len()],
                aleatoric_std: sigma,
                mean,
                passes: 1,
            })
            .collect()),
        ModelMode::Vb => {
            let draws: Vec<Vec<(Vec<f64>, Vec<f64>)>> = (0..passes)
                .into_par_iter()
                .map(|t| prob_pass(model, forces, seed, Some(t)))
                .collect::<Result<_>>()?;
            let t = passes as f64;
            Ok((0..forces.len())
                .map(|i| {
                    let n = draws[0][i].0.len();
                    let mut mean = vec![0.0; n];
                    let mut ale = vec![0.0; n];
                    for d in &draws {
                        for k in 0..n {
                            mean[k] += d[i].0[k] / t;
                            ale[k] += d[i].1[k] / t;
                        }
                    }
                    let mut var = vec![0.0; n];
                    for d in &draws {
                        for k in 0..n {
                            var[k] += (d[i].0[k] - mean[k]).powi(2) / (t - 1.0);
                        }
                    }
                    let epistemic_std: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
                    let std = var.iter().zip(&ale).map(|(v, a)| (v + a * a).sqrt()).collect();
                    Prediction {
                        mean,
                        std,
                        epistemic_std,
                        aleatoric_std: ale,
                        passes,
                    }
                })
                .collect())
        }
    }
}

pub fn predict_mc(model: &UNet, f: &[f64], passes: usize, seed: u64) -> Result<Prediction> {
    Ok(predict_mc_batch(model, &[f.to_vec()], passes, seed)?.remove(0))
}

/// Any model's prediction: deterministic models give a point estimate,
/// probabilistic ones a Monte Carlo distribution.
pub fn predict_batch(model: &UNet, forces: &[Vec<f64>], passes: usize, seed: u64) -> Result<Vec<Prediction>> {
    match model.mode() {
        ModelMode::Deterministic => predict_det_batch(model, forces),
        _ => predict_mc_batch(model, forces, passes, seed),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub force: f64,
    pub mean: f64,
    pub std_total: f64,
    pub std_epistemic: f64,
    pub std_aleatoric: f64,
    /// FEM displacement, `None` when the solver failed at this load.
    pub fem_reference: Option<f64>,
}

/// Point loads `F · direction` on `node` for each magnitude, tracking the
/// displacement component along the dominant axis of `direction`.
pub fn force_sweep(
    model: &UNet,
    problem: &Problem,
    node: usize,
    direction: &[f64],
    magnitudes: &[f64],
    passes: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let dim = problem.dim();
    let norm = direction.iter().map(|d| d * d).sum::<f64>().sqrt();
    if direction.len() != dim || !(norm > 0.0) {
        return Err(CoreError::Invalid(format!(
            "sweep direction needs {dim} components and a nonzero norm"
        )));
    }
    let axis = (0..dim)
        .max_by(|&a, &b| direction[a].abs().total_cmp(&direction[b].abs()))
        .unwrap();
    let forces = magnitudes
        .iter()
        .map(|&m| {
            let v: Vec<f64> = direction.iter().map(|d| m * d / norm).collect();
            problem.point_load(node, &v)
        })
        .collect::<Result<Vec<_>>>()?;
    let preds = predict_batch(model, &forces, passes, seed)?;
    let dof = node * dim + axis;
    let refs: Vec<Option<f64>> = forces
        .par_iter()
        .map(|f| problem.solve_grid(f).ok().map(|(u, _)| u[dof]))
        .collect();
    Ok(magnitudes
        .iter()
        .zip(preds)
        .zip(refs)
        .map(|((&force, p), fem_reference)| SweepRow {
            force,
            mean: p.mean[dof],
            std_total: p.std[dof],
            std_epistemic: p.epistemic_std[dof],
            std_aleatoric: p.aleatoric_std[dof],
            fem_reference,
        })
        .collect())
}

/// `u = K₀⁻¹ f` on grid vectors.
#[derive(Debug, Clone)]
pub struct LinearPredictor {
    problem: Problem,
    baseline: LinearBaseline,
}

impl LinearPredictor {
    pub fn new(problem: &Problem) -> Result<Self> {
        Ok(Self {
            baseline: LinearBaseline::new(problem.mesh(), problem.material())?,
            problem: problem.clone(),
        })
    }

    pub fn predict(&self, f_grid: &[f64]) -> Result<Vec<f64>> {
        let f = self.problem.extract(f_grid)?;
        self.problem.embed(&self.baseline.apply(&f)?)
    }
}
