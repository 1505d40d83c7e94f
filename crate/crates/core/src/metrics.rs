//! Error metrics, sensitivity regression and the ablation harness.

use std::time::Instant;

use crate::dataset::{apply_ordering, excited_node, split_dataset, OrderingMap, OrderingStrategy, SampleSet};
use crate::inference::{predict_batch, Prediction};
use crate::training::{train, History, TrainConfig};
use crate::unet::{UNet, UNetConfig};
use crate::{CoreError, Result};

fn check_lengths(pred: &[f64], reference: &[f64], active: Option<&[bool]>) -> Result<()> {
    if pred.len() != reference.len() || active.is_some_and(|a| a.len() != pred.len()) {
        return Err(CoreError::Invalid(format!(
            "prediction has {} values, reference {}{}",
            pred.len(),
            reference.len(),
            active.map(|a| format!(", mask {}", a.len())).unwrap_or_default()
        )));
    }
    Ok(())
}

/// Mean absolute error over the DOFs flagged in `active` (all DOFs when
/// `None`).
pub fn sample_error(pred: &[f64], reference: &[f64], active: Option<&[bool]>) -> Result<f64> {
    check_lengths(pred, reference, active)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (p, r)) in pred.iter().zip(reference).enumerate() {
        if active.is_none_or(|a| a[i]) {
            sum += (p - r).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(CoreError::Invalid("no active DOFs".into()));
    }
    Ok(sum / n as f64)
}

/// Per-sample errors with their mean and corrected standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub errors: Vec<f64>,
    pub e_bar: f64,
    pub sigma_e: f64,
    /// DOFs entering each sample error.
    pub dof_count: usize,
}

impl ErrorReport {
    pub fn count(&self) -> usize {
        self.errors.len()
    }
}

pub fn aggregate(errors: &[f64], dof_count: usize) -> Result<ErrorReport> {
    let m = errors.len();
    if m < 2 {
        return Err(CoreError::Invalid(format!(
            "standard deviation needs at least 2 errors, got {m}"
        )));
    }
    let e_bar = errors.iter().sum::<f64>() / m as f64;
    let ss: f64 = errors.iter().map(|e| (e - e_bar).powi(2)).sum();
    Ok(ErrorReport {
        errors: errors.to_vec(),
        e_bar,
        sigma_e: (ss / (m - 1) as f64).sqrt(),
        dof_count,
    })
}

/// `‖pred − ref‖₂ / ‖ref‖₂`.
pub fn relative_l2(pred: &[f64], reference: &[f64]) -> Result<f64> {
    check_lengths(pred, reference, None)?;
    let den: f64 = reference.iter().map(|r| r * r).sum::<f64>().sqrt();
    if den == 0.0 {
        return Err(CoreError::Invalid("relative error of a zero reference field".into()));
    }
    let num: f64 = pred
        .iter()
        .zip(reference)
        .map(|(p, r)| (p - r).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(num / den)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodalError {
    /// Euclidean error norm per node.
    pub field: Vec<f64>,
    pub relative_l2: f64,
}

pub fn nodal_error_field(pred: &[f64], reference: &[f64], dim: usize) -> Result<NodalError> {
    check_lengths(pred, reference, None)?;
    if dim == 0 || !pred.len().is_multiple_of(dim) {
        return Err(CoreError::Invalid(format!(
            "{} values do not split into {dim}-component nodes",
            pred.len()
        )));
    }
    let field = pred
        .chunks(dim)
        .zip(reference.chunks(dim))
        .map(|(p, r)| p.iter().zip(r).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .collect();
    Ok(NodalError {
        field,
        relative_l2: relative_l2(pred, reference)?,
    })
}

/// Slope of the through-origin least-squares line `y = a·x`.
pub fn sensitivity_slope(errors: &[f64], magnitudes: &[f64]) -> Result<f64> {
    if errors.len() != magnitudes.len() || errors.len() < 2 {
        return Err(CoreError::Invalid(
            "sensitivity fit needs at least 2 paired points".into(),
        ));
    }
    let sxx: f64 = magnitudes.iter().map(|x| x * x).sum();
    if sxx == 0.0 {
        return Err(CoreError::Invalid("all displacement magnitudes are zero".into()));
    }
    let sxy: f64 = magnitudes.iter().zip(errors).map(|(x, y)| x * y).sum();
    Ok(sxy / sxx)
}

/// Fraction of flagged DOFs whose error lies within two predicted standard
/// deviations.
pub fn coverage_fraction(mean: &[f64], std: &[f64], reference: &[f64], active: Option<&[bool]>) -> Result<f64> {
    check_lengths(mean, reference, active)?;
    check_lengths(std, reference, None)?;
    let mut hit = 0usize;
    let mut n = 0usize;
    for i in 0..mean.len() {
        if active.is_none_or(|a| a[i]) {
            n += 1;
            if (mean[i] - reference[i]).abs() <= 2.0 * std[i] {
                hit += 1;
            }
        }
    }
    if n == 0 {
        return Err(CoreError::Invalid("no active DOFs".into()));
    }
    Ok(hit as f64 / n as f64)
}

/// Euclidean norm of the displacement at the most loaded node.
pub fn excited_displacement(f: &[f64], u: &[f64], dim: usize) -> f64 {
    excited_node(f, dim)
        .map(|n| u[n * dim..(n + 1) * dim].iter().map(|v| v * v).sum::<f64>().sqrt())
        .unwrap_or(0.0)
}

/// Test-set evaluation of a trained model.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: ErrorReport,
    /// Relative ℓ2 error per sample, `None` for a zero reference.
    pub relative_l2: Vec<Option<f64>>,
    pub magnitudes: Vec<f64>,
    /// `None` when every reference displacement vanishes.
    pub slope: Option<f64>,
    /// Two-standard-deviation coverage over all test DOFs, probabilistic
    /// models only.
    pub coverage: Option<f64>,
    pub predictions: Vec<Prediction>,
}

impl Evaluation {
    pub fn mean_relative_l2(&self) -> Option<f64> {
        let v: Vec<f64> = self.relative_l2.iter().flatten().copied().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Predicts every test sample and compares with its FEM displacement over
/// the DOFs flagged in `active`.
pub fn evaluate_model(model: &UNet, test: &SampleSet, active: &[bool], passes: usize, seed: u64) -> Result<Evaluation> {
    let forces: Vec<Vec<f64>> = test.samples.iter().map(|s| s.f.clone()).collect();
    let predictions = predict_batch(model, &forces, passes, seed)?;
    let dof_count = active.iter().filter(|&&a| a).count();
    let mut errors = Vec::with_capacity(test.len());
    let mut rel = Vec::with_capacity(test.len());
    let mut magnitudes = Vec::with_capacity(test.len());
    let mut hits = 0.0;
    for (s, p) in test.samples.iter().zip(&predictions) {
        errors.push(sample_error(&p.mean, &s.u, Some(active))?);
        rel.push(relative_l2(&p.mean, &s.u).ok());
        magnitudes.push(excited_displacement(&s.f, &s.u, test.dim));
        if model.mode().is_probabilistic() {
            hits += coverage_fraction(&p.mean, &p.std, &s.u, Some(active))?;
        }
    }
    let coverage = model
        .mode()
        .is_probabilistic()
        .then(|| hits / test.len() as f64);
    Ok(Evaluation {
        report: aggregate(&errors, dof_count)?,
        relative_l2: rel,
        slope: sensitivity_slope(&errors, &magnitudes).ok(),
        magnitudes,
        coverage,
        predictions,
    })
}

#[derive(Debug, Clone)]
pub struct OrderingResult {
    pub strategy: OrderingStrategy,
    pub report: ErrorReport,
    pub history: History,
}

/// Trains one model per node ordering on the same split, weights seed and
/// batches, evaluating in each ordering's permuted frame.
#[allow(clippy::too_many_arguments)]
pub fn ablation_ordering(
    set: &SampleSet,
    active: &[bool],
    strategies: &[OrderingStrategy],
    model_config: &UNetConfig,
    model_seed: u64,
    train_config: &TrainConfig,
    test_fraction: f64,
    split_seed: u64,
) -> Result<Vec<OrderingResult>> {
    let mut out = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let map = OrderingMap::build(strategy, &set.grid_shape);
        let permuted = apply_ordering(set, &map)?;
        let mask = map.apply(active, set.dim)?;
        let (train_set, test_set) = split_dataset(&permuted, test_fraction, split_seed)?;
        let mut model = UNet::build(model_config.clone(), model_seed)?;
        let history = train(&mut model, &train_set, Some(&mask), train_config)?;
        let eval = evaluate_model(&model, &test_set, &mask, 2, split_seed)?;
        out.push(OrderingResult {
            strategy,
            report: eval.report,
            history,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ChannelResult {
    pub channels: usize,
    pub parameter_count: usize,
    pub report: ErrorReport,
    pub train_seconds: f64,
}

/// Trains the constant-channel variant for every entry of `channels`.
#[allow(clippy::too_many_arguments)]
pub fn ablation_channels(
    train_set: &SampleSet,
    test_set: &SampleSet,
    active: &[bool],
    channels: &[usize],
    model_config: &UNetConfig,
    model_seed: u64,
    train_config: &TrainConfig,
) -> Result<Vec<ChannelResult>> {
    let mut out = Vec::with_capacity(channels.len());
    for &c in channels {
        let mut cfg = model_config.clone();
        cfg.base_channels = c;
        cfg.constant_channels = true;
        let mut model = UNet::build(cfg, model_seed)?;
        let start = Instant::now();
        train(&mut model, train_set, Some(active), train_config)?;
        let train_seconds = start.elapsed().as_secs_f64();
        let eval = evaluate_model(&model, test_set, active, 2, model_seed)?;
        out.push(ChannelResult {
            channels: c,
            parameter_count: model.parameter_count(),
            report: eval.report,
            train_seconds,
        });
    }
    Ok(out)
}
