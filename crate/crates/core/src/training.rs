//! Loss functions and the minibatch Adam loop.

use nfem_autodiff::{adam_step, softplus, AdamConfig, BatchStats, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::dataset::SampleSet;
use crate::unet::{ModelMode, UNet};
use crate::{substream, CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight draws averaged per step in variational mode.
    pub mc_samples: usize,
    /// KL weight per batch; `None` uses `batch_size / N`.
    pub kl_scale: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    /// 600 epochs in 2D, 75 in 3D, batches of 4, learning rate 1e-4.
    pub fn for_dim(dim: usize) -> Self {
        Self {
            epochs: if dim == 3 { 75 } else { 600 },
            batch_size: 4,
            lr: 1e-4,
            mc_samples: 1,
            kl_scale: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(CoreError::Invalid("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(CoreError::Invalid(format!(
                "batch size {} is too small for batch normalization (need at least 2)",
                self.batch_size
            )));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(CoreError::Invalid(format!("invalid learning rate {}", self.lr)));
        }
        if self.mc_samples == 0 {
            return Err(CoreError::Invalid("mc_samples must be at least 1".into()));
        }
        if let Some(k) = self.kl_scale {
            if !(k >= 0.0) || !k.is_finite() {
                return Err(CoreError::Invalid(format!("invalid kl_scale {k}")));
            }
        }
        Ok(())
    }
}

/// Force and displacement tensors `[batch, grid.., dim]` with an optional
/// per-sample mask of the DOFs that enter the likelihood.
#[derive(Debug, Clone)]
pub struct Batch {
    pub f: Tensor,
    pub u: Tensor,
    pub mask: Option<Vec<bool>>,
}

impl Batch {
    pub fn from_samples(set: &SampleSet, indices: &[usize], mask: Option<&[bool]>) -> Result<Self> {
        if indices.is_empty() {
            return Err(CoreError::Invalid("empty batch".into()));
        }
        let n = set.grid_len();
        if let Some(m) = mask {
            if m.len() != n {
                return Err(CoreError::Invalid(format!(
                    "mask has {} entries, grid has {n}",
                    m.len()
                )));
            }
        }
        let mut shape = vec![indices.len()];
        shape.extend(&set.grid_shape);
        shape.push(set.dim);
        let mut f = Vec::with_capacity(indices.len() * n);
        let mut u = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            let s = set
                .samples
                .get(i)
                .ok_or_else(|| CoreError::Invalid(format!("sample {i} out of range")))?;
            f.extend(&s.f);
            u.extend(&s.u);
        }
        Ok(Self {
            f: Tensor::from_vec(&shape, f)?,
            u: Tensor::from_vec(&shape, u)?,
            mask: mask.map(<[bool]>::to_vec),
        })
    }

    pub fn len(&self) -> usize {
        self.f.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Batch normalization statistics source during a loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValue {
    pub total: f64,
    /// Scaled KL part (zero outside variational mode).
    pub kl: f64,
    pub nll: f64,
}

/// Loss terms and, if requested, gradients per model parameter.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: LossValue,
    pub grads: Vec<Vec<f64>>,
    pub bn_stats: Vec<(usize, BatchStats)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub kl_scale: f64,
    pub mc_samples: usize,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            kl_scale: 1.0,
            mc_samples: 1,
        }
    }
}

fn split_output(tape: &mut Tape, out: Var, dim: usize) -> Result<(Var, Var)> {
    Ok((tape.slice_channels(out, 0, dim)?, tape.slice_channels(out, dim, dim)?))
}

/// Evaluates the loss of the model's mode on `batch`. Variational draws
/// come from `rng`; with `rng = None` the posterior means are used.
pub fn evaluate(
    model: &UNet,
    batch: &Batch,
    objective: &Objective,
    phase: Phase,
    mut rng: Option<&mut ChaCha8Rng>,
    with_grad: bool,
) -> Result<Evaluation> {
    let dim = model.config().dim;
    let mode = model.mode();
    let draws = if mode == ModelMode::Vb { objective.mc_samples.max(1) } else { 1 };
    let mut grads: Vec<Vec<f64>> = if with_grad {
        model.params().iter().map(|p| vec![0.0; p.value.len()]).collect()
    } else {
        Vec::new()
    };
    let mut value = LossValue::default();
    let mut bn_stats = Vec::new();
    for draw in 0..draws {
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &batch.f, phase == Phase::Train, rng.as_deref_mut())?;
        let (loss, nll, kl) = match mode {
            ModelMode::Deterministic => {
                let l = tape.mse_loss(pass.output, &batch.u)?;
                (l, l, None)
            }
            ModelMode::Mle | ModelMode::Vb => {
                let (mu, rho) = split_output(&mut tape, pass.output, dim)?;
                let nll = tape.gaussian_nll(mu, rho, &batch.u, batch.mask.as_deref())?;
                match pass.kl {
                    Some(kl) => {
                        let kl = tape.scale(kl, objective.kl_scale)?;
                        (tape.add(kl, nll)?, nll, Some(kl))
                    }
                    None => (nll, nll, None),
                }
            }
        };
        let item = |tape: &Tape, v: Var| -> Result<f64> {
            Ok(tape.value(v)?.item().unwrap_or(f64::NAN) / draws as f64)
        };
        value.total += item(&tape, loss)?;
        value.nll += item(&tape, nll)?;
        let loss = tape.scale(loss, 1.0 / draws as f64)?;
        if let Some(kl) = kl {
            value.kl += item(&tape, kl)?;
        }
        if with_grad {
            tape.backward(loss)?;
            for (g, leaf) in grads.iter_mut().zip(&pass.leaves) {
                if let Some(leaf) = leaf {
                    if let Some(src) = tape.grad(*leaf)? {
                        g.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
        if draw == 0 {
            bn_stats = pass.bn_stats;
        }
    }
    Ok(Evaluation {
        value,
        grads,
        bn_stats,
    })
}

fn require(model: &UNet, mode: ModelMode) -> Result<()> {
    if model.mode() != mode {
        return Err(CoreError::Model(format!(
            "{mode} loss needs a {mode} model, this one is {}",
            model.mode()
        )));
    }
    Ok(())
}

/// Mean over the batch of `‖U(f) − u‖²`.
pub fn loss_det(model: &UNet, batch: &Batch, phase: Phase) -> Result<f64> {
    require(model, ModelMode::Deterministic)?;
    Ok(evaluate(model, batch, &Objective::default(), phase, None, false)?.value.total)
}

/// Gaussian negative log-likelihood summed over the batch and masked DOFs.
pub fn loss_mle(model: &UNet, batch: &Batch, phase: Phase) -> Result<f64> {
    require(model, ModelMode::Mle)?;
    Ok(evaluate(model, batch, &Objective::default(), phase, None, false)?.value.total)
}

/// Average over `objective.mc_samples` weight draws of
/// `kl_scale · KL + NLL`.
pub fn loss_vb(
    model: &UNet,
    batch: &Batch,
    objective: &Objective,
    phase: Phase,
    rng: &mut ChaCha8Rng,
) -> Result<LossValue> {
    require(model, ModelMode::Vb)?;
    Ok(evaluate(model, batch, objective, phase, Some(rng), false)?.value)
}

/// Closed-form `KL(q ‖ p)` between `N(μ, softplus(ρ)²)` and
/// `N(μ_p, σ_p²)`, summed over entries.
pub fn analytic_kl(mu: &[f64], rho: &[f64], mu_p: &[f64], sigma_p: f64) -> Result<f64> {
    if mu.len() != rho.len() || (mu_p.len() != 1 && mu_p.len() != mu.len()) {
        return Err(CoreError::Invalid("KL arguments differ in length".into()));
    }
    if !(sigma_p > 0.0) {
        return Err(CoreError::Invalid(format!("prior std must be positive, got {sigma_p}")));
    }
    Ok(mu
        .iter()
        .zip(rho)
        .enumerate()
        .map(|(i, (m, r))| {
            let s = softplus(*r);
            let mp = mu_p[if mu_p.len() == 1 { 0 } else { i }];
            (sigma_p / s).ln() + (s * s + (m - mp).powi(2)) / (2.0 * sigma_p * sigma_p) - 0.5
        })
        .sum())
}

/// Analytic KL summed over every variational layer of a model.
pub fn model_kl(model: &UNet) -> Result<f64> {
    let sigma_p = model.config().prior_sigma;
    model
        .variational_params()
        .iter()
        .map(|(mu, rho, mp)| analytic_kl(mu.value.data(), rho.value.data(), mp.value.data(), sigma_p))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub kl: f64,
    pub nll: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// `first / last` epoch loss, when both are positive.
    pub fn decrease_factor(&self) -> Option<f64> {
        let first = self.epochs.first()?.loss;
        let last = self.epochs.last()?.loss;
        (first > 0.0 && last > 0.0).then(|| first / last)
    }

    /// True when the loss fell by at least 10×.
    pub fn fit_ok(&self) -> bool {
        self.decrease_factor().is_some_and(|d| d >= 10.0)
    }
}

/// Splits a permutation into batches of `size`, folding a trailing
/// single-sample batch into its predecessor.
pub fn make_batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    if order.len() == 1 {
        return vec![vec![order[0], order[0]]];
    }
    let mut batches: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

/// Trains in place. `mask` selects the DOFs of each sample that enter the
/// likelihood of probabilistic modes.
pub fn train(
    model: &mut UNet,
    set: &SampleSet,
    mask: Option<&[bool]>,
    config: &TrainConfig,
) -> Result<History> {
    train_with(model, set, mask, config, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    model: &mut UNet,
    set: &SampleSet,
    mask: Option<&[bool]>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    config.validate()?;
    if set.is_empty() {
        return Err(CoreError::Invalid("training set is empty".into()));
    }
    if set.grid_shape != model.config().grid_shape || set.dim != model.config().dim {
        return Err(CoreError::Model(format!(
            "dataset grid {:?} does not match model grid {:?}",
            set.grid_shape,
            model.config().grid_shape
        )));
    }
    let objective = Objective {
        kl_scale: config
            .kl_scale
            .unwrap_or(config.batch_size as f64 / set.len() as f64),
        mc_samples: config.mc_samples,
    };
    let adam = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut shuffle_rng = substream(config.seed, 0);
    let mut noise_rng = substream(config.seed, 1);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut history = History::default();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let batches = make_batches(&order, config.batch_size);
        let mut sum = LossValue::default();
        for (b, idx) in batches.iter().enumerate() {
            let batch = Batch::from_samples(set, idx, mask)?;
            let rng = (model.mode() == ModelMode::Vb).then_some(&mut noise_rng);
            let diverged = |detail: String| CoreError::Diverged {
                epoch,
                batch: b,
                detail,
            };
            let eval = match evaluate(model, &batch, &objective, Phase::Train, rng, true) {
                Ok(e) => e,
                Err(CoreError::Autodiff(e)) => return Err(diverged(e.to_string())),
                Err(e) => return Err(e),
            };
            if !eval.value.total.is_finite() {
                return Err(diverged(format!(
                    "loss {} (kl {}, nll {})",
                    eval.value.total, eval.value.kl, eval.value.nll
                )));
            }
            for (p, g) in model.params_mut().iter_mut().zip(eval.grads) {
                p.grad = g;
            }
            step += 1;
            let mut params: Vec<_> = model.params_mut().iter_mut().collect();
            adam_step(&mut params, &adam, step).map_err(|e| diverged(e.to_string()))?;
            model.update_running_stats(&eval.bn_stats);
            sum.total += eval.value.total;
            sum.kl += eval.value.kl;
            sum.nll += eval.value.nll;
        }
        let n = batches.len() as f64;
        let record = EpochRecord {
            epoch,
            loss: sum.total / n,
            kl: sum.kl / n,
            nll: sum.nll / n,
        };
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok(history)
}
