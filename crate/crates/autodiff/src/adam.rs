use crate::{AdError, Result, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named trainable array with its Adam moments and gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub grad: Vec<f64>,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, trainable: bool) -> Self {
        let n = value.len();
        Self {
            name: name.into(),
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
            grad: vec![0.0; n],
            trainable,
        }
    }

    /// Records the current value as a leaf.
    pub fn record(&self, tape: &mut Tape) -> Result<Var> {
        tape.leaf(self.value.clone(), self.trainable)
    }

    /// Adds the tape gradient of `var` into the gradient buffer.
    pub fn pull_grad(&mut self, tape: &Tape, var: Var) -> Result<()> {
        if let Some(g) = tape.grad(var)? {
            self.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Bias-corrected Adam update at step `t ≥ 1` using each parameter's
/// gradient buffer. Nothing is modified if any gradient is non-finite.
pub fn adam_step(params: &mut [&mut Parameter], cfg: &AdamConfig, t: u64) -> Result<()> {
    if t == 0 {
        return Err(AdError::Invalid("adam step counter starts at 1".into()));
    }
    if let Some(p) = params
        .iter()
        .find(|p| p.trainable && p.grad.iter().any(|g| !g.is_finite()))
    {
        return Err(AdError::NonFiniteGradient(p.name.clone()));
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for p in params.iter_mut().filter(|p| p.trainable) {
        let Parameter {
            value, m, v, grad, ..
        } = &mut **p;
        for (((w, m), v), g) in value.data_mut().iter_mut().zip(m).zip(v).zip(grad.iter()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
