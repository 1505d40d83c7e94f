//! Encoder-decoder U-Net over node grids.
//!
//! Layout: zero padding → per level two `conv3x3 + batchnorm + relu`
//! blocks followed by 2× max pooling (except at the deepest level) →
//! decoder levels that upsample, concatenate the matching encoder output
//! and apply two more blocks → `conv1x1` head → crop back to the node grid.
//! In variational Bayes mode the last convolution of every level, encoder
//! and decoder alike, carries a factorized Gaussian over its kernel.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nfem_autodiff::{softplus_inverse, BatchStats, Parameter, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{CoreError, Result};

const MAGIC: &[u8] = b"NFEMW1\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelMode {
    Deterministic,
    Mle,
    Vb,
}

impl ModelMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Deterministic => "deterministic",
            Self::Mle => "mle",
            Self::Vb => "vb",
        }
    }

    /// True for the modes that predict a mean and a spread per DOF.
    pub fn is_probabilistic(self) -> bool {
        self != Self::Deterministic
    }
}

impl fmt::Display for ModelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" | "det" => Ok(Self::Deterministic),
            "mle" => Ok(Self::Mle),
            "vb" => Ok(Self::Vb),
            _ => Err(CoreError::Invalid(format!(
                "unknown model mode '{s}' (expected deterministic, mle or vb)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub dim: usize,
    pub grid_shape: Vec<usize>,
    pub levels: usize,
    pub base_channels: usize,
    pub convs_per_level: usize,
    pub mode: ModelMode,
    /// Zero cells added on each side of every spatial axis.
    pub input_pad: usize,
    /// Use `base_channels` at every level instead of doubling per level.
    pub constant_channels: bool,
    /// Fixed standard deviation of the weight prior.
    pub prior_sigma: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl UNetConfig {
    /// Defaults for a node grid: 3 levels in 2D, 4 in 3D, 32 base channels.
    pub fn new(grid_shape: &[usize], mode: ModelMode) -> Self {
        let dim = grid_shape.len();
        Self {
            dim,
            grid_shape: grid_shape.to_vec(),
            levels: if dim == 3 { 4 } else { 3 },
            base_channels: 32,
            convs_per_level: 2,
            mode,
            input_pad: 2,
            constant_channels: false,
            prior_sigma: 0.1,
            bn_momentum: 0.99,
            bn_eps: 1e-3,
        }
    }

    pub fn padded_shape(&self) -> Vec<usize> {
        self.grid_shape.iter().map(|e| e + 2 * self.input_pad).collect()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        if self.constant_channels {
            self.base_channels
        } else {
            self.base_channels << level
        }
    }

    pub fn out_channels(&self) -> usize {
        if self.mode.is_probabilistic() {
            2 * self.dim
        } else {
            self.dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Model(m));
        if !(2..=3).contains(&self.dim) || self.grid_shape.len() != self.dim {
            return bad(format!(
                "grid {:?} does not match dim {}",
                self.grid_shape, self.dim
            ));
        }
        if self.levels == 0 || self.base_channels == 0 || self.convs_per_level == 0 {
            return bad("levels, channels and convolutions per level must be positive".into());
        }
        if self.levels > 12 || self.base_channels.checked_shl(self.levels as u32).is_none() {
            return bad(format!("{} levels is too deep", self.levels));
        }
        if !(self.prior_sigma > 0.0) || !self.prior_sigma.is_finite() {
            return bad(format!("prior sigma must be positive, got {}", self.prior_sigma));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return bad("batchnorm momentum must lie in [0, 1) and eps be positive".into());
        }
        let div = 1usize << (self.levels - 1);
        let padded = self.padded_shape();
        if let Some(axis) = padded.iter().position(|e| e % div != 0) {
            let hint = (self.input_pad..self.input_pad + div)
                .find(|p| self.grid_shape.iter().all(|e| (e + 2 * p) % div == 0))
                .map(|p| format!("input_pad = {p} works"))
                .unwrap_or_else(|| "no symmetric padding works; reduce levels".into());
            return bad(format!(
                "padded extent {} on axis {axis} is not divisible by {div} for {} levels; {hint}",
                padded[axis], self.levels
            ));
        }
        Ok(())
    }

    /// `(c_in, c_out)` of every 3×3 convolution in forward order, with a
    /// flag marking variational layers.
    fn conv_plan(&self) -> Vec<(String, usize, usize, bool)> {
        let vb = self.mode == ModelMode::Vb;
        let last = self.convs_per_level - 1;
        let mut plan = Vec::new();
        for l in 0..self.levels {
            let ch = self.level_channels(l);
            for j in 0..self.convs_per_level {
                let cin = match (l, j) {
                    (0, 0) => self.dim,
                    (_, 0) => self.level_channels(l - 1),
                    _ => ch,
                };
                plan.push((format!("enc{l}.conv{j}"), cin, ch, vb && j == last));
            }
        }
        for l in (0..self.levels - 1).rev() {
            let ch = self.level_channels(l);
            for j in 0..self.convs_per_level {
                let cin = if j == 0 { self.level_channels(l + 1) + ch } else { ch };
                plan.push((format!("dec{l}.conv{j}"), cin, ch, vb && j == last));
            }
        }
        plan
    }

    /// Trainable scalars, computed without allocating the model.
    pub fn parameter_count(&self) -> usize {
        let taps = 3usize.pow(self.dim as u32);
        let convs: usize = self
            .conv_plan()
            .iter()
            .map(|(_, cin, cout, var)| {
                let k = taps * cin * cout;
                let weights = if *var { 2 * k + 1 } else { k };
                weights + cout + 2 * cout
            })
            .sum();
        convs + self.level_channels(0) * self.out_channels() + self.out_channels()
    }

    fn echo(&self) -> String {
        let shape: Vec<String> = self.grid_shape.iter().map(|e| e.to_string()).collect();
        format!(
            "dim={}\ngrid_shape={}\nlevels={}\nbase_channels={}\nconvs_per_level={}\nmode={}\n\
             input_pad={}\nconstant_channels={}\nprior_sigma={}\nbn_momentum={}\nbn_eps={}\n",
            self.dim,
            shape.join(","),
            self.levels,
            self.base_channels,
            self.convs_per_level,
            self.mode,
            self.input_pad,
            self.constant_channels,
            self.prior_sigma,
            self.bn_momentum,
            self.bn_eps
        )
    }

    fn parse_echo(text: &str) -> Result<Self> {
        let bad = |m: String| CoreError::Checkpoint(m);
        let mut get = std::collections::BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed config line '{line}'")))?;
            get.insert(k.to_string(), v.to_string());
        }
        fn field<T: FromStr>(
            map: &std::collections::BTreeMap<String, String>,
            key: &str,
        ) -> Result<T> {
            map.get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| CoreError::Checkpoint(format!("missing or invalid '{key}'")))
        }
        let shape = get
            .get("grid_shape")
            .ok_or_else(|| bad("missing 'grid_shape'".into()))?
            .split(',')
            .map(|s| s.parse::<usize>().map_err(|_| bad("invalid 'grid_shape'".into())))
            .collect::<Result<Vec<_>>>()?;
        let mode: String = field(&get, "mode")?;
        Ok(Self {
            dim: field(&get, "dim")?,
            grid_shape: shape,
            levels: field(&get, "levels")?,
            base_channels: field(&get, "base_channels")?,
            convs_per_level: field(&get, "convs_per_level")?,
            mode: mode.parse()?,
            input_pad: field(&get, "input_pad")?,
            constant_channels: field(&get, "constant_channels")?,
            prior_sigma: field(&get, "prior_sigma")?,
            bn_momentum: field(&get, "bn_momentum")?,
            bn_eps: field(&get, "bn_eps")?,
        })
    }
}

#[derive(Debug, Clone)]
enum Weights {
    Det { kernel: usize },
    Var { mu: usize, rho: usize, prior_mu: usize },
}

#[derive(Debug, Clone)]
struct ConvLayer {
    weights: Weights,
    bias: usize,
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

/// Result of one recorded forward pass.
pub struct ForwardPass {
    /// `[batch, grid.., out_channels]`.
    pub output: Var,
    /// Tape leaf of every parameter, `None` for running statistics.
    pub leaves: Vec<Option<Var>>,
    /// Summed single-sample KL estimate over variational layers.
    pub kl: Option<Var>,
    /// Batch statistics per convolution layer (training mode only).
    pub bn_stats: Vec<(usize, BatchStats)>,
}

#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    params: Vec<Parameter>,
    convs: Vec<ConvLayer>,
    head_kernel: usize,
    head_bias: usize,
}

impl UNet {
    /// He-normal initialization from `seed`. Variational kernels start at
    /// the He draw with `σ = 0.01 · He std` and a zero prior mean.
    pub fn build(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let taps = 3usize.pow(config.dim as u32);
        let mut params = Vec::new();
        let mut push = |name: String, shape: &[usize], data: Vec<f64>, trainable: bool| {
            params.push(Parameter::new(
                name,
                Tensor::from_vec(shape, data).expect("parameter shape"),
                trainable,
            ));
            params.len() - 1
        };
        let he = |n: usize, fan_in: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            let std = (2.0 / fan_in as f64).sqrt();
            (0..n)
                .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
                .collect::<Vec<f64>>()
        };
        let mut convs = Vec::new();
        for (name, cin, cout, variational) in config.conv_plan() {
            let mut kshape = vec![3; config.dim];
            kshape.extend([cin, cout]);
            let n = taps * cin * cout;
            let fan_in = taps * cin;
            let init = he(n, fan_in, &mut rng);
            let weights = if variational {
                let rho = softplus_inverse(0.01 * (2.0 / fan_in as f64).sqrt());
                Weights::Var {
                    mu: push(format!("{name}.kernel_mu"), &kshape, init, true),
                    rho: push(format!("{name}.kernel_rho"), &kshape, vec![rho; n], true),
                    prior_mu: push(format!("{name}.prior_mu"), &[1], vec![0.0], true),
                }
            } else {
                Weights::Det {
                    kernel: push(format!("{name}.kernel"), &kshape, init, true),
                }
            };
            convs.push(ConvLayer {
                weights,
                bias: push(format!("{name}.bias"), &[cout], vec![0.0; cout], true),
                gamma: push(format!("{name}.bn_gamma"), &[cout], vec![1.0; cout], true),
                beta: push(format!("{name}.bn_beta"), &[cout], vec![0.0; cout], true),
                mean: push(format!("{name}.bn_mean"), &[cout], vec![0.0; cout], false),
                var: push(format!("{name}.bn_var"), &[cout], vec![1.0; cout], false),
            });
        }
        let c0 = config.level_channels(0);
        let out = config.out_channels();
        let head_init = he(c0 * out, c0, &mut rng);
        let head_kernel = push("head.kernel".into(), &[c0, out], head_init, true);
        let head_bias = push("head.bias".into(), &[out], vec![0.0; out], true);
        Ok(Self {
            config,
            params,
            convs,
            head_kernel,
            head_bias,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn mode(&self) -> ModelMode {
        self.config.mode
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn conv_layer_count(&self) -> usize {
        self.convs.len()
    }

    pub fn variational_layer_count(&self) -> usize {
        self.convs
            .iter()
            .filter(|c| matches!(c.weights, Weights::Var { .. }))
            .count()
    }

    /// `(μ, ρ, μ_p)` of every variational layer, in forward order.
    pub fn variational_params(&self) -> Vec<(&Parameter, &Parameter, &Parameter)> {
        self.convs
            .iter()
            .filter_map(|c| match c.weights {
                Weights::Var { mu, rho, prior_mu } => {
                    Some((&self.params[mu], &self.params[rho], &self.params[prior_mu]))
                }
                Weights::Det { .. } => None,
            })
            .collect()
    }

    fn check_input(&self, input: &Tensor) -> Result<usize> {
        let s = input.shape();
        let ok = s.len() == self.config.dim + 2
            && s[1..=self.config.dim] == self.config.grid_shape[..]
            && s[self.config.dim + 1] == self.config.dim
            && s[0] >= 1;
        if !ok {
            return Err(CoreError::Model(format!(
                "input shape {s:?} does not match [batch, {:?}, {}]",
                self.config.grid_shape, self.config.dim
            )));
        }
        Ok(s[0])
    }

    /// Records a forward pass. `train` selects batch statistics and makes
    /// trainable parameters require gradients. Variational kernels are
    /// sampled when `noise` is given and replaced by their means otherwise.
    pub fn forward(
        &self,
        tape: &mut Tape,
        input: &Tensor,
        train: bool,
        mut noise: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass> {
        self.check_input(input)?;
        let cfg = &self.config;
        let mut leaves = vec![None; self.params.len()];
        for (i, p) in self.params.iter().enumerate() {
            let is_stat = self.convs.iter().any(|c| c.mean == i || c.var == i);
            if !is_stat {
                leaves[i] = Some(tape.leaf(p.value.clone(), train && p.trainable)?);
            }
        }
        let leaf = |i: usize| leaves[i].expect("trainable leaf");
        let pads = vec![(cfg.input_pad, cfg.input_pad); cfg.dim];
        let x0 = tape.constant(input.clone())?;
        let mut x = tape.pad(x0, &pads)?;
        let mut kl: Option<Var> = None;
        let mut bn_stats = Vec::new();
        let mut block = |tape: &mut Tape, x: Var, idx: usize, noise: &mut Option<&mut ChaCha8Rng>| -> Result<Var> {
            let layer = &self.convs[idx];
            let kernel = match layer.weights {
                Weights::Det { kernel } => leaf(kernel),
                Weights::Var { mu, rho, prior_mu } => match noise.as_deref_mut() {
                    Some(rng) => {
                        let shape = self.params[mu].value.shape();
                        let n = self.params[mu].value.len();
                        let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                        let eps = Tensor::from_vec(shape, eps)?;
                        let w = tape.reparameterize(leaf(mu), leaf(rho), &eps)?;
                        let term = tape.kl_sample(w, leaf(mu), leaf(rho), leaf(prior_mu), cfg.prior_sigma)?;
                        kl = Some(match kl {
                            Some(acc) => tape.add(acc, term)?,
                            None => term,
                        });
                        w
                    }
                    None => leaf(mu),
                },
            };
            let y = tape.conv3x3(x, kernel, leaf(layer.bias))?;
            let y = if train {
                let (y, stats) = tape.batchnorm_train(y, leaf(layer.gamma), leaf(layer.beta), cfg.bn_eps)?;
                bn_stats.push((idx, stats));
                y
            } else {
                tape.batchnorm_infer(
                    y,
                    leaf(layer.gamma),
                    leaf(layer.beta),
                    self.params[layer.mean].value.data(),
                    self.params[layer.var].value.data(),
                    cfg.bn_eps,
                )?
            };
            Ok(tape.relu(y)?)
        };
        let mut idx = 0;
        let mut skips = Vec::new();
        for l in 0..cfg.levels {
            for _ in 0..cfg.convs_per_level {
                x = block(tape, x, idx, &mut noise)?;
                idx += 1;
            }
            if l + 1 < cfg.levels {
                skips.push(x);
                x = tape.maxpool2(x)?;
            }
        }
        for l in (0..cfg.levels - 1).rev() {
            x = tape.upsample_concat(x, skips[l])?;
            for _ in 0..cfg.convs_per_level {
                x = block(tape, x, idx, &mut noise)?;
                idx += 1;
            }
        }
        let y = tape.conv1x1(x, leaf(self.head_kernel), leaf(self.head_bias))?;
        let output = tape.crop(y, &pads)?;
        Ok(ForwardPass {
            output,
            leaves,
            kl,
            bn_stats,
        })
    }

    /// Deterministic prediction with running batchnorm statistics.
    pub fn forward_det(&self, f: &Tensor) -> Result<Tensor> {
        if self.config.mode != ModelMode::Deterministic {
            return Err(CoreError::Model(format!(
                "forward_det needs a deterministic model, this one is {}",
                self.config.mode
            )));
        }
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, f, false, None)?;
        Ok(tape.value(pass.output)?.clone())
    }

    /// Mean and ρ fields of a probabilistic model; the per-DOF spread is
    /// `softplus(ρ)`. With `noise`, variational kernels are sampled.
    pub fn forward_prob(&self, f: &Tensor, noise: Option<&mut ChaCha8Rng>) -> Result<(Tensor, Tensor)> {
        if !self.config.mode.is_probabilistic() {
            return Err(CoreError::Model(
                "forward_prob needs an mle or vb model".into(),
            ));
        }
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, f, false, noise)?;
        let d = self.config.dim;
        let mu = tape.slice_channels(pass.output, 0, d)?;
        let rho = tape.slice_channels(pass.output, d, d)?;
        Ok((tape.value(mu)?.clone(), tape.value(rho)?.clone()))
    }

    /// Exponential moving average of batch statistics into the running ones.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats)]) {
        let m = self.config.bn_momentum;
        for (idx, s) in stats {
            let layer = &self.convs[*idx];
            let (mi, vi) = (layer.mean, layer.var);
            for (r, b) in self.params[mi].value.data_mut().iter_mut().zip(&s.mean) {
                *r = m * *r + (1.0 - m) * b;
            }
            for (r, b) in self.params[vi].value.data_mut().iter_mut().zip(&s.var) {
                *r = m * *r + (1.0 - m) * b;
            }
        }
    }

    pub fn encode_checkpoint(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        let echo = self.config.echo();
        out.extend((echo.len() as u32).to_le_bytes());
        out.extend(echo.as_bytes());
        out.extend((self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend((p.name.len() as u32).to_le_bytes());
            out.extend(p.name.as_bytes());
            out.push(p.trainable as u8);
            out.extend((p.value.shape().len() as u32).to_le_bytes());
            for &e in p.value.shape() {
                out.extend((e as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend(v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[MAGIC.len()..]);
        out.extend(crc.to_le_bytes());
        out
    }

    pub fn decode_checkpoint(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| CoreError::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("missing NFEMW1 magic or truncated file"));
        }
        let (payload, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().unwrap());
        let computed = crc32fast::hash(&payload[MAGIC.len()..]);
        if stored != computed {
            return Err(CoreError::Checksum { stored, computed });
        }
        let mut pos = MAGIC.len();
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|&e| e <= payload.len());
            let end = end.ok_or_else(|| bad("truncated checkpoint"))?;
            let s = &payload[pos..end];
            pos = end;
            Ok(s)
        };
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
        let echo_len = u32_at(take(4)?);
        let echo = std::str::from_utf8(take(echo_len)?).map_err(|_| bad("config is not UTF-8"))?;
        let config = UNetConfig::parse_echo(echo)?;
        let mut model = Self::build(config, 0)?;
        let count = u32_at(take(4)?);
        if count != model.params.len() {
            return Err(bad("parameter count does not match the architecture"));
        }
        for i in 0..count {
            let name_len = u32_at(take(4)?);
            let name = std::str::from_utf8(take(name_len)?)
                .map_err(|_| bad("parameter name is not UTF-8"))?
                .to_string();
            let trainable = take(1)?[0] != 0;
            let rank = u32_at(take(4)?);
            let shape = (0..rank)
                .map(|_| take(4).map(u32_at))
                .collect::<Result<Vec<_>>>()?;
            let p = &mut model.params[i];
            if p.name != name || p.value.shape() != shape.as_slice() || p.trainable != trainable {
                return Err(CoreError::Checkpoint(format!(
                    "parameter {i} is '{name}' {shape:?}, architecture expects '{}' {:?}",
                    p.name,
                    p.value.shape()
                )));
            }
            let n = p.value.len();
            let raw = take(n * 8)?;
            for (v, chunk) in p.value.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        if pos != payload.len() {
            return Err(bad("trailing bytes after parameters"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_checkpoint()).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Self::decode_checkpoint(&bytes)
    }
}
