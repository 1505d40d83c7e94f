//! Forward rules and vector-Jacobian products for every recorded op.

use crate::gemm::gemm;
use crate::tape::{Node, Tape, Var};
use crate::{AdError, Result, Tensor};

/// Largest im2col buffer built at once, in `f64` elements.
const IM2COL_BUDGET: usize = 1 << 22;
const NONE: u32 = u32::MAX;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Per-channel batch statistics from a training-mode normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance.
    pub var: Vec<f64>,
}

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Relu(usize),
    Softplus(usize),
    Conv3 {
        x: usize,
        k: usize,
        b: usize,
        nbr: Vec<u32>,
    },
    Conv1 {
        x: usize,
        k: usize,
        b: usize,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    UpCat {
        coarse: usize,
        skip: usize,
        map: Vec<usize>,
    },
    Gather {
        x: usize,
        src: Vec<u32>,
    },
    Slice {
        x: usize,
        start: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Mse {
        pred: usize,
        diff: Vec<f64>,
        batch: usize,
    },
    Nll {
        mu: usize,
        rho: usize,
        target: Vec<f64>,
        mask: Vec<bool>,
    },
    Reparam {
        mu: usize,
        rho: usize,
        eps: Vec<f64>,
    },
    Kl {
        w: usize,
        mu: usize,
        rho: usize,
        mu_p: usize,
        sigma_p: f64,
    },
}

fn mismatch(op: &'static str, detail: String) -> AdError {
    AdError::ShapeMismatch { op, detail }
}

/// Channels-last grid layout `[batch, spatial.., channels]`.
struct Grid {
    batch: usize,
    dims: Vec<usize>,
    channels: usize,
}

impl Grid {
    fn of(shape: &[usize], op: &'static str) -> Result<Self> {
        if shape.len() < 3 {
            return Err(mismatch(
                op,
                format!("expected [batch, spatial.., channels], got {shape:?}"),
            ));
        }
        if shape.contains(&0) {
            return Err(mismatch(op, format!("empty extent in {shape:?}")));
        }
        Ok(Self {
            batch: shape[0],
            dims: shape[1..shape.len() - 1].to_vec(),
            channels: shape[shape.len() - 1],
        })
    }

    fn positions(&self) -> usize {
        self.dims.iter().product()
    }

    fn shape_with(&self, dims: &[usize], channels: usize) -> Vec<usize> {
        let mut s = Vec::with_capacity(dims.len() + 2);
        s.push(self.batch);
        s.extend_from_slice(dims);
        s.push(channels);
        s
    }
}

fn unravel(mut idx: usize, dims: &[usize], out: &mut [usize]) {
    for a in (0..dims.len()).rev() {
        out[a] = idx % dims[a];
        idx /= dims[a];
    }
}

fn ravel(coords: &[usize], dims: &[usize]) -> usize {
    coords.iter().zip(dims).fold(0, |acc, (&c, &d)| acc * d + c)
}

/// For each position and each of the 3^d taps, the flat index of the
/// neighbour at offset `tap − 1` per axis, or `NONE` outside the grid.
fn neighbor_table(dims: &[usize]) -> Vec<u32> {
    let d = dims.len();
    let taps = 3usize.pow(d as u32);
    let p = dims.iter().product::<usize>();
    let mut table = vec![NONE; p * taps];
    let mut c = vec![0; d];
    let mut o = vec![0; d];
    let mut n = vec![0; d];
    let three = vec![3; d];
    for pos in 0..p {
        unravel(pos, dims, &mut c);
        'tap: for t in 0..taps {
            unravel(t, &three, &mut o);
            for a in 0..d {
                let v = c[a] + o[a];
                if v == 0 || v > dims[a] {
                    continue 'tap;
                }
                n[a] = v - 1;
            }
            table[pos * taps + t] = ravel(&n, dims) as u32;
        }
    }
    table
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    nbr: &[u32],
    positions: usize,
    taps: usize,
    cin: usize,
    b0: usize,
    b1: usize,
    cols: &mut [f64],
) {
    let width = taps * cin;
    for b in b0..b1 {
        let xb = &x[b * positions * cin..(b + 1) * positions * cin];
        for pos in 0..positions {
            let row = ((b - b0) * positions + pos) * width;
            for t in 0..taps {
                let dst = &mut cols[row + t * cin..row + (t + 1) * cin];
                match nbr[pos * taps + t] {
                    NONE => dst.fill(0.0),
                    n => dst.copy_from_slice(&xb[n as usize * cin..(n as usize + 1) * cin]),
                }
            }
        }
    }
}

fn samples_per_chunk(positions: usize, width: usize) -> usize {
    (IM2COL_BUDGET / (positions * width).max(1)).max(1)
}

fn check_same(tape: &Tape, a: Var, b: Var, op: &'static str) -> Result<(usize, usize)> {
    let (ia, ib) = (tape.index(a)?, tape.index(b)?);
    let (sa, sb) = (tape.node(a)?.value.shape(), tape.node(b)?.value.shape());
    if sa != sb {
        return Err(mismatch(op, format!("{sa:?} vs {sb:?}")));
    }
    Ok((ia, ib))
}

fn map_unary(tape: &Tape, a: Var, f: impl Fn(f64) -> f64) -> Result<(usize, Tensor)> {
    let ia = tape.index(a)?;
    let v = &tape.node(a)?.value;
    let data = v.data().iter().map(|&x| f(x)).collect();
    Ok((ia, Tensor::from_vec(v.shape(), data)?))
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = check_same(self, a, b, "add")?;
        let va = &self.node(a)?.value;
        let vb = &self.node(b)?.value;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        self.push("add", out, Op::Add(ia, ib), &[ia, ib])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = check_same(self, a, b, "sub")?;
        let va = &self.node(a)?.value;
        let vb = &self.node(b)?.value;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        self.push("sub", out, Op::Sub(ia, ib), &[ia, ib])
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = check_same(self, a, b, "mul")?;
        let va = &self.node(a)?.value;
        let vb = &self.node(b)?.value;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        self.push("mul", out, Op::Mul(ia, ib), &[ia, ib])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let (ia, out) = map_unary(self, a, |x| s * x)?;
        self.push("scale", out, Op::Scale(ia, s), &[ia])
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let s = self.node(a)?.value.data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(ia), &[ia])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let (ia, out) = map_unary(self, a, |x| x.max(0.0))?;
        self.push("relu", out, Op::Relu(ia), &[ia])
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let (ia, out) = map_unary(self, a, softplus)?;
        self.push("softplus", out, Op::Softplus(ia), &[ia])
    }

    /// Same-padded 3×3 (or 3×3×3) convolution. Kernel shape is
    /// `[3, .., 3, c_in, c_out]`, bias shape `[c_out]`.
    pub fn conv3x3(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let (ix, ik, ib) = (self.index(x)?, self.index(k)?, self.index(b)?);
        let xv = &self.node(x)?.value;
        let kv = &self.node(k)?.value;
        let bv = &self.node(b)?.value;
        let g = Grid::of(xv.shape(), "conv3x3")?;
        let d = g.dims.len();
        let ks = kv.shape();
        if ks.len() != d + 2 || ks[..d].iter().any(|&e| e != 3) || ks[d] != g.channels {
            return Err(mismatch(
                "conv3x3",
                format!(
                    "kernel {ks:?} does not fit input {:?} (expected [3; {d}] ++ [{}, c_out])",
                    xv.shape(),
                    g.channels
                ),
            ));
        }
        let cout = ks[d + 1];
        if bv.shape() != [cout] {
            return Err(mismatch(
                "conv3x3",
                format!("bias {:?}, expected [{cout}]", bv.shape()),
            ));
        }
        let nbr = neighbor_table(&g.dims);
        let p = g.positions();
        let taps = 3usize.pow(d as u32);
        let cin = g.channels;
        let width = taps * cin;
        let mut out = vec![0.0; g.batch * p * cout];
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(bv.data());
        }
        let chunk = samples_per_chunk(p, width);
        let mut cols = vec![0.0; chunk.min(g.batch) * p * width];
        let mut b0 = 0;
        while b0 < g.batch {
            let b1 = (b0 + chunk).min(g.batch);
            let rows = (b1 - b0) * p;
            im2col(xv.data(), &nbr, p, taps, cin, b0, b1, &mut cols);
            gemm(
                rows,
                width,
                cout,
                &cols,
                false,
                kv.data(),
                false,
                &mut out[b0 * p * cout..b1 * p * cout],
                1.0,
            );
            b0 = b1;
        }
        let out = Tensor::from_vec(&g.shape_with(&g.dims, cout), out)?;
        self.push(
            "conv3x3",
            out,
            Op::Conv3 {
                x: ix,
                k: ik,
                b: ib,
                nbr,
            },
            &[ix, ik, ib],
        )
    }

    /// Position-wise linear map across channels. Kernel `[c_in, c_out]`.
    pub fn conv1x1(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let (ix, ik, ib) = (self.index(x)?, self.index(k)?, self.index(b)?);
        let xv = &self.node(x)?.value;
        let kv = &self.node(k)?.value;
        let bv = &self.node(b)?.value;
        let g = Grid::of(xv.shape(), "conv1x1")?;
        let ks = kv.shape();
        if ks.len() != 2 || ks[0] != g.channels {
            return Err(mismatch(
                "conv1x1",
                format!("kernel {ks:?}, expected [{}, c_out]", g.channels),
            ));
        }
        let cout = ks[1];
        if bv.shape() != [cout] {
            return Err(mismatch(
                "conv1x1",
                format!("bias {:?}, expected [{cout}]", bv.shape()),
            ));
        }
        let rows = g.batch * g.positions();
        let mut out = vec![0.0; rows * cout];
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(bv.data());
        }
        gemm(
            rows,
            g.channels,
            cout,
            xv.data(),
            false,
            kv.data(),
            false,
            &mut out,
            1.0,
        );
        let out = Tensor::from_vec(&g.shape_with(&g.dims, cout), out)?;
        self.push("conv1x1", out, Op::Conv1 { x: ix, k: ik, b: ib }, &[ix, ik, ib])
    }

    /// 2× max pooling over every spatial axis. Ties go to the first
    /// element of the block in raster order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let ix = self.index(x)?;
        let xv = &self.node(x)?.value;
        let g = Grid::of(xv.shape(), "maxpool2")?;
        if let Some(e) = g.dims.iter().find(|&&e| e % 2 != 0) {
            return Err(mismatch(
                "maxpool2",
                format!("odd spatial extent {e} in {:?}", xv.shape()),
            ));
        }
        let d = g.dims.len();
        let half: Vec<usize> = g.dims.iter().map(|e| e / 2).collect();
        let q_count: usize = half.iter().product();
        let children = 1usize << d;
        let p = g.positions();
        let c = g.channels;
        let mut block = vec![0usize; q_count * children];
        let mut qc = vec![0; d];
        let mut ic = vec![0; d];
        for q in 0..q_count {
            unravel(q, &half, &mut qc);
            for ch in 0..children {
                for a in 0..d {
                    ic[a] = 2 * qc[a] + ((ch >> (d - 1 - a)) & 1);
                }
                block[q * children + ch] = ravel(&ic, &g.dims);
            }
        }
        let x = xv.data();
        let mut out = vec![0.0; g.batch * q_count * c];
        let mut argmax = vec![0usize; out.len()];
        for b in 0..g.batch {
            for q in 0..q_count {
                for ch in 0..c {
                    let o = (b * q_count + q) * c + ch;
                    let mut best_idx = (b * p + block[q * children]) * c + ch;
                    let mut best = x[best_idx];
                    for &pos in &block[q * children + 1..(q + 1) * children] {
                        let idx = (b * p + pos) * c + ch;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let out = Tensor::from_vec(&g.shape_with(&half, c), out)?;
        self.push("maxpool2", out, Op::MaxPool { x: ix, argmax }, &[ix])
    }

    /// Nearest-neighbour 2× upsampling of `coarse` followed by channel
    /// concatenation with `skip`: `[coarse↑ | skip]`.
    pub fn upsample_concat(&mut self, coarse: Var, skip: Var) -> Result<Var> {
        let (ic, is) = (self.index(coarse)?, self.index(skip)?);
        let cv = &self.node(coarse)?.value;
        let sv = &self.node(skip)?.value;
        let gc = Grid::of(cv.shape(), "upsample_concat")?;
        let gs = Grid::of(sv.shape(), "upsample_concat")?;
        let fits = gc.batch == gs.batch
            && gc.dims.len() == gs.dims.len()
            && gc.dims.iter().zip(&gs.dims).all(|(c, s)| 2 * c == *s);
        if !fits {
            return Err(mismatch(
                "upsample_concat",
                format!(
                    "skip {:?} is not twice coarse {:?}",
                    sv.shape(),
                    cv.shape()
                ),
            ));
        }
        let d = gs.dims.len();
        let p = gs.positions();
        let pc = gc.positions();
        let (c1, c2) = (gc.channels, gs.channels);
        let mut map = vec![0usize; p];
        let mut fc = vec![0; d];
        for (pos, m) in map.iter_mut().enumerate() {
            unravel(pos, &gs.dims, &mut fc);
            fc.iter_mut().for_each(|v| *v /= 2);
            *m = ravel(&fc, &gc.dims);
        }
        let width = c1 + c2;
        let mut out = vec![0.0; gs.batch * p * width];
        for b in 0..gs.batch {
            for pos in 0..p {
                let o = (b * p + pos) * width;
                let src = (b * pc + map[pos]) * c1;
                out[o..o + c1].copy_from_slice(&cv.data()[src..src + c1]);
                let s = (b * p + pos) * c2;
                out[o + c1..o + width].copy_from_slice(&sv.data()[s..s + c2]);
            }
        }
        let out = Tensor::from_vec(&gs.shape_with(&gs.dims, width), out)?;
        self.push(
            "upsample_concat",
            out,
            Op::UpCat {
                coarse: ic,
                skip: is,
                map,
            },
            &[ic, is],
        )
    }

    /// Zero padding with `(before, after)` cells per spatial axis.
    pub fn pad(&mut self, x: Var, pads: &[(usize, usize)]) -> Result<Var> {
        let g = Grid::of(self.value(x)?.shape(), "pad")?;
        if pads.len() != g.dims.len() {
            return Err(mismatch(
                "pad",
                format!("{} pad pairs for {} spatial axes", pads.len(), g.dims.len()),
            ));
        }
        let out_dims: Vec<usize> = g
            .dims
            .iter()
            .zip(pads)
            .map(|(e, (lo, hi))| e + lo + hi)
            .collect();
        let mut src = vec![NONE; out_dims.iter().product()];
        let mut c = vec![0; g.dims.len()];
        for pos in 0..g.positions() {
            unravel(pos, &g.dims, &mut c);
            c.iter_mut().zip(pads).for_each(|(v, (lo, _))| *v += lo);
            src[ravel(&c, &out_dims)] = pos as u32;
        }
        self.gather(x, &g, out_dims, src, "pad")
    }

    /// Removes `(before, after)` cells per spatial axis.
    pub fn crop(&mut self, x: Var, pads: &[(usize, usize)]) -> Result<Var> {
        let g = Grid::of(self.value(x)?.shape(), "crop")?;
        if pads.len() != g.dims.len() || g.dims.iter().zip(pads).any(|(e, (lo, hi))| lo + hi >= *e)
        {
            return Err(mismatch(
                "crop",
                format!("cannot crop {pads:?} from extents {:?}", g.dims),
            ));
        }
        let out_dims: Vec<usize> = g
            .dims
            .iter()
            .zip(pads)
            .map(|(e, (lo, hi))| e - lo - hi)
            .collect();
        let mut src = vec![NONE; out_dims.iter().product()];
        let mut c = vec![0; g.dims.len()];
        for (pos, s) in src.iter_mut().enumerate() {
            unravel(pos, &out_dims, &mut c);
            c.iter_mut().zip(pads).for_each(|(v, (lo, _))| *v += lo);
            *s = ravel(&c, &g.dims) as u32;
        }
        self.gather(x, &g, out_dims, src, "crop")
    }

    fn gather(
        &mut self,
        x: Var,
        g: &Grid,
        out_dims: Vec<usize>,
        src: Vec<u32>,
        name: &'static str,
    ) -> Result<Var> {
        let ix = self.index(x)?;
        let xv = self.node(x)?.value.data();
        let (p_in, c) = (g.positions(), g.channels);
        let p_out = src.len();
        let mut out = vec![0.0; g.batch * p_out * c];
        for b in 0..g.batch {
            for (pos, &s) in src.iter().enumerate() {
                if s != NONE {
                    let from = (b * p_in + s as usize) * c;
                    let to = (b * p_out + pos) * c;
                    out[to..to + c].copy_from_slice(&xv[from..from + c]);
                }
            }
        }
        let out = Tensor::from_vec(&g.shape_with(&out_dims, c), out)?;
        self.push(name, out, Op::Gather { x: ix, src }, &[ix])
    }

    /// Channels `start..start + len` of the last axis.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.index(x)?;
        let xv = &self.node(x)?.value;
        let shape = xv.shape();
        let c = *shape.last().unwrap_or(&0);
        if shape.len() < 2 || len == 0 || start + len > c {
            return Err(mismatch(
                "slice_channels",
                format!("channels {start}..{} of {shape:?}", start + len),
            ));
        }
        let data = xv
            .data()
            .chunks_exact(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = len;
        let out = Tensor::from_vec(&out_shape, data)?;
        self.push("slice_channels", out, Op::Slice { x: ix, start }, &[ix])
    }

    /// Training-mode normalization with batch statistics over all axes but
    /// the channel axis.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let shape = self.value(x)?.shape().to_vec();
        if shape.first().copied().unwrap_or(0) < 2 {
            return Err(AdError::BatchTooSmall(shape.first().copied().unwrap_or(0)));
        }
        let c = *shape.last().unwrap();
        let xv = self.value(x)?.data();
        let m = (xv.len() / c) as f64;
        let mut mean = vec![0.0; c];
        for row in xv.chunks_exact(c) {
            mean.iter_mut().zip(row).for_each(|(s, v)| *s += v);
        }
        mean.iter_mut().for_each(|s| *s /= m);
        let mut var = vec![0.0; c];
        for row in xv.chunks_exact(c) {
            for ((s, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - mu) * (v - mu);
            }
        }
        var.iter_mut().for_each(|s| *s /= m);
        let stats = BatchStats { mean, var };
        let out = self.normalize(x, gamma, beta, &stats.mean, &stats.var, eps, true)?;
        Ok((out, stats))
    }

    /// Inference-mode normalization with fixed statistics.
    pub fn batchnorm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        self.normalize(x, gamma, beta, mean, var, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        train: bool,
    ) -> Result<Var> {
        let (ix, ig, ib) = (self.index(x)?, self.index(gamma)?, self.index(beta)?);
        let xv = &self.node(x)?.value;
        let c = *xv.shape().last().unwrap_or(&0);
        let gv = self.node(gamma)?.value.data();
        let bv = self.node(beta)?.value.data();
        if c == 0 || gv.len() != c || bv.len() != c || mean.len() != c || var.len() != c {
            return Err(mismatch(
                "batchnorm",
                format!("{c} channels, gamma {}, beta {}, stats {}", gv.len(), bv.len(), mean.len()),
            ));
        }
        if !(eps > 0.0) {
            return Err(AdError::Invalid(format!("batchnorm eps must be positive, got {eps}")));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for ((row, xh), o) in xv
            .data()
            .chunks_exact(c)
            .zip(xhat.chunks_exact_mut(c))
            .zip(out.chunks_exact_mut(c))
        {
            for j in 0..c {
                xh[j] = (row[j] - mean[j]) * inv_std[j];
                o[j] = gv[j] * xh[j] + bv[j];
            }
        }
        let out = Tensor::from_vec(xv.shape(), out)?;
        self.push(
            "batchnorm",
            out,
            Op::BatchNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                inv_std,
                train,
            },
            &[ix, ig, ib],
        )
    }

    /// Mean over the batch of the squared Euclidean error per sample.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let ip = self.index(pred)?;
        let pv = &self.node(pred)?.value;
        if pv.shape() != target.shape() || pv.shape().is_empty() {
            return Err(mismatch(
                "mse_loss",
                format!("prediction {:?} vs target {:?}", pv.shape(), target.shape()),
            ));
        }
        let batch = pv.shape()[0];
        let diff: Vec<f64> = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| p - t)
            .collect();
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / batch as f64;
        self.push(
            "mse_loss",
            Tensor::scalar(loss),
            Op::Mse {
                pred: ip,
                diff,
                batch,
            },
            &[ip],
        )
    }

    /// Gaussian negative log-likelihood summed over the batch and over the
    /// per-sample entries selected by `mask`, with `σ = softplus(ρ)`.
    pub fn gaussian_nll(
        &mut self,
        mu: Var,
        rho: Var,
        target: &Tensor,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (im, ir) = check_same(self, mu, rho, "gaussian_nll")?;
        let mv = &self.node(mu)?.value;
        let rv = &self.node(rho)?.value;
        if mv.shape() != target.shape() || mv.shape().is_empty() {
            return Err(mismatch(
                "gaussian_nll",
                format!("mean {:?} vs target {:?}", mv.shape(), target.shape()),
            ));
        }
        let per = mv.len() / mv.shape()[0];
        let mask = match mask {
            Some(m) if m.len() == per => m.to_vec(),
            Some(m) => {
                return Err(mismatch(
                    "gaussian_nll",
                    format!("mask has {} entries, sample has {per}", m.len()),
                ))
            }
            None => vec![true; per],
        };
        let mut loss = 0.0;
        for (i, ((m, r), t)) in mv.data().iter().zip(rv.data()).zip(target.data()).enumerate() {
            if mask[i % per] {
                let s = softplus(*r);
                let z = (t - m) / s;
                loss += s.ln() + HALF_LN_2PI + 0.5 * z * z;
            }
        }
        self.push(
            "gaussian_nll",
            Tensor::scalar(loss),
            Op::Nll {
                mu: im,
                rho: ir,
                target: target.data().to_vec(),
                mask,
            },
            &[im, ir],
        )
    }

    /// Reparameterized sample `w = μ + softplus(ρ) ⊙ ε`.
    pub fn reparameterize(&mut self, mu: Var, rho: Var, eps: &Tensor) -> Result<Var> {
        let (im, ir) = check_same(self, mu, rho, "reparameterize")?;
        let mv = &self.node(mu)?.value;
        let rv = &self.node(rho)?.value;
        if eps.shape() != mv.shape() {
            return Err(mismatch(
                "reparameterize",
                format!("noise {:?} vs parameter {:?}", eps.shape(), mv.shape()),
            ));
        }
        let data = mv
            .data()
            .iter()
            .zip(rv.data())
            .zip(eps.data())
            .map(|((m, r), e)| m + softplus(*r) * e)
            .collect();
        let out = Tensor::from_vec(mv.shape(), data)?;
        self.push(
            "reparameterize",
            out,
            Op::Reparam {
                mu: im,
                rho: ir,
                eps: eps.data().to_vec(),
            },
            &[im, ir],
        )
    }

    /// Single-sample Monte Carlo estimate `Σ [log q(w | μ, σ) − log p(w | μ_p, σ_p)]`
    /// with `σ = softplus(ρ)`. `mu_p` is either a single value or matches `w`.
    pub fn kl_sample(
        &mut self,
        w: Var,
        mu: Var,
        rho: Var,
        mu_p: Var,
        sigma_p: f64,
    ) -> Result<Var> {
        let (iw, im) = check_same(self, w, mu, "kl_sample")?;
        let (_, ir) = check_same(self, w, rho, "kl_sample")?;
        let ip = self.index(mu_p)?;
        let n = self.node(w)?.value.len();
        let np = self.node(mu_p)?.value.len();
        if np != 1 && np != n {
            return Err(mismatch(
                "kl_sample",
                format!("prior mean has {np} entries, weights have {n}"),
            ));
        }
        if !(sigma_p > 0.0) || !sigma_p.is_finite() {
            return Err(AdError::Invalid(format!("prior std must be positive, got {sigma_p}")));
        }
        let wv = self.node(w)?.value.data();
        let mv = self.node(mu)?.value.data();
        let rv = self.node(rho)?.value.data();
        let pv = self.node(mu_p)?.value.data();
        let ln_sp = sigma_p.ln();
        let mut kl = 0.0;
        for i in 0..n {
            let s = softplus(rv[i]);
            let zq = (wv[i] - mv[i]) / s;
            let zp = (wv[i] - pv[if np == 1 { 0 } else { i }]) / sigma_p;
            kl += -s.ln() - 0.5 * zq * zq + ln_sp + 0.5 * zp * zp;
        }
        self.push(
            "kl_sample",
            Tensor::scalar(kl),
            Op::Kl {
                w: iw,
                mu: im,
                rho: ir,
                mu_p: ip,
                sigma_p,
            },
            &[iw, im, ir, ip],
        )
    }
}

fn accumulate(nodes: &mut [Node], i: usize, delta: Vec<f64>) {
    let node = &mut nodes[i];
    if !node.requires_grad {
        return;
    }
    match &mut node.grad {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        None => node.grad = Some(delta),
    }
}

fn channel_sums(g: &[f64], c: usize) -> Vec<f64> {
    let mut s = vec![0.0; c];
    for row in g.chunks_exact(c) {
        s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    s
}

pub(crate) fn backward_op(op: &Op, out: &Tensor, g: &[f64], nodes: &mut [Node]) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, *a, g.to_vec());
            accumulate(nodes, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, *a, g.to_vec());
            accumulate(nodes, *b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let da = g.iter().zip(nodes[*b].value.data()).map(|(x, y)| x * y).collect();
            let db = g.iter().zip(nodes[*a].value.data()).map(|(x, y)| x * y).collect();
            accumulate(nodes, *a, da);
            accumulate(nodes, *b, db);
        }
        Op::Scale(a, s) => accumulate(nodes, *a, g.iter().map(|v| s * v).collect()),
        Op::Sum(a) => {
            let n = nodes[*a].value.len();
            accumulate(nodes, *a, vec![g[0]; n]);
        }
        Op::Relu(a) => {
            let d = g
                .iter()
                .zip(nodes[*a].value.data())
                .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                .collect();
            accumulate(nodes, *a, d);
        }
        Op::Softplus(a) => {
            let d = g
                .iter()
                .zip(nodes[*a].value.data())
                .map(|(gv, x)| gv * sigmoid(*x))
                .collect();
            accumulate(nodes, *a, d);
        }
        Op::Conv3 { x, k, b, nbr } => conv3_backward(*x, *k, *b, nbr, g, nodes),
        Op::Conv1 { x, k, b } => {
            let xs = nodes[*x].value.shape();
            let cin = *xs.last().unwrap();
            let cout = *nodes[*k].value.shape().last().unwrap();
            let rows = g.len() / cout;
            if nodes[*b].requires_grad {
                accumulate(nodes, *b, channel_sums(g, cout));
            }
            if nodes[*k].requires_grad {
                let mut dk = vec![0.0; cin * cout];
                gemm(cin, rows, cout, nodes[*x].value.data(), true, g, false, &mut dk, 0.0);
                accumulate(nodes, *k, dk);
            }
            if nodes[*x].requires_grad {
                let mut dx = vec![0.0; rows * cin];
                gemm(rows, cout, cin, g, false, nodes[*k].value.data(), true, &mut dx, 0.0);
                accumulate(nodes, *x, dx);
            }
        }
        Op::MaxPool { x, argmax } => {
            if nodes[*x].requires_grad {
                let mut dx = vec![0.0; nodes[*x].value.len()];
                for (gv, &i) in g.iter().zip(argmax) {
                    dx[i] += gv;
                }
                accumulate(nodes, *x, dx);
            }
        }
        Op::UpCat { coarse, skip, map } => {
            let c1 = *nodes[*coarse].value.shape().last().unwrap();
            let c2 = *nodes[*skip].value.shape().last().unwrap();
            let width = c1 + c2;
            let p = map.len();
            let pc = nodes[*coarse].value.len() / c1 / (g.len() / width / p);
            if nodes[*coarse].requires_grad {
                let mut dc = vec![0.0; nodes[*coarse].value.len()];
                for (r, row) in g.chunks_exact(width).enumerate() {
                    let (b, pos) = (r / p, r % p);
                    let dst = (b * pc + map[pos]) * c1;
                    dc[dst..dst + c1]
                        .iter_mut()
                        .zip(&row[..c1])
                        .for_each(|(a, v)| *a += v);
                }
                accumulate(nodes, *coarse, dc);
            }
            if nodes[*skip].requires_grad {
                let ds = g.chunks_exact(width).flat_map(|row| row[c1..].iter().copied()).collect();
                accumulate(nodes, *skip, ds);
            }
        }
        Op::Gather { x, src } => {
            if nodes[*x].requires_grad {
                let xs = nodes[*x].value.shape();
                let c = *xs.last().unwrap();
                let p_in = nodes[*x].value.len() / c / xs[0];
                let p_out = src.len();
                let mut dx = vec![0.0; nodes[*x].value.len()];
                for b in 0..xs[0] {
                    for (pos, &s) in src.iter().enumerate() {
                        if s != NONE {
                            let to = (b * p_in + s as usize) * c;
                            let from = (b * p_out + pos) * c;
                            dx[to..to + c]
                                .iter_mut()
                                .zip(&g[from..from + c])
                                .for_each(|(a, v)| *a += v);
                        }
                    }
                }
                accumulate(nodes, *x, dx);
            }
        }
        Op::Slice { x, start } => {
            if nodes[*x].requires_grad {
                let c = *nodes[*x].value.shape().last().unwrap();
                let len = *out.shape().last().unwrap();
                let mut dx = vec![0.0; nodes[*x].value.len()];
                for (row, gr) in dx.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                    row[*start..start + len].copy_from_slice(gr);
                }
                accumulate(nodes, *x, dx);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let c = inv_std.len();
            let dbeta = channel_sums(g, c);
            let mut dgamma = vec![0.0; c];
            for (gr, xr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                for j in 0..c {
                    dgamma[j] += gr[j] * xr[j];
                }
            }
            if nodes[*x].requires_grad {
                let gam = nodes[*gamma].value.data().to_vec();
                let m = (g.len() / c) as f64;
                let mut dx = vec![0.0; g.len()];
                for ((dr, gr), xr) in dx
                    .chunks_exact_mut(c)
                    .zip(g.chunks_exact(c))
                    .zip(xhat.chunks_exact(c))
                {
                    for j in 0..c {
                        let s = gam[j] * inv_std[j];
                        dr[j] = if *train {
                            s * (gr[j] - (dbeta[j] + xr[j] * dgamma[j]) / m)
                        } else {
                            s * gr[j]
                        };
                    }
                }
                accumulate(nodes, *x, dx);
            }
            accumulate(nodes, *gamma, dgamma);
            accumulate(nodes, *beta, dbeta);
        }
        Op::Mse { pred, diff, batch } => {
            let s = 2.0 * g[0] / *batch as f64;
            accumulate(nodes, *pred, diff.iter().map(|d| s * d).collect());
        }
        Op::Nll {
            mu,
            rho,
            target,
            mask,
        } => {
            let per = mask.len();
            let mv = nodes[*mu].value.data();
            let rv = nodes[*rho].value.data();
            let mut dmu = vec![0.0; mv.len()];
            let mut drho = vec![0.0; mv.len()];
            for i in 0..mv.len() {
                if mask[i % per] {
                    let s = softplus(rv[i]);
                    let r = target[i] - mv[i];
                    dmu[i] = -g[0] * r / (s * s);
                    drho[i] = g[0] * (1.0 / s - r * r / (s * s * s)) * sigmoid(rv[i]);
                }
            }
            accumulate(nodes, *mu, dmu);
            accumulate(nodes, *rho, drho);
        }
        Op::Reparam { mu, rho, eps } => {
            let drho = g
                .iter()
                .zip(nodes[*rho].value.data())
                .zip(eps)
                .map(|((gv, r), e)| gv * sigmoid(*r) * e)
                .collect();
            accumulate(nodes, *mu, g.to_vec());
            accumulate(nodes, *rho, drho);
        }
        Op::Kl {
            w,
            mu,
            rho,
            mu_p,
            sigma_p,
        } => {
            let wv = nodes[*w].value.data();
            let mv = nodes[*mu].value.data();
            let rv = nodes[*rho].value.data();
            let pv = nodes[*mu_p].value.data();
            let n = wv.len();
            let np = pv.len();
            let sp2 = sigma_p * sigma_p;
            let mut dw = vec![0.0; n];
            let mut dmu = vec![0.0; n];
            let mut drho = vec![0.0; n];
            let mut dp = vec![0.0; np];
            for i in 0..n {
                let s = softplus(rv[i]);
                let dq = wv[i] - mv[i];
                let dpi = wv[i] - pv[if np == 1 { 0 } else { i }];
                dw[i] = g[0] * (-dq / (s * s) + dpi / sp2);
                dmu[i] = g[0] * dq / (s * s);
                drho[i] = g[0] * (-1.0 / s + dq * dq / (s * s * s)) * sigmoid(rv[i]);
                dp[if np == 1 { 0 } else { i }] -= g[0] * dpi / sp2;
            }
            accumulate(nodes, *w, dw);
            accumulate(nodes, *mu, dmu);
            accumulate(nodes, *rho, drho);
            accumulate(nodes, *mu_p, dp);
        }
    }
}

fn conv3_backward(x: usize, k: usize, b: usize, nbr: &[u32], g: &[f64], nodes: &mut [Node]) {
    let xs = nodes[x].value.shape();
    let batch = xs[0];
    let cin = *xs.last().unwrap();
    let cout = *nodes[k].value.shape().last().unwrap();
    let p = nodes[x].value.len() / batch / cin;
    let taps = nbr.len() / p;
    let width = taps * cin;
    let (need_x, need_k) = (nodes[x].requires_grad, nodes[k].requires_grad);
    if nodes[b].requires_grad {
        accumulate(nodes, b, channel_sums(g, cout));
    }
    if !need_x && !need_k {
        return;
    }
    let xv = nodes[x].value.data();
    let kv = nodes[k].value.data();
    let chunk = samples_per_chunk(p, width);
    let mut cols = vec![0.0; chunk.min(batch) * p * width];
    let mut dk = if need_k { vec![0.0; width * cout] } else { Vec::new() };
    let mut dx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
    let mut b0 = 0;
    while b0 < batch {
        let b1 = (b0 + chunk).min(batch);
        let rows = (b1 - b0) * p;
        let gc = &g[b0 * p * cout..b1 * p * cout];
        if need_k {
            im2col(xv, nbr, p, taps, cin, b0, b1, &mut cols);
            gemm(width, rows, cout, &cols, true, gc, false, &mut dk, 1.0);
        }
        if need_x {
            gemm(rows, cout, width, gc, false, kv, true, &mut cols, 0.0);
            for bb in b0..b1 {
                let dxb = &mut dx[bb * p * cin..(bb + 1) * p * cin];
                for pos in 0..p {
                    let row = ((bb - b0) * p + pos) * width;
                    for t in 0..taps {
                        let n = nbr[pos * taps + t];
                        if n != NONE {
                            let src = &cols[row + t * cin..row + (t + 1) * cin];
                            dxb[n as usize * cin..(n as usize + 1) * cin]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, v)| *a += v);
                        }
                    }
                }
            }
        }
        b0 = b1;
    }
    if need_k {
        accumulate(nodes, k, dk);
    }
    if need_x {
        accumulate(nodes, x, dx);
    }
}
