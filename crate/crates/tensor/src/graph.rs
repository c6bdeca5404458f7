//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its value. Nodes are
//! appended in evaluation order, so the tape is topologically sorted by
//! construction and [`Graph::backward`] is a single reverse sweep.

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeometry, LerpTap};
use crate::tensor::{split_axis, Tensor};

/// Lower clamp applied to the arguments of `log`, `sqrt` and to divisors.
pub const CLAMP_MIN: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Silu(Var),
    SumAxis { input: Var, axis: usize },
    SumAll(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    Permute { input: Var, perm: Vec<usize> },
    StopGradient,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Softmax { input: Var, axis: usize },
    LogSoftmax { input: Var, axis: usize },
    Conv2d { input: Var, weight: Var, geom: ConvGeometry, cols: Vec<f64> },
    Resize { input: Var, rows: Vec<LerpTap>, cols: Vec<LerpTap> },
    BatchNorm(Box<BatchNormSaved>),
    IndexSelect { input: Var, indices: Vec<usize> },
    Take { input: Var, indices: Vec<usize> },
}

#[derive(Debug)]
struct BatchNormSaved {
    input: Var,
    gamma: Var,
    beta: Var,
    axis: usize,
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel statistics measured by a training-mode [`Graph::batch_norm`].
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Where [`Graph::batch_norm`] takes its statistics from.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    /// Measure mean and variance from the input (training).
    Batch,
    /// Use fixed running estimates (inference).
    Running { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input (parameter or probe point).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        let rg = self.any_grad(&[x]);
        self.push(value, op, rg)
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { op, axis, rank });
        }
        Ok(())
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        if sa == sb {
            let data = va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(sa, data);
        }
        let out = kernels::broadcast_shape(&sa, &sb).ok_or(TensorError::ShapeMismatch {
            op: op_name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let (ta, tb) = (kernels::broadcast_strides(&sa, &out), kernels::broadcast_strides(&sb, &out));
        let n: usize = out.iter().product();
        let mut data = vec![0.0; n];
        kernels::for_each_strided(&out, &ta, &tb, |i, oa, ob| data[i] = f(va[oa], vb[ob]));
        Tensor::new(out, data)
    }

    /// Broadcasting elementwise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Broadcasting division; divisors are clamped away from zero.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("div", a, b, |x, y| x / clamp_divisor(y))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// Natural log of `max(x, 1e-12)`.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.max(CLAMP_MIN).ln())
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), |v| v.max(CLAMP_MIN).sqrt())
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Silu(x), |v| v * sigmoid(v))
    }

    // ---- reductions and layout ----------------------------------------------

    /// Sum along `axis`, keeping it as a length-one dimension.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(oshape, out)?, Op::SumAxis { input: x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self.shape(x).get(axis).unwrap_or(&1) as f64;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n))
    }

    /// Sum of every element as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.any_grad(inputs);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::dim("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let data = kernels::permute(self.value(x).data(), &shape, perm);
        let out: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(out, data)?, Op::Permute { input: x, perm: perm.to_vec() }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    /// Passes the value through and blocks gradient flow.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false)
    }

    // ---- products -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), sa[0], sa[1], sb[1]);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![sa[0], sb[1]], data)?, Op::MatMul(a, b), rg))
    }

    /// `[B,M,K] x [B,K,P] -> [B,M,P]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch { op: "batch_matmul", lhs: sa, rhs: sb });
        }
        let (bs, m, k, p) = (sa[0], sa[1], sa[2], sb[2]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; bs * m * p];
        for i in 0..bs {
            kernels::matmul_acc(
                &va[i * m * k..(i + 1) * m * k],
                &vb[i * k * p..(i + 1) * k * p],
                m,
                k,
                p,
                &mut data[i * m * p..(i + 1) * m * p],
            );
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![bs, m, p], data)?, Op::BatchMatMul(a, b), rg))
    }

    // ---- normalizations -----------------------------------------------------

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut data = self.value(x).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| data[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for a in 0..len {
                    let e = (data[at(a)] - max).exp();
                    data[at(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    data[at(a)] /= total;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Softmax { input: x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut data = self.value(x).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| data[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|a| (data[at(a)] - max).exp()).sum::<f64>().ln();
                for a in 0..len {
                    data[at(a)] -= lse;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::LogSoftmax { input: x, axis }, rg))
    }

    /// Per-channel standardization with learnable scale and offset.
    ///
    /// Channels lie along `axis`; statistics are taken over every other axis.
    /// Returns the measured statistics when `stats` is [`NormStats::Batch`].
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        stats: NormStats<'_>,
        eps: f64,
    ) -> Result<(Var, Option<ChannelStats>)> {
        self.check_axis("batch_norm", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, channels, inner) = split_axis(&shape, axis);
        for p in [gamma, beta] {
            if self.value(p).numel() != channels {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.value(x).data();
        let count = (outer * inner) as f64;
        let (mean, var, measured) = match stats {
            NormStats::Batch => {
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for o in 0..outer {
                    for c in 0..channels {
                        let base = (o * channels + c) * inner;
                        mean[c] += src[base..base + inner].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for o in 0..outer {
                    for c in 0..channels {
                        let base = (o * channels + c) * inner;
                        var[c] += src[base..base + inner].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                (mean.clone(), var.clone(), Some(ChannelStats { mean, var }))
            }
            NormStats::Running { mean, var } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(TensorError::dim("batch_norm", "running statistics length differs from channel count"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut normalized = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for c in 0..channels {
                let base = (o * channels + c) * inner;
                for i in base..base + inner {
                    let n = (src[i] - mean[c]) * inv_std[c];
                    normalized[i] = n;
                    out[i] = g[c] * n + b[c];
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let saved = BatchNormSaved {
            input: x,
            gamma,
            beta,
            axis,
            normalized,
            inv_std,
            batch_stats: matches!(stats, NormStats::Batch),
        };
        let v = self.push(Tensor::new(shape, out)?, Op::BatchNorm(Box::new(saved)), rg);
        Ok((v, measured))
    }

    // ---- spatial --------------------------------------------------------------

    /// Same-padded square convolution of `x[C,H,W]` with `w[O,C,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: sx, rhs: sw });
        }
        if !(1..=2).contains(&stride) {
            return Err(TensorError::dim("conv2d", format!("stride {stride} not supported")));
        }
        let geom = ConvGeometry { in_channels: sx[0], height: sx[1], width: sx[2], kernel: sw[2], stride };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let data = kernels::matmul(self.value(w).data(), &cols, sw[0], geom.patch_len(), geom.out_pixels());
        let shape = vec![sw[0], geom.out_height(), geom.out_width()];
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Conv2d { input: x, weight: w, geom, cols }, rg))
    }

    /// Bilinear resampling of `x[C,H,W]` with half-pixel centers
    /// (align-corners false).
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(TensorError::dim("bilinear_resize", format!("expected [C,H,W], got {shape:?}")));
        }
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::dim("bilinear_resize", format!("output size {out_h}x{out_w}")));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let rows = kernels::lerp_taps(h, out_h);
        let cols = kernels::lerp_taps(w, out_w);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for (oy, ry) in rows.iter().enumerate() {
                for (ox, rx) in cols.iter().enumerate() {
                    let top = plane[ry.lo * w + rx.lo] * (1.0 - rx.frac) + plane[ry.lo * w + rx.hi] * rx.frac;
                    let bottom = plane[ry.hi * w + rx.lo] * (1.0 - rx.frac) + plane[ry.hi * w + rx.hi] * rx.frac;
                    out[(ch * out_h + oy) * out_w + ox] = top * (1.0 - ry.frac) + bottom * ry.frac;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![c, out_h, out_w], out)?, Op::Resize { input: x, rows, cols }, rg))
    }

    // ---- indexing -------------------------------------------------------------

    /// Gathers slices along axis 0.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || indices.is_empty() {
            return Err(TensorError::dim("index_select", "needs rank >= 1 and at least one index"));
        }
        let row: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= shape[0] {
                return Err(TensorError::IndexOutOfBounds { op: "index_select", index: i, len: shape[0] });
            }
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut out = shape;
        out[0] = indices.len();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(out, data)?, Op::IndexSelect { input: x, indices: indices.to_vec() }, rg))
    }

    /// Gathers elements by flat row-major offset into a rank-1 tensor.
    pub fn take(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        if indices.is_empty() {
            return Err(TensorError::dim("take", "at least one index required"));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(indices.len());
        for &i in indices {
            data.push(*src.get(i).ok_or(TensorError::IndexOutOfBounds { op: "take", index: i, len: src.len() })?);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![indices.len()], data)?, Op::Take { input: x, indices: indices.to_vec() }, rg))
    }

    // ---- backward -------------------------------------------------------------

    /// Reverse sweep from a one-element `loss`.
    ///
    /// Every leaf receives a gradient; leaves the loss does not depend on get
    /// zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let out_shape = node.value.shape();
            match &node.op {
                Op::Leaf => {
                    leaves[id] = Some(Tensor::new(out_shape.to_vec(), g)?);
                }
                Op::Constant | Op::StopGradient => {}
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, kernels::reduce_to(&g, out_shape, self.shape(*a)));
                    self.acc(&mut grads, *b, kernels::reduce_to(&g, out_shape, self.shape(*b)));
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, kernels::reduce_to(&g, out_shape, self.shape(*a)));
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.acc(&mut grads, *b, kernels::reduce_to(&neg, out_shape, self.shape(*b)));
                }
                Op::Mul(a, b) => {
                    if self.requires_grad(*a) {
                        let ga = self.broadcast_product(&g, out_shape, *b, |gv, bv| gv * bv);
                        self.acc(&mut grads, *a, kernels::reduce_to(&ga, out_shape, self.shape(*a)));
                    }
                    if self.requires_grad(*b) {
                        let gb = self.broadcast_product(&g, out_shape, *a, |gv, av| gv * av);
                        self.acc(&mut grads, *b, kernels::reduce_to(&gb, out_shape, self.shape(*b)));
                    }
                }
                Op::Div(a, b) => {
                    if self.requires_grad(*a) {
                        let ga = self.broadcast_product(&g, out_shape, *b, |gv, bv| gv / clamp_divisor(bv));
                        self.acc(&mut grads, *a, kernels::reduce_to(&ga, out_shape, self.shape(*a)));
                    }
                    if self.requires_grad(*b) {
                        // d(a/b)/db = -out / b, zero where the divisor was clamped.
                        let out = node.value.data();
                        let tmp: Vec<f64> = g.iter().zip(out).map(|(gv, o)| gv * o).collect();
                        let gb = self.broadcast_product(&tmp, out_shape, *b, |t, bv| {
                            if bv.abs() < CLAMP_MIN { 0.0 } else { -t / bv }
                        });
                        self.acc(&mut grads, *b, kernels::reduce_to(&gb, out_shape, self.shape(*b)));
                    }
                }
                Op::Scale(x, s) => {
                    let gx = g.iter().map(|v| v * s).collect();
                    self.acc(&mut grads, *x, gx);
                }
                Op::AddScalar(x) => self.acc(&mut grads, *x, g),
                Op::Exp(x) => {
                    let gx = g.iter().zip(node.value.data()).map(|(gv, y)| gv * y).collect();
                    self.acc(&mut grads, *x, gx);
                }
                Op::Log(x) => {
                    let gx = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(gv, &xv)| if xv > CLAMP_MIN { gv / xv } else { 0.0 })
                        .collect();
                    self.acc(&mut grads, *x, gx);
                }
                Op::Sqrt(x) => {
                    let gx = g
                        .iter()
                        .zip(self.value(*x).data())
                        .zip(node.value.data())
                        .map(|((gv, &xv), y)| if xv > CLAMP_MIN { gv * 0.5 / y } else { 0.0 })
                        .collect();
                    self.acc(&mut grads, *x, gx);
                }
                Op::Silu(x) => {
                    let gx = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(gv, &xv)| {
                            let s = sigmoid(xv);
                            gv * s * (1.0 + xv * (1.0 - s))
                        })
                        .collect();
                    self.acc(&mut grads, *x, gx);
                }
                Op::SumAxis { input, axis } => {
                    let shape = self.shape(*input);
                    let (outer, len, inner) = split_axis(shape, *axis);
                    let mut gx = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        for a in 0..len {
                            let base = (o * len + a) * inner;
                            gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                        }
                    }
                    self.acc(&mut grads, *input, gx);
                }
                Op::SumAll(x) => {
                    let n = self.value(*x).numel();
                    self.acc(&mut grads, *x, vec![g[0]; n]);
                }
                Op::Concat { inputs, axis } => {
                    let (outer, total, inner) = split_axis(out_shape, *axis);
                    let mut start = 0;
                    for &v in inputs {
                        let len = self.shape(v)[*axis];
                        if self.requires_grad(v) {
                            let mut gv = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let base = (o * total + start) * inner;
                                gv.extend_from_slice(&g[base..base + len * inner]);
                            }
                            self.acc(&mut grads, v, gv);
                        }
                        start += len;
                    }
                }
                Op::Reshape(x) => self.acc(&mut grads, *x, g),
                Op::Permute { input, perm } => {
                    let gx = kernels::permute(&g, out_shape, &kernels::inverse_permutation(perm));
                    self.acc(&mut grads, *input, gx);
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, p) = (sa[0], sa[1], sb[1]);
                    if self.requires_grad(*a) {
                        let mut ga = vec![0.0; m * k];
                        kernels::matmul_a_bt_acc(&g, self.value(*b).data(), m, p, k, &mut ga);
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.requires_grad(*b) {
                        let mut gb = vec![0.0; k * p];
                        kernels::matmul_at_b_acc(self.value(*a).data(), &g, m, k, p, &mut gb);
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::BatchMatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (bs, m, k, p) = (sa[0], sa[1], sa[2], sb[2]);
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    if self.requires_grad(*a) {
                        let mut ga = vec![0.0; bs * m * k];
                        for i in 0..bs {
                            kernels::matmul_a_bt_acc(
                                &g[i * m * p..(i + 1) * m * p],
                                &vb[i * k * p..(i + 1) * k * p],
                                m,
                                p,
                                k,
                                &mut ga[i * m * k..(i + 1) * m * k],
                            );
                        }
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.requires_grad(*b) {
                        let mut gb = vec![0.0; bs * k * p];
                        for i in 0..bs {
                            kernels::matmul_at_b_acc(
                                &va[i * m * k..(i + 1) * m * k],
                                &g[i * m * p..(i + 1) * m * p],
                                m,
                                k,
                                p,
                                &mut gb[i * k * p..(i + 1) * k * p],
                            );
                        }
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::Softmax { input, axis } => {
                    let (outer, len, inner) = split_axis(out_shape, *axis);
                    let y = node.value.data();
                    let mut gx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + i;
                            let dotp: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                            for a in 0..len {
                                gx[at(a)] = y[at(a)] * (g[at(a)] - dotp);
                            }
                        }
                    }
                    self.acc(&mut grads, *input, gx);
                }
                Op::LogSoftmax { input, axis } => {
                    let (outer, len, inner) = split_axis(out_shape, *axis);
                    let y = node.value.data();
                    let mut gx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + i;
                            let total: f64 = (0..len).map(|a| g[at(a)]).sum();
                            for a in 0..len {
                                gx[at(a)] = g[at(a)] - y[at(a)].exp() * total;
                            }
                        }
                    }
                    self.acc(&mut grads, *input, gx);
                }
                Op::BatchNorm(saved) => self.batch_norm_backward(&mut grads, saved, out_shape, &g),
                Op::Conv2d { input, weight, geom, cols } => {
                    let (cout, q, p) = (self.shape(*weight)[0], geom.patch_len(), geom.out_pixels());
                    if self.requires_grad(*weight) {
                        let mut gw = vec![0.0; cout * q];
                        kernels::matmul_a_bt_acc(&g, cols, cout, p, q, &mut gw);
                        self.acc(&mut grads, *weight, gw);
                    }
                    if self.requires_grad(*input) {
                        let mut gcols = vec![0.0; q * p];
                        kernels::matmul_at_b_acc(self.value(*weight).data(), &g, cout, q, p, &mut gcols);
                        let mut gx = vec![0.0; self.value(*input).numel()];
                        kernels::col2im_acc(&gcols, geom, &mut gx);
                        self.acc(&mut grads, *input, gx);
                    }
                }
                Op::Resize { input, rows, cols } => {
                    let s = self.shape(*input);
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (oh, ow) = (rows.len(), cols.len());
                    let mut gx = vec![0.0; c * h * w];
                    for ch in 0..c {
                        let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
                        for (oy, ry) in rows.iter().enumerate() {
                            for (ox, rx) in cols.iter().enumerate() {
                                let gv = g[(ch * oh + oy) * ow + ox];
                                let top = gv * (1.0 - ry.frac);
                                let bottom = gv * ry.frac;
                                plane[ry.lo * w + rx.lo] += top * (1.0 - rx.frac);
                                plane[ry.lo * w + rx.hi] += top * rx.frac;
                                plane[ry.hi * w + rx.lo] += bottom * (1.0 - rx.frac);
                                plane[ry.hi * w + rx.hi] += bottom * rx.frac;
                            }
                        }
                    }
                    self.acc(&mut grads, *input, gx);
                }
                Op::IndexSelect { input, indices } => {
                    let shape = self.shape(*input);
                    let row: usize = shape[1..].iter().product();
                    let mut gx = vec![0.0; self.value(*input).numel()];
                    for (k, &i) in indices.iter().enumerate() {
                        for j in 0..row {
                            gx[i * row + j] += g[k * row + j];
                        }
                    }
                    self.acc(&mut grads, *input, gx);
                }
                Op::Take { input, indices } => {
                    let mut gx = vec![0.0; self.value(*input).numel()];
                    for (k, &i) in indices.iter().enumerate() {
                        gx[i] += g[k];
                    }
                    self.acc(&mut grads, *input, gx);
                }
            }
        }

        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && leaves[id].is_none() {
                leaves[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.requires_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
            slot @ None => *slot = Some(g),
        }
    }

    /// Combines a gradient shaped `out` with operand `other` broadcast to `out`.
    fn broadcast_product(&self, g: &[f64], out: &[usize], other: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let so = self.shape(other);
        let vo = self.value(other).data();
        if so == out {
            return g.iter().zip(vo).map(|(&a, &b)| f(a, b)).collect();
        }
        let strides = kernels::broadcast_strides(so, out);
        let zeros = vec![0; out.len()];
        let mut res = vec![0.0; g.len()];
        kernels::for_each_strided(out, &strides, &zeros, |i, o, _| res[i] = f(g[i], vo[o]));
        res
    }

    fn batch_norm_backward(&self, grads: &mut [Option<Vec<f64>>], s: &BatchNormSaved, shape: &[usize], g: &[f64]) {
        let (outer, channels, inner) = split_axis(shape, s.axis);
        let count = (outer * inner) as f64;
        let gamma = self.value(s.gamma).data();
        let mut sum_g = vec![0.0; channels];
        let mut sum_gn = vec![0.0; channels];
        for o in 0..outer {
            for c in 0..channels {
                let base = (o * channels + c) * inner;
                for i in base..base + inner {
                    sum_g[c] += g[i];
                    sum_gn[c] += g[i] * s.normalized[i];
                }
            }
        }
        if self.requires_grad(s.input) {
            let mut gx = vec![0.0; g.len()];
            for o in 0..outer {
                for c in 0..channels {
                    let base = (o * channels + c) * inner;
                    let k = gamma[c] * s.inv_std[c];
                    for i in base..base + inner {
                        gx[i] = if s.batch_stats {
                            k * (g[i] - sum_g[c] / count - s.normalized[i] * sum_gn[c] / count)
                        } else {
                            k * g[i]
                        };
                    }
                }
            }
            self.acc(grads, s.input, gx);
        }
        self.acc(grads, s.gamma, sum_gn);
        self.acc(grads, s.beta, sum_g);
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf; `None` for non-leaf or constant nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clamp_divisor(y: f64) -> f64 {
    if y.abs() < CLAMP_MIN {
        if y < 0.0 { -CLAMP_MIN } else { CLAMP_MIN }
    } else {
        y
    }
}
