//! Parameter storage and the small set of layers the network is built from.

use std::collections::HashMap;

use masktx_tensor::{ChannelStats, Gradients, Graph, NormStats, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NormId(usize);

impl NormId {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn from_index(i: usize) -> Self {
        NormId(i)
    }
}

/// Running statistics of one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NormBuffer {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Named trainable tensors plus normalization running statistics.
///
/// Insertion order is the canonical order for checkpoints and optimizers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
    norms: Vec<NormBuffer>,
}

impl ParamStore {
    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn add_norm_buffer(&mut self, name: &str, channels: usize) -> NormId {
        self.norms.push(NormBuffer { name: name.to_string(), mean: vec![0.0; channels], var: vec![1.0; channels] });
        NormId(self.norms.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn norm(&self, id: NormId) -> &NormBuffer {
        &self.norms[id.0]
    }

    pub fn norms(&self) -> &[NormBuffer] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [NormBuffer] {
        &mut self.norms
    }

    /// Parameters followed by running statistics, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> =
            self.names.iter().cloned().zip(self.values.iter().cloned()).collect();
        for n in &self.norms {
            let c = n.mean.len();
            out.push((format!("{}.running_mean", n.name), Tensor::new(vec![c], n.mean.clone()).expect("c > 0")));
            out.push((format!("{}.running_var", n.name), Tensor::new(vec![c], n.var.clone()).expect("c > 0")));
        }
        out
    }

    /// Overwrites every parameter and running statistic from `entries`.
    /// Every one must be present with a matching shape; extra entries are
    /// returned to the caller.
    pub fn load_named(&mut self, entries: Vec<(String, Tensor)>) -> Result<Vec<(String, Tensor)>> {
        let mut map: HashMap<String, Tensor> = entries.into_iter().collect();
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let t = map.remove(name).ok_or_else(|| Error::Contract(format!("checkpoint lacks parameter {name}")))?;
            if t.shape() != value.shape() {
                return Err(Error::Contract(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    value.shape()
                )));
            }
            *value = t;
        }
        for n in &mut self.norms {
            for (suffix, dst) in [("running_mean", &mut n.mean), ("running_var", &mut n.var)] {
                let key = format!("{}.{suffix}", n.name);
                let t = map.remove(&key).ok_or_else(|| Error::Contract(format!("checkpoint lacks {key}")))?;
                if t.numel() != dst.len() {
                    return Err(Error::Contract(format!("{key}: wrong length {}", t.numel())));
                }
                *dst = t.into_data();
            }
        }
        let mut rest: Vec<(String, Tensor)> = map.into_iter().collect();
        rest.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(rest)
    }
}

/// Registers parameters under a name prefix with seeded initialization.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Builder { store, rng, prefix: String::new() }
    }

    /// Runs `f` with `name.` appended to the prefix.
    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Builder<'_>) -> T) -> T {
        let saved = self.prefix.clone();
        self.prefix = format!("{}{}.", self.prefix, name);
        let out = f(self);
        self.prefix = saved;
        out
    }

    fn full(&self, name: &str) -> String {
        format!("{}{}", self.prefix, name)
    }

    /// Normal entries with standard deviation `std`.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        });
        let full = self.full(name);
        self.store.add(&full, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let full = self.full(name);
        self.store.add(&full, Tensor::full(shape, value))
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        let full = self.full(name);
        self.store.add(&full, t)
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize, bias: bool) -> Linear {
        self.linear_scaled(name, d_in, d_out, bias, 1.0)
    }

    /// Linear layer whose He-style initialization is multiplied by `gain`.
    pub fn linear_scaled(&mut self, name: &str, d_in: usize, d_out: usize, bias: bool, gain: f64) -> Linear {
        self.scope(name, |b| Linear {
            weight: b.normal("weight", &[d_in, d_out], gain * (2.0 / d_in as f64).sqrt()),
            bias: bias.then(|| b.constant("bias", &[d_out], 0.0)),
        })
    }

    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize, bias: bool) -> Conv {
        self.conv_scaled(name, c_in, c_out, kernel, stride, bias, 1.0)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv_scaled(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        gain: f64,
    ) -> Conv {
        let fan_in = (c_in * kernel * kernel) as f64;
        self.scope(name, |b| Conv {
            weight: b.normal("weight", &[c_out, c_in, kernel, kernel], gain * (2.0 / fan_in).sqrt()),
            bias: bias.then(|| b.constant("bias", &[c_out, 1, 1], 0.0)),
            stride,
        })
    }

    pub fn norm(&mut self, name: &str, channels: usize) -> Norm {
        self.scope(name, |b| {
            let gamma = b.constant("gamma", &[channels], 1.0);
            let beta = b.constant("beta", &[channels], 0.0);
            let full = b.prefix.trim_end_matches('.').to_string();
            Norm { gamma, beta, buffer: b.store.add_norm_buffer(&full, channels) }
        })
    }

    pub fn conv_norm(&mut self, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> ConvNorm {
        self.scope(name, |b| ConvNorm { conv: b.conv("conv", c_in, c_out, kernel, stride, false), norm: b.norm("bn", c_out) })
    }
}

/// One forward evaluation: a graph, the parameters bound into it, and the
/// normalization statistics it measured.
pub struct Ctx<'a> {
    pub g: Graph,
    pub store: &'a ParamStore,
    pub train: bool,
    bound: Vec<Option<Var>>,
    measured: Vec<Option<ChannelStats>>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, train: bool) -> Self {
        Ctx {
            g: Graph::new(),
            store,
            train,
            bound: vec![None; store.len()],
            measured: vec![None; store.norms().len()],
        }
    }

    /// The graph leaf for a parameter, created on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.leaf(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Gradient for every parameter; unused parameters get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.store
            .ids()
            .map(|id| match self.bound[id.0].and_then(|v| grads.get(v)) {
                Some(t) => t.clone(),
                None => Tensor::zeros(self.store.get(id).shape()),
            })
            .collect()
    }

    /// Statistics measured by training-mode normalization layers.
    pub fn take_measured(&mut self) -> Vec<(NormId, ChannelStats)> {
        self.measured.iter_mut().enumerate().filter_map(|(i, s)| s.take().map(|s| (NormId(i), s))).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// `x[T, d_in] -> [T, d_out]`.
    pub fn apply(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let y = ctx.g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = ctx.p(b);
                Ok(ctx.g.add(y, b)?)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
}

impl Conv {
    /// `x[C, H, W] -> [C_out, H', W']`, same padding.
    pub fn apply(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let y = ctx.g.conv2d(x, w, self.stride)?;
        match self.bias {
            Some(b) => {
                let b = ctx.p(b);
                Ok(ctx.g.add(y, b)?)
            }
            None => Ok(y),
        }
    }
}

/// Per-channel standardization with learnable scale and offset.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub buffer: NormId,
}

impl Norm {
    /// Channels lie along `axis`. Training uses the statistics of `x` itself;
    /// inference uses the running estimates.
    pub fn apply(&self, ctx: &mut Ctx, x: Var, axis: usize) -> Result<Var> {
        let (gamma, beta) = (ctx.p(self.gamma), ctx.p(self.beta));
        if ctx.train {
            let (y, stats) = ctx.g.batch_norm(x, gamma, beta, axis, NormStats::Batch, BN_EPS)?;
            ctx.measured[self.buffer.0] = stats;
            Ok(y)
        } else {
            let buf = ctx.store.norm(self.buffer);
            let (y, _) = ctx.g.batch_norm(
                x,
                gamma,
                beta,
                axis,
                NormStats::Running { mean: &buf.mean, var: &buf.var },
                BN_EPS,
            )?;
            Ok(y)
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvNorm {
    pub conv: Conv,
    pub norm: Norm,
}

impl ConvNorm {
    pub fn apply(&self, ctx: &mut Ctx, x: Var, act: bool) -> Result<Var> {
        let y = self.conv.apply(ctx, x)?;
        let y = self.norm.apply(ctx, y, 0)?;
        Ok(if act { ctx.g.silu(y) } else { y })
    }
}

/// `[C, H, W]` feature map to `[H*W, C]` tokens.
pub fn to_tokens(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    Ok(g.transpose(flat)?)
}

/// `[H*W, C]` tokens back to a `[C, H, W]` feature map.
pub fn from_tokens(g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
    let t = g.transpose(x)?;
    let c = g.shape(t)[0];
    Ok(g.reshape(t, &[c, h, w])?)
}
