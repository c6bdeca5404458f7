//! Attention between the pixel path and the memory path.
//!
//! Pixel features are token matrices `[H*W, C]` in row-major pixel order,
//! with the spatial size passed alongside. Memory is `[N, C_m]`. Every
//! attention function returns its output and the attention weights, shaped
//! `[heads, queries, keys]` (axial attention folds rows or columns into the
//! leading axis).

use masktx_tensor::{Graph, Tensor, Var};

use crate::config::P2pMode;
use crate::error::{Error, Result};
use crate::nn::{from_tokens, to_tokens, Builder, Conv, ConvNorm, Ctx, Linear, Norm};

/// Channel plan of one attention layer. `d_q` and `d_v` are per head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub d_q: usize,
    pub d_v: usize,
    /// Channels of the query input.
    pub d_in: usize,
    /// Channels of the key/value input.
    pub d_kv: usize,
    pub d_out: usize,
}

impl AttentionConfig {
    /// Per-head widths split evenly from `d_in`.
    pub fn even(heads: usize, d_in: usize, d_kv: usize, d_out: usize) -> Self {
        AttentionConfig { heads, d_q: (d_in / heads).max(1), d_v: (d_in / heads).max(1), d_in, d_kv, d_out }
    }
}

/// Query, key, value and output projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub cfg: AttentionConfig,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl Attention {
    pub fn build(b: &mut Builder, name: &str, cfg: AttentionConfig) -> Self {
        let (hq, hv) = (cfg.heads * cfg.d_q, cfg.heads * cfg.d_v);
        b.scope(name, |b| Attention {
            cfg,
            q: b.linear("q", cfg.d_in, hq, false),
            k: b.linear("k", cfg.d_kv, hq, false),
            v: b.linear("v", cfg.d_kv, hv, false),
            out: b.linear_scaled("out", hv, cfg.d_out, false, 0.5),
        })
    }
}

/// Memory-side attention over the concatenation of pixel and memory keys.
#[derive(Clone, Debug)]
pub struct JointAttention {
    pub cfg: AttentionConfig,
    pub q: Linear,
    pub k_pixel: Linear,
    pub v_pixel: Linear,
    pub k_memory: Linear,
    pub v_memory: Linear,
    pub out: Linear,
}

impl JointAttention {
    /// `cfg.d_in` is the memory width, `cfg.d_kv` the pixel width.
    pub fn build(b: &mut Builder, name: &str, cfg: AttentionConfig) -> Self {
        let (hq, hv) = (cfg.heads * cfg.d_q, cfg.heads * cfg.d_v);
        b.scope(name, |b| JointAttention {
            cfg,
            q: b.linear("q", cfg.d_in, hq, false),
            k_pixel: b.linear("k_pixel", cfg.d_kv, hq, false),
            v_pixel: b.linear("v_pixel", cfg.d_kv, hv, false),
            k_memory: b.linear("k_memory", cfg.d_in, hq, false),
            v_memory: b.linear("v_memory", cfg.d_in, hv, false),
            out: b.linear_scaled("out", hv, cfg.d_out, false, 0.5),
        })
    }
}

/// Scaled dot-product attention with heads.
///
/// `q[T, heads*d_q]`, `k[S, heads*d_q]`, `v[S, heads*d_v]`. `key_bias`, of
/// length `S`, is added to every score row (use `-inf` to mask a key).
/// Returns `([T, heads*d_v], weights[heads, T, S])`.
pub fn multi_head(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    key_bias: Option<&[f64]>,
) -> Result<(Var, Var)> {
    let (t, s) = (g.shape(q)[0], g.shape(k)[0]);
    if s == 0 {
        return Err(Error::Contract("attention over zero keys".into()));
    }
    let d_q = g.shape(q)[1] / heads;
    let d_v = g.shape(v)[1] / heads;
    let qh = g.reshape(q, &[t, heads, d_q])?;
    let qh = g.permute(qh, &[1, 0, 2])?;
    let kh = g.reshape(k, &[s, heads, d_q])?;
    let kh = g.permute(kh, &[1, 2, 0])?;
    let vh = g.reshape(v, &[s, heads, d_v])?;
    let vh = g.permute(vh, &[1, 0, 2])?;
    let scores = g.batch_matmul(qh, kh)?;
    let mut scores = g.scale(scores, 1.0 / (d_q as f64).sqrt());
    if let Some(bias) = key_bias {
        if bias.len() != s {
            return Err(Error::Contract(format!("key bias has length {}, expected {s}", bias.len())));
        }
        let b = g.constant(Tensor::new(vec![1, 1, s], bias.to_vec())?);
        scores = g.add(scores, b)?;
    }
    let weights = g.softmax(scores, 2)?;
    let out = g.batch_matmul(weights, vh)?;
    let out = g.permute(out, &[1, 0, 2])?;
    let out = g.reshape(out, &[t, heads * d_v])?;
    Ok((out, weights))
}

/// Pixel-to-memory attention: every pixel reads from all memory slots.
pub fn p2m_attention(ctx: &mut Ctx, attn: &Attention, x_p: Var, x_m: Var) -> Result<(Var, Var)> {
    if ctx.g.shape(x_m)[0] == 0 {
        return Err(Error::Contract("memory has no slots".into()));
    }
    let q = attn.q.apply(ctx, x_p)?;
    let k = attn.k.apply(ctx, x_m)?;
    let v = attn.v.apply(ctx, x_m)?;
    let (o, w) = multi_head(&mut ctx.g, q, k, v, attn.cfg.heads, None)?;
    Ok((attn.out.apply(ctx, o)?, w))
}

/// Memory-side attention with one softmax over `H*W + N` keys: pixel keys
/// first, then memory keys. With `include_memory` false only pixel keys are
/// attended (no memory self-attention).
pub fn m2p_m2m_attention(
    ctx: &mut Ctx,
    attn: &JointAttention,
    x_p: Var,
    x_m: Var,
    key_bias: Option<&[f64]>,
    include_memory: bool,
) -> Result<(Var, Var)> {
    let q = attn.q.apply(ctx, x_m)?;
    let kp = attn.k_pixel.apply(ctx, x_p)?;
    let vp = attn.v_pixel.apply(ctx, x_p)?;
    let (k, v) = if include_memory {
        let km = attn.k_memory.apply(ctx, x_m)?;
        let vm = attn.v_memory.apply(ctx, x_m)?;
        (ctx.g.concat(&[kp, km], 0)?, ctx.g.concat(&[vp, vm], 0)?)
    } else {
        (kp, vp)
    };
    let (o, w) = multi_head(&mut ctx.g, q, k, v, attn.cfg.heads, key_bias)?;
    Ok((attn.out.apply(ctx, o)?, w))
}

/// Plain self-attention among all tokens.
pub fn dense_self_attention(ctx: &mut Ctx, attn: &Attention, x: Var) -> Result<(Var, Var)> {
    let q = attn.q.apply(ctx, x)?;
    let k = attn.k.apply(ctx, x)?;
    let v = attn.v.apply(ctx, x)?;
    let (o, w) = multi_head(&mut ctx.g, q, k, v, attn.cfg.heads, None)?;
    Ok((attn.out.apply(ctx, o)?, w))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Attend within each column.
    Height,
    /// Attend within each row.
    Width,
}

/// Self-attention restricted to pixels sharing a row (width) or a column
/// (height). Weights are `[lines*heads, L, L]`.
pub fn axial_attention(ctx: &mut Ctx, attn: &Attention, x_p: Var, h: usize, w: usize, axis: Axis) -> Result<(Var, Var)> {
    let heads = attn.cfg.heads;
    let q = attn.q.apply(ctx, x_p)?;
    let k = attn.k.apply(ctx, x_p)?;
    let v = attn.v.apply(ctx, x_p)?;
    let g = &mut ctx.g;
    let d_q = g.shape(q)[1] / heads;
    let d_v = g.shape(v)[1] / heads;
    // [H, W, heads, d] -> [lines, heads, len, d]
    let (lines, len, perm) = match axis {
        Axis::Width => (h, w, [0, 2, 1, 3]),
        Axis::Height => (w, h, [1, 2, 0, 3]),
    };
    let split = |g: &mut Graph, x: Var, d: usize| -> Result<Var> {
        let x = g.reshape(x, &[h, w, heads, d])?;
        let x = g.permute(x, &perm)?;
        Ok(g.reshape(x, &[lines * heads, len, d])?)
    };
    let qh = split(g, q, d_q)?;
    let kh = split(g, k, d_q)?;
    let kh = g.permute(kh, &[0, 2, 1])?;
    let vh = split(g, v, d_v)?;
    let scores = g.batch_matmul(qh, kh)?;
    let scores = g.scale(scores, 1.0 / (d_q as f64).sqrt());
    let weights = g.softmax(scores, 2)?;
    let o = g.batch_matmul(weights, vh)?;
    let o = g.reshape(o, &[lines, heads, len, d_v])?;
    let back = match axis {
        Axis::Width => [0, 2, 1, 3],
        Axis::Height => [2, 0, 1, 3],
    };
    let o = g.permute(o, &back)?;
    let o = g.reshape(o, &[h * w, heads * d_v])?;
    Ok((attn.out.apply(ctx, o)?, weights))
}

/// Two linear layers with a 2x expansion and a SiLU between them.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

impl Ffn {
    pub fn build(b: &mut Builder, name: &str, d: usize) -> Self {
        b.scope(name, |b| Ffn { up: b.linear("up", d, 2 * d, true), down: b.linear_scaled("down", 2 * d, d, true, 0.5) })
    }

    pub fn apply(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.up.apply(ctx, x)?;
        let y = ctx.g.silu(y);
        self.down.apply(ctx, y)
    }
}

#[derive(Clone, Debug)]
pub enum PixelMixer {
    Axial { height: Attention, width: Attention },
    Conv { first: ConvNorm, second: Conv },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub pixel_dim: usize,
    pub memory_dim: usize,
    pub heads: usize,
    pub p2p: P2pMode,
    pub p2m: bool,
    pub m2m: bool,
}

/// One dual-path block.
///
/// Pixel path: `x_p + P2M(n(x_p), n(x_m)) + P2P(n(x_p))`, then a residual FFN.
/// Memory path: `x_m + M2P/M2M(n(x_m), n(x_p))`, then a residual FFN. `n` is
/// per-channel standardization applied before each sublayer.
#[derive(Clone, Debug)]
pub struct DualPathBlock {
    pub cfg: BlockConfig,
    pub pixel_norm: Norm,
    pub memory_norm: Norm,
    pub p2m: Option<Attention>,
    pub p2p: PixelMixer,
    pub m2pm: JointAttention,
    pub pixel_ffn_norm: Norm,
    pub pixel_ffn: Ffn,
    pub memory_ffn_norm: Norm,
    pub memory_ffn: Ffn,
}

impl DualPathBlock {
    pub fn build(b: &mut Builder, name: &str, cfg: BlockConfig) -> Self {
        let (cp, cm, heads) = (cfg.pixel_dim, cfg.memory_dim, cfg.heads);
        b.scope(name, |b| DualPathBlock {
            cfg,
            pixel_norm: b.norm("pixel_norm", cp),
            memory_norm: b.norm("memory_norm", cm),
            p2m: cfg.p2m.then(|| Attention::build(b, "p2m", AttentionConfig::even(heads, cp, cm, cp))),
            p2p: match cfg.p2p {
                P2pMode::Axial => PixelMixer::Axial {
                    height: Attention::build(b, "axial_height", AttentionConfig::even(heads, cp, cp, cp)),
                    width: Attention::build(b, "axial_width", AttentionConfig::even(heads, cp, cp, cp)),
                },
                P2pMode::Conv => PixelMixer::Conv {
                    first: b.conv_norm("p2p_conv1", cp, cp, 3, 1),
                    second: b.conv_scaled("p2p_conv2", cp, cp, 3, 1, false, 0.5),
                },
            },
            m2pm: JointAttention::build(b, "m2pm", AttentionConfig::even(heads, cm, cp, cm)),
            pixel_ffn_norm: b.norm("pixel_ffn_norm", cp),
            pixel_ffn: Ffn::build(b, "pixel_ffn", cp),
            memory_ffn_norm: b.norm("memory_ffn_norm", cm),
            memory_ffn: Ffn::build(b, "memory_ffn", cm),
        })
    }

    /// `x_p[h*w, C_p]`, `x_m[N, C_m]` to updated tensors of the same shapes.
    pub fn forward(&self, ctx: &mut Ctx, x_p: Var, x_m: Var, h: usize, w: usize) -> Result<(Var, Var)> {
        let p = self.pixel_norm.apply(ctx, x_p, 1)?;
        let m = self.memory_norm.apply(ctx, x_m, 1)?;

        let mixed = match &self.p2p {
            PixelMixer::Axial { height, width } => {
                let (a, _) = axial_attention(ctx, height, p, h, w, Axis::Height)?;
                axial_attention(ctx, width, a, h, w, Axis::Width)?.0
            }
            PixelMixer::Conv { first, second } => {
                let map = from_tokens(&mut ctx.g, p, h, w)?;
                let y = first.apply(ctx, map, true)?;
                let y = second.apply(ctx, y)?;
                to_tokens(&mut ctx.g, y)?
            }
        };
        let mut xp = ctx.g.add(x_p, mixed)?;
        if let Some(p2m) = &self.p2m {
            let (fb, _) = p2m_attention(ctx, p2m, p, m)?;
            xp = ctx.g.add(xp, fb)?;
        }
        let (upd, _) = m2p_m2m_attention(ctx, &self.m2pm, p, m, None, self.cfg.m2m)?;
        let xm = ctx.g.add(x_m, upd)?;

        let pn = self.pixel_ffn_norm.apply(ctx, xp, 1)?;
        let pf = self.pixel_ffn.apply(ctx, pn)?;
        let xp = ctx.g.add(xp, pf)?;
        let mn = self.memory_ffn_norm.apply(ctx, xm, 1)?;
        let mf = self.memory_ffn.apply(ctx, mn)?;
        let xm = ctx.g.add(xm, mf)?;
        Ok((xp, xm))
    }
}
