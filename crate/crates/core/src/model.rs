//! The toy network: convolutional encoder to stride 16, dual-path blocks
//! with a learnable memory, a stacked decoder back to stride 4, and the
//! mask, class and semantic heads.

use masktx_tensor::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, P2pMode};
use crate::error::{Error, Result};
use crate::losses::{LossInputs, HEAD_STRIDE};
use crate::nn::{from_tokens, to_tokens, Builder, Conv, ConvNorm, Ctx, Linear, Norm, ParamId, ParamStore};
use crate::transformer::{BlockConfig, DualPathBlock};

/// Parameters whose names start with this prefix form the backbone.
pub const ENCODER_PREFIX: &str = "encoder.";

/// Wide basic residual block with a strided first convolution.
#[derive(Clone, Debug)]
struct ResBlock {
    conv1: ConvNorm,
    conv2: ConvNorm,
    shortcut: ConvNorm,
}

impl ResBlock {
    fn build(b: &mut Builder, name: &str, c_in: usize, c_out: usize) -> Self {
        b.scope(name, |b| ResBlock {
            conv1: b.conv_norm("conv1", c_in, c_out, 3, 2),
            conv2: b.conv_norm("conv2", c_out, c_out, 3, 1),
            shortcut: b.conv_norm("shortcut", c_in, c_out, 1, 2),
        })
    }

    fn apply(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.conv1.apply(ctx, x, true)?;
        let y = self.conv2.apply(ctx, y, false)?;
        let s = self.shortcut.apply(ctx, x, false)?;
        let y = ctx.g.add(y, s)?;
        Ok(ctx.g.silu(y))
    }
}

/// Resolution levels of the decoder: 0 = stride 4, 1 = stride 8, 2 = stride 16.
fn decoder_plan(stacks: usize) -> Vec<usize> {
    let mut plan = vec![1, 0];
    for _ in 0..stacks {
        plan.extend([1, 2, 1, 0]);
    }
    plan
}

#[derive(Clone, Debug)]
struct DecoderStage {
    level: usize,
    from_level: usize,
    input_proj: Option<ConvNorm>,
    skip_proj: Vec<Option<ConvNorm>>,
    fuse: ConvNorm,
}

#[derive(Clone, Debug)]
struct Heads {
    g_conv: ConvNorm,
    g_out: Conv,
    f_hidden: Linear,
    f_out: Linear,
    f_norm: Norm,
    mask_norm: Norm,
    class_hidden: Linear,
    class_out: Linear,
    sem_conv: ConvNorm,
    sem_out: Conv,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    stem: [ConvNorm; 2],
    stage8: ResBlock,
    stage16: ResBlock,
    block8: Option<DualPathBlock>,
    blocks16: Vec<DualPathBlock>,
    memory: ParamId,
    decoder: Vec<DecoderStage>,
    heads: Heads,
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    /// `[N, H/4, W/4]` mask probabilities (softmax over slots).
    pub masks_low: Var,
    /// `[N, H*W]` mask probabilities bilinearly upsampled to full size.
    pub masks: Var,
    /// `[N, C+1]` class distributions, no-object last.
    pub probs: Var,
    /// `[C, H/4 * W/4]` semantic logits.
    pub semantic: Var,
    /// `[D, H/4 * W/4]` decoder feature g.
    pub g: Var,
    /// `g` with unit-norm columns.
    pub embed: Var,
    /// `[N, D]` transformer feature f.
    pub f: Var,
}

impl Outputs {
    pub fn loss_inputs(&self) -> LossInputs {
        LossInputs { masks: self.masks, probs: self.probs, embed: self.embed, semantic: self.semantic }
    }
}

/// Plain values of a forward pass.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub masks: Tensor,
    pub probs: Tensor,
}

impl Model {
    /// Deterministic initialization from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut params = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut params, &mut rng);
        let [s0, s1] = cfg.stem_channels;
        let (c8, c16, cm) = (cfg.stage8_channels, cfg.stage16_channels, cfg.memory_dim);
        let (stem, stage8, stage16) = b.scope("encoder", |b| {
            let stem = [b.conv_norm("stem1", 3, s0, 3, 2), b.conv_norm("stem2", s0, s1, 3, 2)];
            (stem, ResBlock::build(b, "stage8", s1, c8), ResBlock::build(b, "stage16", c8, c16))
        });
        let block_cfg = |pixel_dim| BlockConfig {
            pixel_dim,
            memory_dim: cm,
            heads: cfg.heads,
            p2p: cfg.p2p,
            p2m: cfg.p2m,
            m2m: cfg.m2m,
        };
        let (memory, block8, blocks16) = b.scope("transformer", |b| {
            let memory = b.normal("memory", &[cfg.slots, cm], 1.0);
            let block8 = cfg.stride8_transformer.then(|| DualPathBlock::build(b, "stride8", block_cfg(c8)));
            let blocks16 = (0..cfg.transformer_blocks)
                .map(|i| DualPathBlock::build(b, &format!("stride16_{i}"), block_cfg(c16)))
                .collect();
            (memory, block8, blocks16)
        });
        let level_ch = [cfg.decoder_channels[1], cfg.decoder_channels[0], c16];
        let decoder = b.scope("decoder", |b| {
            let mut history: [Vec<usize>; 3] = [vec![s1], vec![c8], vec![c16]];
            let mut prev = 2;
            let mut stages = Vec::new();
            for (i, level) in decoder_plan(cfg.decoder_stacks).into_iter().enumerate() {
                let stage = b.scope(&format!("stage{i}"), |b| {
                    let c = level_ch[level];
                    let input_proj = (level_ch[prev] != c).then(|| b.conv_norm("input_proj", level_ch[prev], c, 1, 1));
                    let skips = &history[level][history[level].len().saturating_sub(2)..];
                    let skip_proj = skips
                        .iter()
                        .enumerate()
                        .map(|(j, &sc)| (sc != c).then(|| b.conv_norm(&format!("skip{j}"), sc, c, 1, 1)))
                        .collect();
                    DecoderStage { level, from_level: prev, input_proj, skip_proj, fuse: b.conv_norm("fuse", c, c, 3, 1) }
                });
                history[level].push(level_ch[level]);
                prev = level;
                stages.push(stage);
            }
            stages
        });
        let (c4, d, classes) = (level_ch[0], cfg.mask_dim, cfg.num_classes);
        let heads = b.scope("heads", |b| Heads {
            g_conv: b.conv_norm("g_conv", c4, c4, 3, 1),
            g_out: b.conv("g_out", c4, d, 1, 1, true),
            f_hidden: b.linear("f_hidden", cm, cm, true),
            f_out: b.linear("f_out", cm, d, true),
            f_norm: b.norm("f_norm", d),
            mask_norm: b.norm("mask_norm", 1),
            class_hidden: b.linear("class_hidden", cm, cm, true),
            class_out: b.linear_scaled("class_out", cm, classes + 1, true, 0.5),
            sem_conv: b.conv_norm("sem_conv", c4, c4, 3, 1),
            sem_out: b.conv_scaled("sem_out", c4, classes, 1, 1, true, 0.5),
        });
        Ok(Model { cfg, params, stem, stage8, stage16, block8, blocks16, memory, decoder, heads })
    }

    pub fn memory_param(&self) -> ParamId {
        self.memory
    }

    /// Runs the network on `image[3, H, W]`.
    pub fn forward(&self, ctx: &mut Ctx, image: &Tensor) -> Result<Outputs> {
        let cfg = &self.cfg;
        if image.shape() != [3, cfg.height, cfg.width] {
            return Err(Error::Dimension(format!(
                "image shape {:?}, model expects [3, {}, {}]",
                image.shape(),
                cfg.height,
                cfg.width
            )));
        }
        let (h4, w4) = (cfg.height / 4, cfg.width / 4);
        let x = ctx.g.constant(image.clone());
        let x = self.stem[0].apply(ctx, x, true)?;
        let s4 = self.stem[1].apply(ctx, x, true)?;
        let mut s8 = self.stage8.apply(ctx, s4)?;
        let mut mem = ctx.p(self.memory);
        if let Some(block) = &self.block8 {
            let t = to_tokens(&mut ctx.g, s8)?;
            let (t, m) = block.forward(ctx, t, mem, h4 / 2, w4 / 2)?;
            mem = m;
            s8 = from_tokens(&mut ctx.g, t, h4 / 2, w4 / 2)?;
        }
        let mut s16 = self.stage16.apply(ctx, s8)?;
        if !self.blocks16.is_empty() {
            let mut t = to_tokens(&mut ctx.g, s16)?;
            for block in &self.blocks16 {
                (t, mem) = block.forward(ctx, t, mem, h4 / 4, w4 / 4)?;
            }
            s16 = from_tokens(&mut ctx.g, t, h4 / 4, w4 / 4)?;
        }

        let sizes = [(h4, w4), (h4 / 2, w4 / 2), (h4 / 4, w4 / 4)];
        let mut history: [Vec<Var>; 3] = [vec![s4], vec![s8], vec![s16]];
        let mut prev = s16;
        let mut first4 = None;
        for stage in &self.decoder {
            let (h, w) = sizes[stage.level];
            let upsampling = stage.level < stage.from_level;
            let mut x = prev;
            if upsampling {
                if let Some(p) = &stage.input_proj {
                    x = p.apply(ctx, x, false)?;
                }
                x = ctx.g.bilinear_resize(x, h, w)?;
            } else {
                x = ctx.g.bilinear_resize(x, h, w)?;
                if let Some(p) = &stage.input_proj {
                    x = p.apply(ctx, x, false)?;
                }
            }
            let skips = history[stage.level][history[stage.level].len().saturating_sub(2)..].to_vec();
            for (s, proj) in skips.into_iter().zip(&stage.skip_proj) {
                let s = match proj {
                    Some(p) => p.apply(ctx, s, false)?,
                    None => s,
                };
                x = ctx.g.add(x, s)?;
            }
            let y = stage.fuse.apply(ctx, x, true)?;
            history[stage.level].push(y);
            if stage.level == 0 && first4.is_none() {
                first4 = Some(y);
            }
            prev = y;
        }
        let top4 = prev;
        let first4 = first4.expect("decoder plan ends at stride 4");
        self.heads(ctx, mem, top4, first4)
    }

    fn heads(&self, ctx: &mut Ctx, mem: Var, top4: Var, first4: Var) -> Result<Outputs> {
        let hd = &self.heads;
        let (n, c) = (self.cfg.slots, self.cfg.num_classes);
        let (h4, w4) = (self.cfg.height / HEAD_STRIDE, self.cfg.width / HEAD_STRIDE);
        let p4 = h4 * w4;

        let gx = hd.g_conv.apply(ctx, top4, true)?;
        let gx = hd.g_out.apply(ctx, gx)?;
        let d = ctx.g.shape(gx)[0];
        let g = ctx.g.reshape(gx, &[d, p4])?;
        let embed = l2_normalize_columns(&mut ctx.g, g)?;

        let fh = hd.f_hidden.apply(ctx, mem)?;
        let fh = ctx.g.silu(fh);
        let f = hd.f_out.apply(ctx, fh)?;
        let f = hd.f_norm.apply(ctx, f, 1)?;

        let masks_low = mask_head(ctx, &hd.mask_norm, f, g)?;
        let masks_low = ctx.g.reshape(masks_low, &[n, h4, w4])?;
        let up = ctx.g.bilinear_resize(masks_low, self.cfg.height, self.cfg.width)?;
        let masks = ctx.g.reshape(up, &[n, self.cfg.height * self.cfg.width])?;

        let ch = hd.class_hidden.apply(ctx, mem)?;
        let ch = ctx.g.silu(ch);
        let logits = hd.class_out.apply(ctx, ch)?;
        let probs = ctx.g.softmax(logits, 1)?;

        let s = hd.sem_conv.apply(ctx, first4, true)?;
        let s = hd.sem_out.apply(ctx, s)?;
        let semantic = ctx.g.reshape(s, &[c, p4])?;

        Ok(Outputs { masks_low, masks, probs, semantic, g, embed, f })
    }

    /// Inference-mode forward returning plain values.
    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        let mut ctx = Ctx::new(&self.params, false);
        let out = self.forward(&mut ctx, image)?;
        Ok(Prediction { masks: ctx.g.value(out.masks).clone(), probs: ctx.g.value(out.probs).clone() })
    }
}

/// `softmax_N(norm(f . g))` with a single-channel standardization of the
/// product; returns `[N, P]`.
pub fn mask_head(ctx: &mut Ctx, norm: &Norm, f: Var, g: Var) -> Result<Var> {
    let (fd, gd) = (ctx.g.shape(f)[1], ctx.g.shape(g)[0]);
    if fd != gd {
        return Err(Error::Dimension(format!("mask head: f has {fd} channels, g has {gd}")));
    }
    let n = ctx.g.shape(f)[0];
    let p = ctx.g.shape(g)[1];
    let logits = ctx.g.matmul(f, g)?;
    let flat = ctx.g.reshape(logits, &[n * p, 1])?;
    let normed = norm.apply(ctx, flat, 1)?;
    let normed = ctx.g.reshape(normed, &[n, p])?;
    Ok(ctx.g.softmax(normed, 0)?)
}

/// Divides every column of `x[D, P]` by its Euclidean norm.
pub fn l2_normalize_columns(g: &mut masktx_tensor::Graph, x: Var) -> Result<Var> {
    let sq = g.mul(x, x)?;
    let ss = g.sum_axis(sq, 0)?;
    let n = g.sqrt(ss);
    Ok(g.div(x, n)?)
}

/// Number of trainable scalars for `cfg`, from the layer plan:
///
/// - conv `k x k`, `a -> b`: `a*b*k*k` (+`b` with bias); normalization: `2c`
/// - linear `a -> b`: `a*b` (+`b` with bias)
/// - encoder: two stem conv-norms and two residual blocks (two 3x3 and one
///   1x1 conv-norm each)
/// - dual-path block (pixel width `p`, memory width `m`): four norms, P2M
///   (`p*p + 2*m*p + p*p`), P2P (two axial attentions of `4*p*p`, or a 3x3
///   conv-norm plus a 3x3 conv), joint attention (`m*m + 2*p*m + 3*m*m`) and
///   two FFNs (`4*d*d + 3*d` each)
/// - memory `N*m`; decoder stages; heads.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    let conv = |a: usize, b: usize, k: usize, bias: bool| a * b * k * k + if bias { b } else { 0 };
    let norm = |c: usize| 2 * c;
    let conv_norm = |a: usize, b: usize, k: usize| conv(a, b, k, false) + norm(b);
    let linear = |a: usize, b: usize, bias: bool| a * b + if bias { b } else { 0 };
    let per_head = |d: usize| (d / cfg.heads).max(1) * cfg.heads;
    let attention = |d_in: usize, d_kv: usize, d_out: usize| {
        let w = per_head(d_in);
        d_in * w + 2 * d_kv * w + w * d_out
    };
    let ffn = |d: usize| linear(d, 2 * d, true) + linear(2 * d, d, true);
    let [s0, s1] = cfg.stem_channels;
    let (c8, c16, m) = (cfg.stage8_channels, cfg.stage16_channels, cfg.memory_dim);
    let res = |a: usize, b: usize| conv_norm(a, b, 3) + conv_norm(b, b, 3) + conv_norm(a, b, 1);
    let block = |p: usize| {
        let p2m = if cfg.p2m { attention(p, m, p) } else { 0 };
        let p2p = match cfg.p2p {
            P2pMode::Axial => 2 * attention(p, p, p),
            P2pMode::Conv => conv_norm(p, p, 3) + conv(p, p, 3, false),
        };
        let wm = per_head(m);
        let joint = m * wm + 2 * p * wm + 2 * m * wm + wm * m;
        2 * norm(p) + 2 * norm(m) + p2m + p2p + joint + ffn(p) + ffn(m)
    };

    let mut total = conv_norm(3, s0, 3) + conv_norm(s0, s1, 3) + res(s1, c8) + res(c8, c16);
    total += cfg.slots * m;
    if cfg.stride8_transformer {
        total += block(c8);
    }
    total += cfg.transformer_blocks * block(c16);

    let level_ch = [cfg.decoder_channels[1], cfg.decoder_channels[0], c16];
    let mut history: [Vec<usize>; 3] = [vec![s1], vec![c8], vec![c16]];
    let mut prev = 2;
    for level in decoder_plan(cfg.decoder_stacks) {
        let c = level_ch[level];
        if level_ch[prev] != c {
            total += conv_norm(level_ch[prev], c, 1);
        }
        for &sc in &history[level][history[level].len().saturating_sub(2)..] {
            if sc != c {
                total += conv_norm(sc, c, 1);
            }
        }
        total += conv_norm(c, c, 3);
        history[level].push(c);
        prev = level;
    }

    let (c4, d, k) = (level_ch[0], cfg.mask_dim, cfg.num_classes);
    total += conv_norm(c4, c4, 3) + conv(c4, d, 1, true);
    total += linear(m, m, true) + linear(m, d, true) + norm(d) + norm(1);
    total += linear(m, m, true) + linear(m, k + 1, true);
    total += conv_norm(c4, c4, 3) + conv(c4, k, 1, true);
    total
}
