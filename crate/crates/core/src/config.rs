//! Run configuration and its flat `key = value` file format.
//!
//! Keys are prefixed by section: `scene.`, `model.`, `loss.`, `train.`.
//! Blank lines and `#` comments are ignored; unknown keys are errors.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::panoptic::Vocabulary;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub things: Vec<String>,
    pub stuff: Vec<String>,
    pub min_things: usize,
    pub max_things: usize,
    /// Smallest and largest shape radius in pixels.
    pub min_size: usize,
    pub max_size: usize,
    pub occlusion: bool,
    /// Peak amplitude of the uniform per-pixel noise, in 8-bit levels.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            things: vec!["circle".into(), "square".into(), "triangle".into()],
            stuff: vec!["sky".into(), "ground".into()],
            min_things: 1,
            max_things: 4,
            min_size: 7,
            max_size: 12,
            occlusion: false,
            noise: 12.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(&self.things, &self.stuff)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum P2pMode {
    Axial,
    Conv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Number of prediction slots N.
    pub slots: usize,
    /// Mask feature channels D.
    pub mask_dim: usize,
    /// Decoder stack count L.
    pub decoder_stacks: usize,
    pub p2p: P2pMode,
    pub stem_channels: [usize; 2],
    pub stage8_channels: usize,
    pub stage16_channels: usize,
    pub memory_dim: usize,
    /// Decoder channels at stride 8 and stride 4.
    pub decoder_channels: [usize; 2],
    pub heads: usize,
    /// Dual-path blocks at stride 16.
    pub transformer_blocks: usize,
    /// Also place one dual-path block at stride 8.
    pub stride8_transformer: bool,
    pub p2m: bool,
    pub m2m: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 64,
            width: 64,
            num_classes: 5,
            slots: 16,
            mask_dim: 32,
            decoder_stacks: 0,
            p2p: P2pMode::Conv,
            stem_channels: [8, 16],
            stage8_channels: 32,
            stage16_channels: 64,
            memory_dim: 64,
            decoder_channels: [32, 16],
            heads: 8,
            transformer_blocks: 2,
            stride8_transformer: false,
            p2m: true,
            m2m: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.height % 16 != 0 || self.width % 16 != 0 || self.height == 0 || self.width == 0 {
            return bad(format!("input {}x{} must be a positive multiple of 16", self.height, self.width));
        }
        if self.slots == 0 || self.mask_dim == 0 || self.num_classes == 0 || self.heads == 0 {
            return bad("slots, mask_dim, num_classes and heads must be positive".into());
        }
        if self.decoder_stacks > 2 {
            return bad(format!("decoder_stacks {} not in 0..=2", self.decoder_stacks));
        }
        let channels = [
            self.stem_channels[0],
            self.stem_channels[1],
            self.stage8_channels,
            self.stage16_channels,
            self.memory_dim,
            self.decoder_channels[0],
            self.decoder_channels[1],
        ];
        if channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        let mut attn = vec![self.stage16_channels, self.memory_dim];
        if self.stride8_transformer {
            attn.push(self.stage8_channels);
        }
        if let Some(c) = attn.iter().find(|&&c| c % self.heads != 0) {
            return bad(format!("attention width {c} is not divisible by {} heads", self.heads));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimilarityMode {
    /// Class probability times Dice.
    Product,
    /// Mean of class probability and Dice, trained with unweighted terms.
    Sum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub pq_weight: f64,
    pub instdis_weight: f64,
    pub maskid_weight: f64,
    pub semantic_weight: f64,
    pub tau: f64,
    pub similarity: SimilarityMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.75,
            pq_weight: 3.0,
            instdis_weight: 1.0,
            maskid_weight: 0.3,
            semantic_weight: 1.0,
            tau: 0.3,
            similarity: SimilarityMode::Product,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.pq_weight, self.instdis_weight, self.maskid_weight, self.semantic_weight];
        if w.iter().any(|&v| !(v >= 0.0)) || !(0.0..=1.0).contains(&self.alpha) || !(self.tau > 0.0) {
            return Err(Error::InvalidConfig(
                "loss weights must be >= 0, alpha in [0,1] and tau > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub poly_power: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Learning-rate multiplier for parameters under `encoder.`.
    pub backbone_lr_mult: f64,
    pub bn_momentum: f64,
    pub checkpoint_every: usize,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            poly_power: 0.9,
            steps: 1000,
            batch_size: 8,
            seed: 0,
            weight_decay: 1e-4,
            backbone_lr_mult: 0.1,
            bn_momentum: 0.9,
            checkpoint_every: 500,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("steps and batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::InvalidConfig("bn_momentum must lie in [0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Config {
    /// The model configuration with the class count taken from the scene.
    pub fn resolved_model(&self) -> ModelConfig {
        ModelConfig { num_classes: self.scene.things.len() + self.scene.stuff.len(), ..self.model.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.resolved_model().validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        let s = &self.scene;
        if s.things.len() + s.stuff.len() == 0 {
            return Err(Error::InvalidConfig("no classes configured".into()));
        }
        if s.min_things > s.max_things || s.min_size == 0 || s.min_size > s.max_size {
            return Err(Error::InvalidConfig("scene thing count or size range is empty".into()));
        }
        if s.max_things > 0 && s.things.is_empty() {
            return Err(Error::InvalidConfig("max_things > 0 but no thing classes".into()));
        }
        if s.max_things + s.stuff.len() > self.model.slots {
            return Err(Error::InvalidConfig(format!(
                "up to {} segments per scene exceed {} slots",
                s.max_things + s.stuff.len(),
                self.model.slots
            )));
        }
        if (s.height, s.width) != (self.model.height, self.model.width) {
            return Err(Error::InvalidConfig("scene and model sizes differ".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |detail: String| Error::Config { line: n + 1, detail };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            cfg.set(key.trim(), value.trim()).map_err(err)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let (s, m, l, t) = (&mut self.scene, &mut self.model, &mut self.loss, &mut self.train);
        match key {
            "scene.height" => s.height = num(v)?,
            "scene.width" => s.width = num(v)?,
            "scene.things" => s.things = list(v),
            "scene.stuff" => s.stuff = list(v),
            "scene.min_things" => s.min_things = num(v)?,
            "scene.max_things" => s.max_things = num(v)?,
            "scene.min_size" => s.min_size = num(v)?,
            "scene.max_size" => s.max_size = num(v)?,
            "scene.occlusion" => s.occlusion = flag(v)?,
            "scene.noise" => s.noise = num(v)?,
            "scene.seed" => s.seed = num(v)?,
            "model.height" => m.height = num(v)?,
            "model.width" => m.width = num(v)?,
            "model.num_classes" => m.num_classes = num(v)?,
            "model.slots" => m.slots = num(v)?,
            "model.mask_dim" => m.mask_dim = num(v)?,
            "model.decoder_stacks" => m.decoder_stacks = num(v)?,
            "model.p2p" => {
                m.p2p = match v {
                    "axial" => P2pMode::Axial,
                    "conv" => P2pMode::Conv,
                    _ => return Err(format!("model.p2p must be axial or conv, got `{v}`")),
                }
            }
            "model.stem_channels" => m.stem_channels = pair(v)?,
            "model.stage8_channels" => m.stage8_channels = num(v)?,
            "model.stage16_channels" => m.stage16_channels = num(v)?,
            "model.memory_dim" => m.memory_dim = num(v)?,
            "model.decoder_channels" => m.decoder_channels = pair(v)?,
            "model.heads" => m.heads = num(v)?,
            "model.transformer_blocks" => m.transformer_blocks = num(v)?,
            "model.stride8_transformer" => m.stride8_transformer = flag(v)?,
            "model.p2m" => m.p2m = flag(v)?,
            "model.m2m" => m.m2m = flag(v)?,
            "loss.alpha" => l.alpha = num(v)?,
            "loss.pq_weight" => l.pq_weight = num(v)?,
            "loss.instdis_weight" => l.instdis_weight = num(v)?,
            "loss.maskid_weight" => l.maskid_weight = num(v)?,
            "loss.semantic_weight" => l.semantic_weight = num(v)?,
            "loss.tau" => l.tau = num(v)?,
            "loss.similarity" => {
                l.similarity = match v {
                    "product" => SimilarityMode::Product,
                    "sum" => SimilarityMode::Sum,
                    _ => return Err(format!("loss.similarity must be product or sum, got `{v}`")),
                }
            }
            "train.lr" => t.lr = num(v)?,
            "train.poly_power" => t.poly_power = num(v)?,
            "train.steps" => t.steps = num(v)?,
            "train.batch_size" => t.batch_size = num(v)?,
            "train.seed" => t.seed = num(v)?,
            "train.weight_decay" => t.weight_decay = num(v)?,
            "train.backbone_lr_mult" => t.backbone_lr_mult = num(v)?,
            "train.bn_momentum" => t.bn_momentum = num(v)?,
            "train.checkpoint_every" => t.checkpoint_every = num(v)?,
            "train.eval_every" => t.eval_every = num(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Serializes every key; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let (s, m, l, t) = (&self.scene, &self.model, &self.loss, &self.train);
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(o, "{k} = {v}");
        };
        kv("scene.height", s.height.to_string());
        kv("scene.width", s.width.to_string());
        kv("scene.things", s.things.join(","));
        kv("scene.stuff", s.stuff.join(","));
        kv("scene.min_things", s.min_things.to_string());
        kv("scene.max_things", s.max_things.to_string());
        kv("scene.min_size", s.min_size.to_string());
        kv("scene.max_size", s.max_size.to_string());
        kv("scene.occlusion", s.occlusion.to_string());
        kv("scene.noise", fmt_f(s.noise));
        kv("scene.seed", s.seed.to_string());
        kv("model.height", m.height.to_string());
        kv("model.width", m.width.to_string());
        kv("model.num_classes", m.num_classes.to_string());
        kv("model.slots", m.slots.to_string());
        kv("model.mask_dim", m.mask_dim.to_string());
        kv("model.decoder_stacks", m.decoder_stacks.to_string());
        kv("model.p2p", if m.p2p == P2pMode::Axial { "axial" } else { "conv" }.into());
        kv("model.stem_channels", format!("{},{}", m.stem_channels[0], m.stem_channels[1]));
        kv("model.stage8_channels", m.stage8_channels.to_string());
        kv("model.stage16_channels", m.stage16_channels.to_string());
        kv("model.memory_dim", m.memory_dim.to_string());
        kv("model.decoder_channels", format!("{},{}", m.decoder_channels[0], m.decoder_channels[1]));
        kv("model.heads", m.heads.to_string());
        kv("model.transformer_blocks", m.transformer_blocks.to_string());
        kv("model.stride8_transformer", m.stride8_transformer.to_string());
        kv("model.p2m", m.p2m.to_string());
        kv("model.m2m", m.m2m.to_string());
        kv("loss.alpha", fmt_f(l.alpha));
        kv("loss.pq_weight", fmt_f(l.pq_weight));
        kv("loss.instdis_weight", fmt_f(l.instdis_weight));
        kv("loss.maskid_weight", fmt_f(l.maskid_weight));
        kv("loss.semantic_weight", fmt_f(l.semantic_weight));
        kv("loss.tau", fmt_f(l.tau));
        kv("loss.similarity", if l.similarity == SimilarityMode::Product { "product" } else { "sum" }.into());
        kv("train.lr", fmt_f(t.lr));
        kv("train.poly_power", fmt_f(t.poly_power));
        kv("train.steps", t.steps.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.weight_decay", fmt_f(t.weight_decay));
        kv("train.backbone_lr_mult", fmt_f(t.backbone_lr_mult));
        kv("train.bn_momentum", fmt_f(t.bn_momentum));
        kv("train.checkpoint_every", t.checkpoint_every.to_string());
        kv("train.eval_every", t.eval_every.to_string());
        o
    }
}

/// Shortest representation that parses back to the same `f64`.
fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| format!("bad value `{v}`: {e}"))
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got `{v}`")),
    }
}

fn list(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn pair(v: &str) -> std::result::Result<[usize; 2], String> {
    let items = list(v);
    match items.as_slice() {
        [a, b] => Ok([num(a)?, num(b)?]),
        _ => Err(format!("expected two comma-separated values, got `{v}`")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = Config::default();
        cfg.loss.tau = 0.1 + 0.2;
        cfg.model.p2p = P2pMode::Axial;
        cfg.scene.things = vec!["a".into(), "b".into()];
        assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_errors() {
        let cfg = Config::parse("# header\n\ntrain.steps = 7  # trailing\n").unwrap();
        assert_eq!(cfg.train.steps, 7);
        match Config::parse("train.steps = 1\nmodel.bogus = 3\n") {
            Err(Error::Config { line: 2, detail }) => assert!(detail.contains("model.bogus")),
            other => panic!("{other:?}"),
        }
        assert!(Config::parse("train.steps 3").is_err());
        assert!(Config::parse("model.p2p = dense").is_err());
    }

    #[test]
    fn defaults_validate() {
        Config::default().validate().unwrap();
    }
}
