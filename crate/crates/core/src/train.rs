//! Optimization: poly schedule, Adam, per-example graphs accumulated over a
//! batch, checkpoints and logs.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use masktx_tensor::checkpoint::{read_checkpoint, write_checkpoint};
use masktx_tensor::Tensor;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::dataset::{Dataset, Example};
use crate::error::{Error, Result};
use crate::inference::{panoptic_inference, Thresholds};
use crate::losses::{total_loss, LossValues};
use crate::model::{Model, ENCODER_PREFIX};
use crate::nn::{Ctx, NormId};
use crate::pq::{PqAccumulator, PqReport};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub const LOG_HEADER: &str = "step,lr,total,pq_pos,pq_neg,instdis,maskid,semantic";
pub const CHECKPOINT_FILE: &str = "checkpoint.maxw";

/// `base * (1 - step/total)^power`, zero from `total` on.
pub fn poly_lr(step: usize, total: usize, base: f64, power: f64) -> f64 {
    if step >= total {
        return 0.0;
    }
    base * (1.0 - step as f64 / total as f64).powf(power)
}

/// Dataset indices of the batch used at `step`; a pure function of
/// `(seed, step)`.
pub fn batch_indices(seed: u64, step: usize, len: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    if batch <= len {
        sample(&mut rng, len, batch).into_vec()
    } else {
        (0..batch).map(|_| rng.random_range(0..len)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

/// Gradients and statistics from one batch.
pub struct BatchResult {
    pub grads: Vec<Tensor>,
    pub values: LossValues,
    norm_stats: Vec<(NormId, Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub values: LossValues,
}

impl StepReport {
    pub fn csv_line(&self) -> String {
        let v = &self.values;
        format!(
            "{},{:e},{},{},{},{},{},{}",
            self.step, self.lr, v.total, v.pq_pos, v.pq_neg, v.instdis, v.maskid, v.semantic
        )
    }
}

pub struct Trainer {
    pub cfg: Config,
    pub model: Model,
    pub adam: AdamState,
    /// Number of updates applied so far.
    pub step: usize,
}

impl Trainer {
    pub fn new(cfg: Config) -> Result<Trainer> {
        cfg.validate()?;
        let model = Model::new(cfg.resolved_model(), cfg.train.seed)?;
        let zeros: Vec<Tensor> = model.params.ids().map(|id| Tensor::zeros(model.params.get(id).shape())).collect();
        Ok(Trainer { cfg, model, adam: AdamState { m: zeros.clone(), v: zeros }, step: 0 })
    }

    pub fn lr(&self) -> f64 {
        let t = &self.cfg.train;
        poly_lr(self.step, t.steps, t.lr, t.poly_power)
    }

    /// Mean loss gradients over `batch` plus the normalization statistics.
    pub fn compute_batch(&self, batch: &[&Example]) -> Result<BatchResult> {
        let store = &self.model.params;
        let mut grads: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        let mut values = LossValues::default();
        let mut stats: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; store.norms().len()];
        let scale = 1.0 / batch.len() as f64;
        for ex in batch {
            let mut ctx = Ctx::new(store, true);
            let out = self.model.forward(&mut ctx, &ex.image)?;
            let bad: Vec<&str> = [("masks", out.masks), ("probs", out.probs), ("embed", out.embed), ("semantic", out.semantic)]
                .into_iter()
                .filter(|(_, v)| !ctx.g.value(*v).all_finite())
                .map(|(name, _)| name)
                .collect();
            if !bad.is_empty() {
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    components: format!("non-finite network outputs: {} ({})", bad.join(", "), ex.stem),
                });
            }
            let loss = total_loss(&mut ctx.g, out.loss_inputs(), &ex.target, &self.cfg.loss)?;
            if !loss.values.is_finite() {
                return Err(Error::NonFiniteLoss { step: self.step, components: format!("{} ({})", loss.values, ex.stem) });
            }
            let g = ctx.g.backward(loss.total)?;
            for (acc, gi) in grads.iter_mut().zip(ctx.param_grads(&g)) {
                acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += scale * b);
            }
            for (id, s) in ctx.take_measured() {
                let slot = stats[id.index()].get_or_insert_with(|| (vec![0.0; s.mean.len()], vec![0.0; s.var.len()]));
                slot.0.iter_mut().zip(&s.mean).for_each(|(a, b)| *a += scale * b);
                slot.1.iter_mut().zip(&s.var).for_each(|(a, b)| *a += scale * b);
            }
            let v = &loss.values;
            values.total += scale * v.total;
            values.pq_pos += scale * v.pq_pos;
            values.pq_neg += scale * v.pq_neg;
            values.instdis += scale * v.instdis;
            values.maskid += scale * v.maskid;
            values.semantic += scale * v.semantic;
        }
        let norm_stats = stats
            .into_iter()
            .enumerate()
            .filter_map(|(i, s)| s.map(|(m, v)| (NormId::from_index(i), m, v)))
            .collect();
        Ok(BatchResult { grads, values, norm_stats })
    }

    /// Applies one Adam update and running-statistics update.
    pub fn apply(&mut self, batch: BatchResult) -> StepReport {
        let lr = self.lr();
        let t = &self.cfg.train;
        let k = (self.step + 1) as i32;
        let (c1, c2) = (1.0 - ADAM_BETA1.powi(k), 1.0 - ADAM_BETA2.powi(k));
        let ids: Vec<_> = self.model.params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let mult = if self.model.params.name(id).starts_with(ENCODER_PREFIX) { t.backbone_lr_mult } else { 1.0 };
            let step_lr = lr * mult;
            let decay = if self.model.params.get(id).rank() >= 2 { t.weight_decay } else { 0.0 };
            let g = batch.grads[i].data();
            let m = self.adam.m[i].data_mut();
            for (mj, gj) in m.iter_mut().zip(g) {
                *mj = ADAM_BETA1 * *mj + (1.0 - ADAM_BETA1) * gj;
            }
            let v = self.adam.v[i].data_mut();
            for (vj, gj) in v.iter_mut().zip(g) {
                *vj = ADAM_BETA2 * *vj + (1.0 - ADAM_BETA2) * gj * gj;
            }
            let (m, v) = (self.adam.m[i].data(), self.adam.v[i].data());
            let p = self.model.params.get_mut(id).data_mut();
            for j in 0..p.len() {
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                p[j] -= step_lr * (update + decay * p[j]);
            }
        }
        let mom = t.bn_momentum;
        for (id, mean, var) in batch.norm_stats {
            let buf = &mut self.model.params.norms_mut()[id.index()];
            buf.mean.iter_mut().zip(&mean).for_each(|(r, b)| *r = mom * *r + (1.0 - mom) * b);
            buf.var.iter_mut().zip(&var).for_each(|(r, b)| *r = mom * *r + (1.0 - mom) * b);
        }
        self.step += 1;
        StepReport { step: self.step, lr, values: batch.values }
    }

    /// One optimization step on the batch chosen for the current step.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepReport> {
        if data.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        let idx = batch_indices(self.cfg.train.seed, self.step, data.len(), self.cfg.train.batch_size);
        let batch: Vec<&Example> = idx.iter().map(|&i| &data.examples[i]).collect();
        let result = self.compute_batch(&batch)?;
        Ok(self.apply(result))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = self.model.params.named_tensors();
        for (i, id) in self.model.params.ids().enumerate() {
            let name = self.model.params.name(id);
            entries.push((format!("optimizer.m.{name}"), self.adam.m[i].clone()));
            entries.push((format!("optimizer.v.{name}"), self.adam.v[i].clone()));
        }
        entries.push(("optimizer.step".into(), Tensor::scalar(self.step as f64)));
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        write_checkpoint(std::io::BufWriter::new(file), &entries)?;
        let manifest = manifest_path(path);
        std::fs::write(&manifest, self.cfg.to_text()).map_err(|e| Error::io(&manifest, e))
    }

    /// Restores parameters, running statistics, optimizer moments and the
    /// step counter.
    pub fn load(path: &Path) -> Result<Trainer> {
        let (cfg, mut model, rest) = load_parts(path)?;
        let mut rest: std::collections::HashMap<String, Tensor> = rest.into_iter().collect();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for id in model.params.ids() {
            let name = model.params.name(id).to_string();
            let take = |rest: &mut std::collections::HashMap<String, Tensor>, key: String| {
                rest.remove(&key).ok_or_else(|| Error::Contract(format!("checkpoint lacks {key}")))
            };
            m.push(take(&mut rest, format!("optimizer.m.{name}"))?);
            v.push(take(&mut rest, format!("optimizer.v.{name}"))?);
        }
        let step = rest
            .remove("optimizer.step")
            .and_then(|t| t.item())
            .ok_or_else(|| Error::Contract("checkpoint lacks optimizer.step".into()))? as usize;
        model.cfg = cfg.resolved_model();
        Ok(Trainer { cfg, model, adam: AdamState { m, v }, step })
    }
}

pub fn manifest_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

fn load_parts(path: &Path) -> Result<(Config, Model, Vec<(String, Tensor)>)> {
    let manifest = manifest_path(path);
    let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let cfg = Config::parse(&text)?;
    let mut model = Model::new(cfg.resolved_model(), cfg.train.seed)?;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let entries = read_checkpoint(std::io::BufReader::new(file))?;
    let rest = model.params.load_named(entries)?;
    Ok((cfg, model, rest))
}

/// Loads a model (and its configuration) for inference.
pub fn load_model(path: &Path) -> Result<(Config, Model)> {
    let (cfg, model, _) = load_parts(path)?;
    Ok((cfg, model))
}

/// Runs inference over a dataset and accumulates PQ.
pub fn evaluate(model: &Model, data: &Dataset, t: &Thresholds) -> Result<PqReport> {
    let mut acc = PqAccumulator::new(data.vocab.clone());
    for ex in &data.examples {
        let pred = model.predict(&ex.image)?;
        let map = panoptic_inference(&pred.masks, &pred.probs, ex.gt.height, ex.gt.width, &data.vocab, t)?;
        acc.add(&map, &ex.gt)?;
    }
    Ok(acc.report())
}

/// Training driver with CSV logs and periodic checkpoints in `out`.
pub struct Run<'a> {
    pub trainer: Trainer,
    pub train: &'a Dataset,
    pub val: Option<&'a Dataset>,
    pub out: Option<PathBuf>,
}

impl Run<'_> {
    /// Trains until the configured step count, calling `progress` after
    /// every update.
    pub fn run(&mut self, mut progress: impl FnMut(&StepReport, Option<&PqReport>)) -> Result<()> {
        let total = self.trainer.cfg.train.steps;
        let mut log = match &self.out {
            Some(dir) => Some(open_log(dir, "train_log.csv", LOG_HEADER, self.trainer.step)?),
            None => None,
        };
        let mut eval_log = match (&self.out, self.val) {
            (Some(dir), Some(_)) => Some(open_log(dir, "eval_log.csv", "step,PQ,SQ,RQ,PQ_things,PQ_stuff", self.trainer.step)?),
            _ => None,
        };
        while self.trainer.step < total {
            let report = self.trainer.train_step(self.train)?;
            if let Some((path, f)) = &mut log {
                writeln!(f, "{}", report.csv_line()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            let tc = &self.trainer.cfg.train;
            let mut pq = None;
            if let Some(val) = self.val {
                if tc.eval_every > 0 && (report.step % tc.eval_every == 0 || report.step == total) {
                    let r = evaluate(&self.trainer.model, val, &Thresholds::default())?;
                    if let Some((path, f)) = &mut eval_log {
                        writeln!(f, "{},{},{},{},{},{}", report.step, r.all.pq, r.all.sq, r.all.rq, r.things.pq, r.stuff.pq)
                            .map_err(|e| Error::io(path.as_path(), e))?;
                    }
                    pq = Some(r);
                }
            }
            if let Some(dir) = &self.out {
                if (tc.checkpoint_every > 0 && report.step % tc.checkpoint_every == 0) || report.step == total {
                    self.trainer.save(&dir.join(CHECKPOINT_FILE))?;
                }
            }
            progress(&report, pq.as_ref());
        }
        Ok(())
    }
}

/// Opens a CSV log, truncating it when starting fresh and otherwise dropping
/// rows past `resume_step`.
fn open_log(dir: &Path, name: &str, header: &str, resume_step: usize) -> Result<(PathBuf, std::fs::File)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    let mut text = String::new();
    let _ = writeln!(text, "{header}");
    if resume_step > 0 {
        if let Ok(old) = std::fs::read_to_string(&path) {
            for line in old.lines().skip(1) {
                let step: usize = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);
                if step <= resume_step {
                    let _ = writeln!(text, "{line}");
                }
            }
        }
    }
    std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    let f = std::fs::OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))?;
    Ok((path, f))
}
