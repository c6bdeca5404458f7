//! PQ-style set loss and the auxiliary losses.
//!
//! Mask probabilities enter as `[N, P]` at full resolution (`P = H*W`).
//! Instance discrimination and the semantic loss work on the stride-4 grid
//! against ground truth downsampled by block mode.

use masktx_tensor::{Graph, Tensor, Var};

use crate::config::{LossConfig, SimilarityMode};
use crate::error::{Error, Result};
use crate::matching::{combine, dice_table, hungarian_match, MatchAssignment, DICE_EPS};
use crate::panoptic::Panoptic;

/// Output stride of the mask, embedding and semantic heads.
pub const HEAD_STRIDE: usize = 4;

/// Ground truth prepared for the losses.
#[derive(Clone, Debug)]
pub struct Target {
    pub classes: Vec<usize>,
    /// Binary masks `[K][P]` at full resolution.
    pub masks: Vec<Vec<f64>>,
    pub areas: Vec<f64>,
    /// Ground-truth index owning each full-resolution pixel.
    pub owner: Vec<Option<usize>>,
    /// Ground-truth index owning each stride-4 pixel.
    pub owner_low: Vec<Option<usize>>,
    /// Class of each stride-4 pixel.
    pub semantic_low: Vec<Option<usize>>,
}

impl Target {
    pub fn new(gt: &Panoptic) -> Self {
        let index = |id: u32| gt.segments.iter().position(|s| s.id == id);
        let owner: Vec<Option<usize>> = gt.ids.iter().map(|&id| index(id)).collect();
        let mut masks = vec![vec![0.0; gt.ids.len()]; gt.segments.len()];
        for (p, o) in owner.iter().enumerate() {
            if let Some(k) = *o {
                masks[k][p] = 1.0;
            }
        }
        let areas = masks.iter().map(|m| m.iter().sum()).collect();
        let low = gt.downsample_mode(HEAD_STRIDE);
        let owner_low: Vec<Option<usize>> = low.ids.iter().map(|&id| index(id)).collect();
        let classes: Vec<usize> = gt.segments.iter().map(|s| s.class).collect();
        let semantic_low = owner_low.iter().map(|o| o.map(|k| classes[k])).collect();
        Target { classes, masks, areas, owner, owner_low, semantic_low }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Similarity table `K x N` between ground truth and predictions.
pub fn similarity_table(target: &Target, masks: &Tensor, probs: &Tensor, mode: SimilarityMode) -> Result<Vec<Vec<f64>>> {
    let (n, p) = (masks.shape()[0], masks.shape()[1]);
    let c1 = probs.shape()[1];
    let pred: Vec<Vec<f64>> = (0..n).map(|i| masks.data()[i * p..(i + 1) * p].to_vec()).collect();
    let dices = dice_table(&target.masks, &pred)?;
    Ok(dices
        .iter()
        .enumerate()
        .map(|(k, row)| {
            row.iter().enumerate().map(|(j, &d)| combine(probs.data()[j * c1 + target.classes[k]], d, mode)).collect()
        })
        .collect())
}

/// Matches ground truth to slots using current prediction values.
pub fn match_predictions(target: &Target, masks: &Tensor, probs: &Tensor, mode: SimilarityMode) -> Result<MatchAssignment> {
    hungarian_match(&similarity_table(target, masks, probs, mode)?)
}

/// Constant weights of the positive term. When supplied they replace the
/// stop-gradient values, which turns the loss into an ordinary function of
/// the predictions (used to check gradients numerically).
#[derive(Clone, Debug, PartialEq)]
pub struct PosWeights {
    /// Weight of the `-dice` term of each pair.
    pub dice_term: Vec<f64>,
    /// Weight of the `-log p` term of each pair.
    pub class_term: Vec<f64>,
}

/// The two halves of the positive term.
pub struct PosTerms {
    /// `sum w_dice * (-dice)`.
    pub dice_term: Var,
    /// `sum w_class * (-log p)`.
    pub class_term: Var,
    pub dice: Var,
    pub prob: Var,
}

/// Matched Dice values and class probabilities as `[K]` vectors.
fn matched_factors(g: &mut Graph, masks: Var, probs: Var, target: &Target, assign: &MatchAssignment) -> Result<(Var, Var)> {
    if assign.pairs.is_empty() {
        return Err(Error::Contract("positive loss needs at least one matched pair".into()));
    }
    let p = g.shape(masks)[1];
    let c1 = g.shape(probs)[1];
    let k = assign.pairs.len();
    let slots: Vec<usize> = assign.pairs.iter().map(|&(_, s)| s).collect();
    let mut gt = Vec::with_capacity(k * p);
    let mut denom_const = Vec::with_capacity(k);
    for &(i, _) in &assign.pairs {
        if target.masks[i].len() != p {
            return Err(Error::Dimension(format!("target mask has {} pixels, prediction {p}", target.masks[i].len())));
        }
        gt.extend_from_slice(&target.masks[i]);
        denom_const.push(target.areas[i] + DICE_EPS);
    }
    let sel = g.index_select(masks, &slots)?;
    let m = g.constant(Tensor::new(vec![k, p], gt)?);
    let prod = g.mul(sel, m)?;
    let inter = g.sum_axis(prod, 1)?;
    let sums = g.sum_axis(sel, 1)?;
    let dc = g.constant(Tensor::new(vec![k, 1], denom_const)?);
    let denom = g.add(sums, dc)?;
    let ratio = g.div(inter, denom)?;
    let dice = g.scale(ratio, 2.0);
    let dice = g.reshape(dice, &[k])?;
    let idx: Vec<usize> = assign.pairs.iter().map(|&(i, s)| s * c1 + target.classes[i]).collect();
    let prob = g.take(probs, &idx)?;
    Ok((dice, prob))
}

pub fn pq_pos_terms(
    g: &mut Graph,
    masks: Var,
    probs: Var,
    target: &Target,
    assign: &MatchAssignment,
    mode: SimilarityMode,
    weights: Option<&PosWeights>,
) -> Result<PosTerms> {
    let (dice, prob) = matched_factors(g, masks, probs, target, assign)?;
    let k = assign.pairs.len();
    let (w_dice, w_class) = match (weights, mode) {
        (Some(w), _) => {
            let a = g.constant(Tensor::new(vec![k], w.dice_term.clone())?);
            let b = g.constant(Tensor::new(vec![k], w.class_term.clone())?);
            (a, b)
        }
        (None, SimilarityMode::Product) => (g.stop_gradient(prob), g.stop_gradient(dice)),
        (None, SimilarityMode::Sum) => {
            let ones = g.constant(Tensor::ones(&[k]));
            (ones, ones)
        }
    };
    let neg_dice = g.neg(dice);
    let t1 = g.mul(w_dice, neg_dice)?;
    let dice_term = g.sum_all(t1);
    let logp = g.log(prob);
    let neg_log = g.neg(logp);
    let t2 = g.mul(w_class, neg_log)?;
    let class_term = g.sum_all(t2);
    Ok(PosTerms { dice_term, class_term, dice, prob })
}

/// `sum sg(p) * (-dice) + sum sg(dice) * (-log p)` over matched pairs.
pub fn pq_loss_pos(
    g: &mut Graph,
    masks: Var,
    probs: Var,
    target: &Target,
    assign: &MatchAssignment,
    mode: SimilarityMode,
    weights: Option<&PosWeights>,
) -> Result<Var> {
    let t = pq_pos_terms(g, masks, probs, target, assign, mode, weights)?;
    Ok(g.add(t.dice_term, t.class_term)?)
}

/// The stop-gradient weights at the current prediction values.
pub fn frozen_pos_weights(g: &Graph, terms: &PosTerms) -> PosWeights {
    PosWeights { dice_term: g.value(terms.prob).data().to_vec(), class_term: g.value(terms.dice).data().to_vec() }
}

/// `sum -log p(no object)` over unmatched slots.
pub fn pq_loss_neg(g: &mut Graph, probs: Var, negatives: &[usize]) -> Result<Var> {
    if negatives.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let c1 = g.shape(probs)[1];
    let idx: Vec<usize> = negatives.iter().map(|&s| s * c1 + c1 - 1).collect();
    let p = g.take(probs, &idx)?;
    let lp = g.log(p);
    let s = g.sum_all(lp);
    Ok(g.neg(s))
}

pub struct PqLoss {
    pub total: Var,
    pub pos: Var,
    pub neg: Var,
}

/// `pq_weight * (alpha * pos + (1 - alpha) * neg) / N`.
pub fn pq_loss(
    g: &mut Graph,
    masks: Var,
    probs: Var,
    target: &Target,
    assign: &MatchAssignment,
    cfg: &LossConfig,
) -> Result<PqLoss> {
    let n = g.shape(masks)[0] as f64;
    let pos = pq_loss_pos(g, masks, probs, target, assign, cfg.similarity, None)?;
    let neg = pq_loss_neg(g, probs, &assign.negatives)?;
    let a = g.scale(pos, cfg.alpha);
    let b = g.scale(neg, 1.0 - cfg.alpha);
    let s = g.add(a, b)?;
    let total = g.scale(s, cfg.pq_weight / n);
    Ok(PqLoss { total, pos, neg })
}

/// Contrastive loss pulling each annotated pixel embedding towards its own
/// mask embedding. `embed[D, P]` must have unit-norm columns; `owner` gives
/// the ground-truth index of each pixel. Masks without pixels are skipped.
pub fn instance_discrimination_loss(g: &mut Graph, embed: Var, owner: &[Option<usize>], tau: f64) -> Result<Var> {
    let p = g.shape(embed)[1];
    if owner.len() != p {
        return Err(Error::Dimension(format!("{} owners for {p} pixels", owner.len())));
    }
    let mut present: Vec<usize> = owner.iter().flatten().copied().collect();
    present.sort_unstable();
    present.dedup();
    if present.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let k = present.len();
    let slot = |o: usize| present.binary_search(&o).expect("present");
    let mut areas = vec![0.0; k];
    for o in owner.iter().flatten() {
        areas[slot(*o)] += 1.0;
    }
    let mut avg = vec![0.0; p * k];
    for (px, o) in owner.iter().enumerate() {
        if let Some(o) = o {
            let j = slot(*o);
            avg[px * k + j] = 1.0 / areas[j];
        }
    }
    let avg = g.constant(Tensor::new(vec![p, k], avg)?);
    let means = g.matmul(embed, avg)?;
    let sq = g.mul(means, means)?;
    let ss = g.sum_axis(sq, 0)?;
    let norm = g.sqrt(ss);
    let t = g.div(means, norm)?;
    let tt = g.transpose(t)?;
    let logits = g.matmul(tt, embed)?;
    let logits = g.scale(logits, 1.0 / tau);
    let ls = g.log_softmax(logits, 0)?;
    let idx: Vec<usize> = owner.iter().enumerate().filter_map(|(px, o)| o.map(|o| slot(o) * p + px)).collect();
    let picked = g.take(ls, &idx)?;
    let m = g.mean_all(picked);
    Ok(g.neg(m))
}

/// Mean over annotated pixels of `-log m_hat[slot, pixel]`, where the slot is
/// the one matched to the pixel's ground-truth mask.
pub fn mask_id_cross_entropy(g: &mut Graph, masks: Var, owner: &[Option<usize>], assign: &MatchAssignment) -> Result<Var> {
    let p = g.shape(masks)[1];
    if owner.len() != p {
        return Err(Error::Dimension(format!("{} owners for {p} pixels", owner.len())));
    }
    let mut slot_of = std::collections::HashMap::new();
    for &(i, s) in &assign.pairs {
        slot_of.insert(i, s);
    }
    let idx: Vec<usize> =
        owner.iter().enumerate().filter_map(|(px, o)| o.and_then(|o| slot_of.get(&o)).map(|s| s * p + px)).collect();
    if idx.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let picked = g.take(masks, &idx)?;
    let lp = g.log(picked);
    let m = g.mean_all(lp);
    Ok(g.neg(m))
}

/// Per-pixel cross-entropy of `logits[C, P]` against `labels`, averaged over
/// labeled pixels.
pub fn semantic_loss(g: &mut Graph, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
    let (c, p) = (g.shape(logits)[0], g.shape(logits)[1]);
    if labels.len() != p {
        return Err(Error::Dimension(format!("{} labels for {p} pixels", labels.len())));
    }
    let mut idx = Vec::new();
    for (px, l) in labels.iter().enumerate() {
        if let Some(l) = *l {
            if l >= c {
                return Err(Error::Contract(format!("label {l} outside {c} classes")));
            }
            idx.push(l * p + px);
        }
    }
    if idx.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let ls = g.log_softmax(logits, 0)?;
    let picked = g.take(ls, &idx)?;
    let m = g.mean_all(picked);
    Ok(g.neg(m))
}

/// Model outputs consumed by the losses.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs {
    /// `[N, H*W]` mask probabilities at full resolution.
    pub masks: Var,
    /// `[N, C+1]` class distributions, no-object last.
    pub probs: Var,
    /// `[D, P/16]` unit-norm pixel embeddings on the stride-4 grid.
    pub embed: Var,
    /// `[C, P/16]` semantic logits on the stride-4 grid.
    pub semantic: Var,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub pq_pos: f64,
    pub pq_neg: f64,
    pub instdis: f64,
    pub maskid: f64,
    pub semantic: f64,
}

impl LossValues {
    pub fn is_finite(&self) -> bool {
        [self.total, self.pq_pos, self.pq_neg, self.instdis, self.maskid, self.semantic].iter().all(|v| v.is_finite())
    }
}

impl std::fmt::Display for LossValues {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "total={} pq_pos={} pq_neg={} instdis={} maskid={} semantic={}",
            self.total, self.pq_pos, self.pq_neg, self.instdis, self.maskid, self.semantic
        )
    }
}

pub struct TotalLoss {
    pub total: Var,
    pub values: LossValues,
    pub assignment: MatchAssignment,
}

/// Matches, then sums the PQ-style loss and the weighted auxiliary losses.
/// Auxiliary terms with zero weight are not built.
pub fn total_loss(g: &mut Graph, out: LossInputs, target: &Target, cfg: &LossConfig) -> Result<TotalLoss> {
    let assign = match_predictions(target, g.value(out.masks), g.value(out.probs), cfg.similarity)?;
    let pq = pq_loss(g, out.masks, out.probs, target, &assign, cfg)?;
    let mut total = pq.total;
    let mut values = LossValues {
        pq_pos: g.value(pq.pos).data()[0],
        pq_neg: g.value(pq.neg).data()[0],
        ..Default::default()
    };
    if cfg.instdis_weight > 0.0 {
        let l = instance_discrimination_loss(g, out.embed, &target.owner_low, cfg.tau)?;
        values.instdis = g.value(l).data()[0];
        let w = g.scale(l, cfg.instdis_weight);
        total = g.add(total, w)?;
    }
    if cfg.maskid_weight > 0.0 {
        let l = mask_id_cross_entropy(g, out.masks, &target.owner, &assign)?;
        values.maskid = g.value(l).data()[0];
        let w = g.scale(l, cfg.maskid_weight);
        total = g.add(total, w)?;
    }
    if cfg.semantic_weight > 0.0 {
        let l = semantic_loss(g, out.semantic, &target.semantic_low)?;
        values.semantic = g.value(l).data()[0];
        let w = g.scale(l, cfg.semantic_weight);
        total = g.add(total, w)?;
    }
    values.total = g.value(total).data()[0];
    Ok(TotalLoss { total, values, assignment: assign })
}
