//! Panoptic quality.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::panoptic::{Panoptic, Vocabulary, VOID};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassTally {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub iou_sum: f64,
}

impl ClassTally {
    pub fn present(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }

    pub fn sq(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.iou_sum / self.tp as f64
        }
    }

    pub fn rq(&self) -> f64 {
        let d = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if d == 0.0 {
            0.0
        } else {
            self.tp as f64 / d
        }
    }

    pub fn pq(&self) -> f64 {
        let d = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if d == 0.0 {
            0.0
        } else {
            self.iou_sum / d
        }
    }
}

/// Accumulates matches over a dataset.
#[derive(Clone, Debug)]
pub struct PqAccumulator {
    pub vocab: Vocabulary,
    pub tallies: Vec<ClassTally>,
}

impl PqAccumulator {
    pub fn new(vocab: Vocabulary) -> Self {
        let n = vocab.len();
        PqAccumulator { vocab, tallies: vec![ClassTally::default(); n] }
    }

    /// Adds one image. Segments match when they share a class and their IoU
    /// exceeds 0.5; pixels that are void in the ground truth do not count
    /// towards the union. Unmatched predictions mostly on void are ignored.
    pub fn add(&mut self, pred: &Panoptic, gt: &Panoptic) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Dimension(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let n = self.vocab.len();
        for s in pred.segments.iter().chain(&gt.segments) {
            if s.class >= n {
                return Err(Error::Contract(format!("segment {} has class {} outside vocabulary", s.id, s.class)));
            }
        }
        let pred_area = pred.areas();
        let gt_area = gt.areas();
        let mut inter: BTreeMap<(u32, u32), usize> = BTreeMap::new();
        for (&p, &g) in pred.ids.iter().zip(&gt.ids) {
            if p != VOID {
                *inter.entry((p, g)).or_insert(0) += 1;
            }
        }
        let mut pred_matched = std::collections::BTreeSet::new();
        let mut gt_matched = std::collections::BTreeSet::new();
        for (&(p, g), &i) in &inter {
            if g == VOID {
                continue;
            }
            let (Some(pc), Some(gc)) = (pred.class_of(p), gt.class_of(g)) else { continue };
            if pc != gc {
                continue;
            }
            let on_void = inter.get(&(p, VOID)).copied().unwrap_or(0);
            let union = pred_area[&p] - on_void + gt_area[&g] - i;
            let iou = i as f64 / union as f64;
            if iou > 0.5 {
                if !pred_matched.insert(p) || !gt_matched.insert(g) {
                    return Err(Error::Contract(format!("segment matched twice (pred {p}, gt {g})")));
                }
                let t = &mut self.tallies[gc];
                t.tp += 1;
                t.iou_sum += iou;
            }
        }
        for s in &gt.segments {
            if !gt_matched.contains(&s.id) && gt_area.get(&s.id).copied().unwrap_or(0) > 0 {
                self.tallies[s.class].fn_ += 1;
            }
        }
        for s in &pred.segments {
            let area = pred_area.get(&s.id).copied().unwrap_or(0);
            if pred_matched.contains(&s.id) || area == 0 {
                continue;
            }
            let on_void = inter.get(&(s.id, VOID)).copied().unwrap_or(0);
            if on_void * 2 <= area {
                self.tallies[s.class].fp += 1;
            }
        }
        Ok(())
    }

    pub fn report(&self) -> PqReport {
        let classes: Vec<ClassResult> = self
            .tallies
            .iter()
            .enumerate()
            .map(|(c, t)| ClassResult { name: self.vocab.name(c).to_string(), is_thing: self.vocab.is_thing(c), tally: *t })
            .collect();
        let agg = |filter: &dyn Fn(&ClassResult) -> bool| {
            let sel: Vec<&ClassResult> = classes.iter().filter(|c| c.tally.present() && filter(c)).collect();
            let k = sel.len();
            let mean = |f: &dyn Fn(&ClassTally) -> f64| {
                if k == 0 {
                    0.0
                } else {
                    sel.iter().map(|c| f(&c.tally)).sum::<f64>() / k as f64
                }
            };
            Aggregate {
                pq: mean(&|t| t.pq()),
                sq: mean(&|t| t.sq()),
                rq: mean(&|t| t.rq()),
                classes: k,
            }
        };
        PqReport { all: agg(&|_| true), things: agg(&|c| c.is_thing), stuff: agg(&|c| !c.is_thing), classes }
    }
}

/// PQ of a single image pair.
pub fn compute_pq(pred: &Panoptic, gt: &Panoptic, vocab: &Vocabulary) -> Result<PqReport> {
    let mut acc = PqAccumulator::new(vocab.clone());
    acc.add(pred, gt)?;
    Ok(acc.report())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassResult {
    pub name: String,
    pub is_thing: bool,
    pub tally: ClassTally,
}

/// Means over the classes that occur in prediction or ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Aggregate {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PqReport {
    pub classes: Vec<ClassResult>,
    pub all: Aggregate,
    pub things: Aggregate,
    pub stuff: Aggregate,
}

impl PqReport {
    /// `class,PQ,SQ,RQ,TP,FP,FN` lines plus `ALL`, `THINGS`, `STUFF`.
    pub fn to_csv(&self) -> String {
        let mut o = String::from("class,PQ,SQ,RQ,TP,FP,FN\n");
        for c in &self.classes {
            let t = &c.tally;
            let _ = writeln!(o, "{},{:.6},{:.6},{:.6},{},{},{}", c.name, t.pq(), t.sq(), t.rq(), t.tp, t.fp, t.fn_);
        }
        let sum = |f: &dyn Fn(&ClassTally) -> usize, things: Option<bool>| -> usize {
            self.classes.iter().filter(|c| things.is_none_or(|th| c.is_thing == th)).map(|c| f(&c.tally)).sum()
        };
        for (name, a, sel) in [("ALL", self.all, None), ("THINGS", self.things, Some(true)), ("STUFF", self.stuff, Some(false))] {
            let _ = writeln!(
                o,
                "{name},{:.6},{:.6},{:.6},{},{},{}",
                a.pq,
                a.sq,
                a.rq,
                sum(&|t| t.tp, sel),
                sum(&|t| t.fp, sel),
                sum(&|t| t.fn_, sel)
            );
        }
        o
    }

    pub fn to_table(&self) -> String {
        let mut o = String::new();
        let _ = writeln!(o, "{:<12} {:>7} {:>7} {:>7} {:>6} {:>6} {:>6}", "class", "PQ", "SQ", "RQ", "TP", "FP", "FN");
        for c in &self.classes {
            let t = &c.tally;
            let _ = writeln!(
                o,
                "{:<12} {:>7.2} {:>7.2} {:>7.2} {:>6} {:>6} {:>6}",
                c.name,
                100.0 * t.pq(),
                100.0 * t.sq(),
                100.0 * t.rq(),
                t.tp,
                t.fp,
                t.fn_
            );
        }
        for (name, a) in [("ALL", self.all), ("THINGS", self.things), ("STUFF", self.stuff)] {
            let _ = writeln!(
                o,
                "{:<12} {:>7.2} {:>7.2} {:>7.2}   ({} classes)",
                name,
                100.0 * a.pq,
                100.0 * a.sq,
                100.0 * a.rq,
                a.classes
            );
        }
        o
    }
}
