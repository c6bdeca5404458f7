//! Turning slot masks and class distributions into a panoptic map.

use masktx_tensor::Tensor;

use crate::error::{Error, Result};
use crate::panoptic::{Panoptic, Segment, Vocabulary, VOID};

/// Reference image area for the absolute area limits.
const REFERENCE_AREA: f64 = 641.0 * 641.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholds {
    /// Slots whose class confidence is below this are void.
    pub class_confidence: f64,
    /// Pixels whose winning mask probability is below this are void.
    pub mask_confidence: f64,
    /// Minimum stuff segment area at 641x641.
    pub stuff_area: f64,
    /// Minimum thing segment area at 641x641.
    pub thing_area: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { class_confidence: 0.7, mask_confidence: 0.4, stuff_area: 4096.0, thing_area: 256.0 }
    }
}

impl Thresholds {
    /// Area limits `(stuff, thing)` scaled to an image of `pixels` pixels,
    /// rounded down.
    pub fn area_limits(&self, pixels: usize) -> (usize, usize) {
        let scale = pixels as f64 / REFERENCE_AREA;
        ((self.stuff_area * scale).floor() as usize, (self.thing_area * scale).floor() as usize)
    }
}

/// Index of the first maximum.
fn argmax(xs: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in xs.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Class of every slot, or `None` when the slot is void.
pub fn slot_classes(probs: &Tensor, vocab: &Vocabulary, t: &Thresholds) -> Vec<Option<usize>> {
    let c1 = probs.shape()[1];
    probs
        .data()
        .chunks(c1)
        .map(|row| {
            let (c, conf) = argmax(row.iter().copied());
            (c != vocab.no_object() && conf >= t.class_confidence).then_some(c)
        })
        .collect()
}

/// Dual argmax with confidence and area filtering.
///
/// `masks` is `[N, H*W]`. Segment ids are slot index + 1.
pub fn panoptic_inference(
    masks: &Tensor,
    probs: &Tensor,
    height: usize,
    width: usize,
    vocab: &Vocabulary,
    t: &Thresholds,
) -> Result<Panoptic> {
    let (n, p) = (masks.shape()[0], masks.shape()[1]);
    if p != height * width || probs.shape() != [n, vocab.len() + 1] {
        return Err(Error::Dimension(format!(
            "masks {:?} and class probabilities {:?} do not fit {height}x{width} with {} classes",
            masks.shape(),
            probs.shape(),
            vocab.len()
        )));
    }
    let classes = slot_classes(probs, vocab, t);
    let m = masks.data();
    let mut ids = vec![VOID; p];
    for (px, id) in ids.iter_mut().enumerate() {
        let (slot, conf) = argmax((0..n).map(|s| m[s * p + px]));
        if conf >= t.mask_confidence && classes[slot].is_some() {
            *id = slot as u32 + 1;
        }
    }
    let (stuff_min, thing_min) = t.area_limits(p);
    let mut area = vec![0usize; n + 1];
    for &id in &ids {
        area[id as usize] += 1;
    }
    let keep: Vec<bool> = (0..n)
        .map(|s| match classes[s] {
            Some(c) => {
                let limit = if vocab.is_thing(c) { thing_min } else { stuff_min };
                area[s + 1] > 0 && area[s + 1] >= limit
            }
            None => false,
        })
        .collect();
    for id in &mut ids {
        if *id != VOID && !keep[*id as usize - 1] {
            *id = VOID;
        }
    }
    let segments = (0..n)
        .filter(|&s| keep[s])
        .map(|s| Segment { id: s as u32 + 1, class: classes[s].expect("kept slots have a class") })
        .collect();
    Ok(Panoptic { height, width, ids, segments })
}
