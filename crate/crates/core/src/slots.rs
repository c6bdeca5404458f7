//! Per-slot statistics over a directory of predicted panoptic maps, whose
//! segment ids are slot index + 1.

use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::{read_classes, read_manifest, read_panoptic};
use crate::error::{Error, Result};
use crate::panoptic::Vocabulary;
use crate::pnm::{write_pgm, GrayImage};

#[derive(Clone, Debug, PartialEq)]
pub struct SlotStats {
    pub vocab: Vocabulary,
    pub images: usize,
    pub height: usize,
    pub width: usize,
    /// Number of images in which each slot produced a segment.
    pub firing: Vec<usize>,
    /// `[slot][class]` segment counts.
    pub class_counts: Vec<Vec<usize>>,
    /// Fraction of images covering each pixel, per slot, row-major.
    pub mean_masks: Vec<Vec<f64>>,
}

impl SlotStats {
    /// Reads every map listed in the directory manifest. `slots` fixes the
    /// slot count; by default it is the largest segment id seen.
    pub fn from_dir(dir: &Path, slots: Option<usize>) -> Result<SlotStats> {
        let vocab = read_classes(dir)?;
        let maps = read_manifest(dir)?
            .iter()
            .map(|stem| read_panoptic(dir, stem, &vocab))
            .collect::<Result<Vec<_>>>()?;
        let first = maps.first().ok_or_else(|| Error::Contract(format!("{} lists no predictions", dir.display())))?;
        let (height, width) = (first.height, first.width);
        let seen = maps.iter().flat_map(|m| m.segments.iter().map(|s| s.id as usize)).max().unwrap_or(0);
        let n = slots.unwrap_or(seen);
        if seen > n {
            return Err(Error::Contract(format!("segment id {seen} exceeds {n} slots")));
        }
        let mut stats = SlotStats {
            images: maps.len(),
            height,
            width,
            firing: vec![0; n],
            class_counts: vec![vec![0; vocab.len()]; n],
            mean_masks: vec![vec![0.0; height * width]; n],
            vocab,
        };
        for map in &maps {
            if (map.height, map.width) != (height, width) {
                return Err(Error::Dimension("predictions have different sizes".into()));
            }
            for s in &map.segments {
                let slot = s.id as usize - 1;
                stats.firing[slot] += 1;
                stats.class_counts[slot][s.class] += 1;
            }
            for (p, &id) in map.ids.iter().enumerate() {
                if id != 0 {
                    stats.mean_masks[id as usize - 1][p] += 1.0;
                }
            }
        }
        let inv = 1.0 / stats.images as f64;
        stats.mean_masks.iter_mut().flatten().for_each(|v| *v *= inv);
        Ok(stats)
    }

    /// `slot,firing,fraction,mean_area,<class counts...>`.
    pub fn to_csv(&self) -> String {
        let mut o = String::from("slot,firing,fraction,mean_area");
        for c in &self.vocab.classes {
            let _ = write!(o, ",{}", c.name);
        }
        o.push('\n');
        for (slot, counts) in self.class_counts.iter().enumerate() {
            let area: f64 = self.mean_masks[slot].iter().sum();
            let _ = write!(
                o,
                "{slot},{},{:.6},{:.3}",
                self.firing[slot],
                self.firing[slot] as f64 / self.images as f64,
                area
            );
            for c in counts {
                let _ = write!(o, ",{c}");
            }
            o.push('\n');
        }
        o
    }

    /// Writes `slot_XX_mean.pgm` (8-bit, 255 = always covered) per slot.
    pub fn write_mean_masks(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (slot, mask) in self.mean_masks.iter().enumerate() {
            let img = GrayImage {
                width: self.width,
                height: self.height,
                maxval: 255,
                data: mask.iter().map(|v| (v * 255.0).round() as u16).collect(),
            };
            write_pgm(&dir.join(format!("slot_{slot:02}_mean.pgm")), &img)?;
        }
        Ok(())
    }
}
