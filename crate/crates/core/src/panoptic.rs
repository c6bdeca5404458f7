//! Panoptic label maps: one segment id per pixel plus the class of every
//! segment. Ground truth and predictions share this representation.

use crate::error::{Error, Result};

/// Class vocabulary. The no-object class is implicit and has index `len()`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pub classes: Vec<ClassInfo>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassInfo {
    pub name: String,
    pub is_thing: bool,
}

impl Vocabulary {
    /// Things first, then stuff.
    pub fn new(things: &[String], stuff: &[String]) -> Self {
        let classes = things
            .iter()
            .map(|n| ClassInfo { name: n.clone(), is_thing: true })
            .chain(stuff.iter().map(|n| ClassInfo { name: n.clone(), is_thing: false }))
            .collect();
        Vocabulary { classes }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Index of the no-object class in class distributions.
    pub fn no_object(&self) -> usize {
        self.classes.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    pub fn is_thing(&self, class: usize) -> bool {
        self.classes[class].is_thing
    }

    /// Position of `class` among the classes of its own kind.
    pub fn category_index(&self, class: usize) -> usize {
        let kind = self.classes[class].is_thing;
        self.classes[..class].iter().filter(|c| c.is_thing == kind).count()
    }

    pub fn name(&self, class: usize) -> &str {
        &self.classes[class].name
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Segment {
    pub id: u32,
    pub class: usize,
}

/// Per-pixel segment ids (0 = void) with the class of every listed segment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Panoptic {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u32>,
    pub segments: Vec<Segment>,
}

pub const VOID: u32 = 0;

impl Panoptic {
    pub fn void(height: usize, width: usize) -> Self {
        Panoptic { height, width, ids: vec![VOID; height * width], segments: Vec::new() }
    }

    /// Checks that every nonzero pixel id has a segment, segment ids are
    /// unique and nonzero, and every segment covers at least one pixel.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.ids.len() != self.height * self.width {
            return Err(Error::Contract(format!(
                "id map has {} pixels, expected {}x{}",
                self.ids.len(),
                self.height,
                self.width
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.segments {
            if s.id == VOID || !seen.insert(s.id) {
                return Err(Error::Contract(format!("segment id {} is void or repeated", s.id)));
            }
            if s.class >= num_classes {
                return Err(Error::Contract(format!("segment {} has class {} outside vocabulary", s.id, s.class)));
            }
        }
        let areas = self.areas();
        for &id in &self.ids {
            if id != VOID && !seen.contains(&id) {
                return Err(Error::Contract(format!("pixel id {id} has no segment")));
            }
        }
        for s in &self.segments {
            if areas.get(&s.id).copied().unwrap_or(0) == 0 {
                return Err(Error::Contract(format!("segment {} covers no pixels", s.id)));
            }
        }
        Ok(())
    }

    pub fn class_of(&self, id: u32) -> Option<usize> {
        self.segments.iter().find(|s| s.id == id).map(|s| s.class)
    }

    pub fn areas(&self) -> std::collections::BTreeMap<u32, usize> {
        let mut out = std::collections::BTreeMap::new();
        for &id in &self.ids {
            if id != VOID {
                *out.entry(id).or_insert(0) += 1;
            }
        }
        out
    }

    pub fn mask(&self, id: u32) -> Vec<bool> {
        self.ids.iter().map(|&v| v == id).collect()
    }

    /// Downsamples by `factor` taking the most frequent id of every
    /// `factor x factor` block (void included); ties go to the smallest id.
    /// Segments that vanish are dropped.
    pub fn downsample_mode(&self, factor: usize) -> Panoptic {
        let (h, w) = (self.height / factor, self.width / factor);
        let mut ids = vec![VOID; h * w];
        let mut block: Vec<u32> = Vec::with_capacity(factor * factor);
        for y in 0..h {
            for x in 0..w {
                block.clear();
                for dy in 0..factor {
                    let row = (y * factor + dy) * self.width + x * factor;
                    block.extend_from_slice(&self.ids[row..row + factor]);
                }
                block.sort_unstable();
                let (mut best, mut best_count) = (block[0], 0);
                let mut i = 0;
                while i < block.len() {
                    let mut j = i;
                    while j < block.len() && block[j] == block[i] {
                        j += 1;
                    }
                    if j - i > best_count {
                        best = block[i];
                        best_count = j - i;
                    }
                    i = j;
                }
                ids[y * w + x] = best;
            }
        }
        let present: std::collections::BTreeSet<u32> = ids.iter().copied().collect();
        let segments = self.segments.iter().filter(|s| present.contains(&s.id)).copied().collect();
        Panoptic { height: h, width: w, ids, segments }
    }

    /// Per-pixel class index, `None` for void.
    pub fn semantic(&self) -> Vec<Option<usize>> {
        let lookup: std::collections::BTreeMap<u32, usize> = self.segments.iter().map(|s| (s.id, s.class)).collect();
        self.ids.iter().map(|id| lookup.get(id).copied()).collect()
    }
}
