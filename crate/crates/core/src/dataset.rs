//! On-disk scene directories.
//!
//! ```text
//! <root>/manifest.txt        one stem per line (optional tab-separated notes)
//! <root>/classes.txt         name<TAB>thing|stuff, in class-index order
//! <root>/<stem>.ppm          RGB image
//! <root>/<stem>.pgm          16-bit segment-id map, 0 = void
//! <root>/<stem>.labels.txt   mask_id<TAB>class_name
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use masktx_tensor::Tensor;

use crate::config::SceneConfig;
use crate::error::{Error, Result};
use crate::losses::Target;
use crate::panoptic::{ClassInfo, Panoptic, Segment, Vocabulary};
use crate::pnm::{self, GrayImage, RgbImage};
use crate::synth::{class_color, generate_scene};

pub const MANIFEST: &str = "manifest.txt";
pub const CLASSES: &str = "classes.txt";

pub fn stem_for(index: u64) -> String {
    format!("scene_{index:05}")
}

fn parse_err(path: &Path, offset: usize, detail: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), offset, detail: detail.into() }
}

/// Lines of a text file with the byte offset at which each starts.
fn lines_with_offsets(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut offset = 0;
    text.split_inclusive('\n').map(move |l| {
        let start = offset;
        offset += l.len();
        (start, l.trim_end_matches(['\n', '\r']))
    })
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes).map_err(|e| parse_err(path, e.utf8_error().valid_up_to(), "invalid UTF-8"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_classes(dir: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut o = String::new();
    for c in &vocab.classes {
        let _ = writeln!(o, "{}\t{}", c.name, if c.is_thing { "thing" } else { "stuff" });
    }
    write_text(&dir.join(CLASSES), &o)
}

pub fn read_classes(dir: &Path) -> Result<Vocabulary> {
    let path = dir.join(CLASSES);
    let text = read_text(&path)?;
    let mut classes = Vec::new();
    for (off, line) in lines_with_offsets(&text) {
        if line.trim().is_empty() {
            continue;
        }
        let (name, kind) = line.split_once('\t').ok_or_else(|| parse_err(&path, off, "expected name<TAB>kind"))?;
        let is_thing = match kind.trim() {
            "thing" => true,
            "stuff" => false,
            other => return Err(parse_err(&path, off + name.len() + 1, format!("unknown kind `{other}`"))),
        };
        classes.push(ClassInfo { name: name.to_string(), is_thing });
    }
    Ok(Vocabulary { classes })
}

pub fn write_manifest(dir: &Path, entries: &[(String, Option<u64>)]) -> Result<()> {
    let mut o = String::new();
    for (stem, seed) in entries {
        match seed {
            Some(s) => {
                let _ = writeln!(o, "{stem}\tderived_seed={s}");
            }
            None => {
                let _ = writeln!(o, "{stem}");
            }
        }
    }
    write_text(&dir.join(MANIFEST), &o)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<String>> {
    let text = read_text(&dir.join(MANIFEST))?;
    Ok(lines_with_offsets(&text)
        .map(|(_, l)| l.split('\t').next().unwrap_or("").trim().to_string())
        .filter(|s| !s.is_empty())
        .collect())
}

pub fn write_labels(path: &Path, gt: &Panoptic, vocab: &Vocabulary) -> Result<()> {
    let mut segs = gt.segments.clone();
    segs.sort();
    let mut o = String::new();
    for s in segs {
        let _ = writeln!(o, "{}\t{}", s.id, vocab.name(s.class));
    }
    write_text(path, &o)
}

pub fn read_labels(path: &Path, vocab: &Vocabulary) -> Result<Vec<Segment>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (off, line) in lines_with_offsets(&text) {
        if line.trim().is_empty() {
            continue;
        }
        let (id, name) = line.split_once('\t').ok_or_else(|| parse_err(path, off, "expected mask_id<TAB>class_name"))?;
        let id: u32 = id.trim().parse().map_err(|_| parse_err(path, off, format!("bad mask id `{id}`")))?;
        if id == 0 || id > u16::MAX as u32 {
            return Err(parse_err(path, off, format!("mask id {id} outside 1..=65535")));
        }
        let class = vocab
            .index_of(name.trim())
            .ok_or_else(|| parse_err(path, off + line.find('\t').unwrap_or(0) + 1, format!("unknown class `{name}`")))?;
        out.push(Segment { id, class });
    }
    Ok(out)
}

pub fn write_panoptic(dir: &Path, stem: &str, map: &Panoptic, vocab: &Vocabulary) -> Result<()> {
    let ids = map
        .ids
        .iter()
        .map(|&v| u16::try_from(v).map_err(|_| Error::Contract(format!("segment id {v} does not fit 16 bits"))))
        .collect::<Result<Vec<u16>>>()?;
    let img = GrayImage { width: map.width, height: map.height, maxval: u16::MAX, data: ids };
    pnm::write_pgm(&dir.join(format!("{stem}.pgm")), &img)?;
    write_labels(&dir.join(format!("{stem}.labels.txt")), map, vocab)
}

pub fn read_panoptic(dir: &Path, stem: &str, vocab: &Vocabulary) -> Result<Panoptic> {
    let pgm_path = dir.join(format!("{stem}.pgm"));
    let img = pnm::read_pgm(&pgm_path)?;
    let labels_path = dir.join(format!("{stem}.labels.txt"));
    let segments = read_labels(&labels_path, vocab)?;
    let map = Panoptic {
        height: img.height,
        width: img.width,
        ids: img.data.iter().map(|&v| v as u32).collect(),
        segments,
    };
    map.validate(vocab.len()).map_err(|e| parse_err(&labels_path, 0, e.to_string()))?;
    Ok(map)
}

pub fn write_scene(dir: &Path, stem: &str, image: &RgbImage, gt: &Panoptic, vocab: &Vocabulary) -> Result<()> {
    pnm::write_ppm(&dir.join(format!("{stem}.ppm")), image)?;
    write_panoptic(dir, stem, gt, vocab)
}

pub fn read_scene(dir: &Path, stem: &str, vocab: &Vocabulary) -> Result<(RgbImage, Panoptic)> {
    let image = pnm::read_ppm(&dir.join(format!("{stem}.ppm")))?;
    let gt = read_panoptic(dir, stem, vocab)?;
    if (gt.height, gt.width) != (image.height, image.width) {
        return Err(Error::Dimension(format!("{stem}: image and label sizes differ")));
    }
    Ok((image, gt))
}

/// Generates scenes `start..start+count` into `dir` with manifest and class
/// list.
pub fn synthesize(cfg: &SceneConfig, dir: &Path, start: u64, count: u64) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let vocab = cfg.vocabulary();
    let mut entries = Vec::new();
    for index in start..start + count {
        let scene = generate_scene(cfg, index);
        let stem = stem_for(index);
        write_scene(dir, &stem, &scene.image, &scene.gt, &vocab)?;
        entries.push((stem, scene.derived_seed));
    }
    write_manifest(dir, &entries)?;
    write_classes(dir, &vocab)?;
    Ok(entries.into_iter().map(|e| e.0).collect())
}

/// `[3, H, W]` tensor with channels scaled to roughly `[-1, 1]`.
pub fn image_tensor(img: &RgbImage) -> Tensor {
    let (h, w) = (img.height, img.width);
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        img.data[p * 3 + c] as f64 / 127.5 - 1.0
    })
}

/// Class color per segment, void black. Instances of one class get
/// alternating brightness so neighbors stay distinguishable.
pub fn colorize(map: &Panoptic, vocab: &Vocabulary) -> RgbImage {
    let mut img = RgbImage::new(map.width, map.height);
    for (p, &id) in map.ids.iter().enumerate() {
        if let Some(class) = map.class_of(id) {
            let base = class_color(vocab.is_thing(class), vocab.category_index(class));
            let k = 0.75 + 0.25 * ((id % 3) as f64 / 2.0);
            let rgb = [0, 1, 2].map(|c| (base[c] * k).round().clamp(0.0, 255.0) as u8);
            img.set(p % map.width, p / map.width, rgb);
        }
    }
    img
}

#[derive(Clone, Debug)]
pub struct Example {
    pub stem: String,
    pub image: Tensor,
    pub gt: Panoptic,
    pub target: Target,
}

impl Example {
    pub fn new(stem: String, image: &RgbImage, gt: Panoptic) -> Self {
        let target = Target::new(&gt);
        Example { stem, image: image_tensor(image), gt, target }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: Option<PathBuf>,
    pub vocab: Vocabulary,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        let vocab = read_classes(dir)?;
        let examples = read_manifest(dir)?
            .into_iter()
            .map(|stem| {
                let (image, gt) = read_scene(dir, &stem, &vocab)?;
                Ok(Example::new(stem, &image, gt))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { root: Some(dir.to_path_buf()), vocab, examples })
    }

    /// Scenes `start..start+count` generated in memory.
    pub fn generate(cfg: &SceneConfig, start: u64, count: u64) -> Dataset {
        let examples = (start..start + count)
            .map(|i| {
                let s = generate_scene(cfg, i);
                Example::new(stem_for(i), &s.image, s.gt)
            })
            .collect();
        Dataset { root: None, vocab: cfg.vocabulary(), examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}
