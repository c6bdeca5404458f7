//! Synthetic scenes: horizontal stuff bands with per-pixel noise, overlaid
//! with circles, squares and triangles.
//!
//! A scene is a pure function of `(seed, index)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::SceneConfig;
use crate::panoptic::{Panoptic, Segment, VOID};
use crate::pnm::RgbImage;

/// Placement attempts per thing before the scene is redrawn.
const PLACEMENT_RETRIES: usize = 40;
/// Redraws before giving up on a full thing count.
const MAX_REDRAWS: u64 = 16;
/// Free pixels kept between non-overlapping things.
const GAP: isize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    pub gt: Panoptic,
    /// Seed actually used when the first draw could not place every thing.
    pub derived_seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    /// Shape drawn for a thing class; unknown names cycle by class index.
    pub fn for_class(name: &str, index: usize) -> Shape {
        match name {
            "circle" => Shape::Circle,
            "square" => Shape::Square,
            "triangle" => Shape::Triangle,
            _ => [Shape::Circle, Shape::Square, Shape::Triangle][index % 3],
        }
    }

    /// Whether the pixel centered at offset `(dx, dy)` from the shape center
    /// lies inside a shape of radius `r`.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => {
                let half = 0.85 * r;
                dx.abs() <= half && dy.abs() <= half
            }
            Shape::Triangle => {
                let (top, bottom) = (-r, 0.8 * r);
                if dy < top || dy > bottom {
                    return false;
                }
                dx.abs() <= 1.05 * r * (dy - top) / (bottom - top)
            }
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

/// Saturated colors for things, muted ones for stuff.
pub fn class_color(is_thing: bool, index: usize) -> [f64; 3] {
    if is_thing {
        hsv(10.0 + 137.5 * index as f64, 0.85, 0.9)
    } else {
        hsv(205.0 + 190.0 * index as f64, 0.35, (0.9 - 0.4 * index as f64).max(0.3))
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the `attempt`-th redraw of scene `index`.
pub fn derived_seed(seed: u64, index: u64, attempt: u64) -> u64 {
    splitmix(seed ^ splitmix(index) ^ splitmix(attempt.wrapping_mul(0x2545_f491_4f6c_dd1d)))
}

pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    if let Some(scene) = draw(cfg, &mut rng, cfg.occlusion) {
        return scene;
    }
    for attempt in 1..=MAX_REDRAWS {
        let seed = derived_seed(cfg.seed, index, attempt);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if let Some(mut scene) = draw(cfg, &mut rng, cfg.occlusion) {
            scene.derived_seed = Some(seed);
            return scene;
        }
    }
    // Placement never succeeded without overlap: fall back to occlusion,
    // which always succeeds.
    let seed = derived_seed(cfg.seed, index, MAX_REDRAWS + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scene = draw(cfg, &mut rng, true).expect("occluded placement always succeeds");
    scene.derived_seed = Some(seed);
    scene
}

fn draw(cfg: &SceneConfig, rng: &mut ChaCha8Rng, occlusion: bool) -> Option<Scene> {
    let (h, w) = (cfg.height, cfg.width);
    let mut ids = vec![VOID; h * w];
    let mut colors = vec![[0.0f64; 3]; h * w];
    let mut segments = Vec::new();
    let n_things = cfg.things.len();

    // Stuff: horizontal bands with jittered boundaries.
    let bands = cfg.stuff.len();
    if bands > 0 {
        let mut cuts = vec![0usize];
        for b in 1..bands {
            let nominal = h as f64 * b as f64 / bands as f64;
            let jitter = 0.2 * h as f64 / bands as f64;
            cuts.push((nominal + rng.random_range(-jitter..=jitter)).round() as usize);
        }
        cuts.push(h);
        for b in 0..bands {
            let id = segments.len() as u32 + 1;
            segments.push(Segment { id, class: n_things + b });
            let base = class_color(false, b);
            for y in cuts[b]..cuts[b + 1] {
                for x in 0..w {
                    ids[y * w + x] = id;
                    colors[y * w + x] = base;
                }
            }
        }
    }

    let count = if n_things == 0 { 0 } else { rng.random_range(cfg.min_things..=cfg.max_things) };
    let mut occupied = vec![false; h * w];
    for _ in 0..count {
        let class = rng.random_range(0..n_things);
        let shape = Shape::for_class(&cfg.things[class], class);
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let r = rng.random_range(cfg.min_size as f64..=cfg.max_size as f64);
            let margin = r.ceil() + 1.0;
            if 2.0 * margin >= w.min(h) as f64 {
                continue;
            }
            let cx = rng.random_range(margin..w as f64 - margin);
            let cy = rng.random_range(margin..h as f64 - margin);
            let pixels = raster(shape, cx, cy, r, h, w);
            if pixels.is_empty() {
                continue;
            }
            if !occlusion && pixels.iter().any(|&p| near(&occupied, p, h, w)) {
                continue;
            }
            placed = Some(pixels);
            break;
        }
        let pixels = placed?;
        let id = segments.len() as u32 + 1;
        segments.push(Segment { id, class });
        let base = class_color(true, class);
        let tint: Vec<f64> = (0..3).map(|_| rng.random_range(-20.0..=20.0)).collect();
        for &p in &pixels {
            ids[p] = id;
            occupied[p] = true;
            for ch in 0..3 {
                colors[p][ch] = base[ch] + tint[ch];
            }
        }
    }

    let mut image = RgbImage::new(w, h);
    for (p, c) in colors.iter().enumerate() {
        for ch in 0..3 {
            let noise = if cfg.noise > 0.0 { rng.random_range(-cfg.noise..=cfg.noise) } else { 0.0 };
            image.data[p * 3 + ch] = (c[ch] + noise).round().clamp(0.0, 255.0) as u8;
        }
    }
    // Drop segments that ended up fully hidden and renumber densely.
    let areas = {
        let mut a = vec![0usize; segments.len() + 1];
        for &id in &ids {
            a[id as usize] += 1;
        }
        a
    };
    let mut remap = vec![VOID; segments.len() + 1];
    let mut kept = Vec::new();
    for s in &segments {
        if areas[s.id as usize] > 0 {
            let id = kept.len() as u32 + 1;
            remap[s.id as usize] = id;
            kept.push(Segment { id, class: s.class });
        }
    }
    for id in &mut ids {
        *id = remap[*id as usize];
    }
    Some(Scene { image, gt: Panoptic { height: h, width: w, ids, segments: kept }, derived_seed: None })
}

fn raster(shape: Shape, cx: f64, cy: f64, r: f64, h: usize, w: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let (y0, y1) = ((cy - r - 1.0).floor().max(0.0) as usize, ((cy + r + 1.0).ceil() as usize).min(h));
    let (x0, x1) = ((cx - r - 1.0).floor().max(0.0) as usize, ((cx + r + 1.0).ceil() as usize).min(w));
    for y in y0..y1 {
        for x in x0..x1 {
            if shape.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r) {
                out.push(y * w + x);
            }
        }
    }
    out
}

fn near(occupied: &[bool], p: usize, h: usize, w: usize) -> bool {
    let (y, x) = ((p / w) as isize, (p % w) as isize);
    for dy in -GAP..=GAP {
        for dx in -GAP..=GAP {
            let (yy, xx) = (y + dy, x + dx);
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && occupied[yy as usize * w + xx as usize] {
                return true;
            }
        }
    }
    false
}
