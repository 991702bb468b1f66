//! Synthetic HOI scenes.
//!
//! Each scene shows one human (a skin-coloured disc) and one to three
//! objects (rectangles or triangles whose colour is the object class) on a
//! dark, noisy background. The interaction class of every human-object pair
//! is a function of the two bounding boxes, see [`relation`].

use std::fs;
use std::path::Path;

use numcore::{checkpoint, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::matching::GroundTruthInstance;
use crate::{contract, Error, Result};

/// Object colours; object class `k` is drawn in `PALETTE[k]`.
pub const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.90, 0.15],
    [0.85, 0.20, 0.85],
    [0.15, 0.85, 0.90],
    [0.98, 0.55, 0.10],
    [0.95, 0.95, 0.95],
];
pub const SKIN: [f64; 3] = [0.85, 0.62, 0.48];
pub const BACKGROUND: f64 = 0.1;
pub const NOISE: f64 = 0.02;

/// Interaction classes, in label order.
pub const RELATIONS: [&str; 4] = ["touching", "above", "containing", "distant"];
pub const TOUCHING: usize = 0;
pub const ABOVE: usize = 1;
pub const CONTAINING: usize = 2;
pub const DISTANT: usize = 3;

/// Pixel-space box `[x0, y0, x1, y1]` (exclusive right/bottom edges).
pub type PixelBox = [f64; 4];

/// Interaction implied by a human box and an object box:
/// containing if the object box lies inside the human box; touching if the
/// boxes intersect or abut; above if the object lies wholly above the human
/// with horizontal overlap; distant otherwise.
pub fn relation(human: PixelBox, object: PixelBox) -> usize {
    let [hx0, hy0, hx1, hy1] = human;
    let [ox0, oy0, ox1, oy1] = object;
    if ox0 >= hx0 && oy0 >= hy0 && ox1 <= hx1 && oy1 <= hy1 {
        CONTAINING
    } else if ox0 <= hx1 && ox1 >= hx0 && oy0 <= hy1 && oy1 >= hy0 {
        TOUCHING
    } else if oy1 < hy0 && ox0 < hx1 && ox1 > hx0 {
        ABOVE
    } else {
        DISTANT
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disc,
    Rectangle,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    /// Bounding box in pixels.
    pub bbox: PixelBox,
    pub color: [f64; 3],
}

impl Shape {
    /// Whether the centre of pixel `(px, py)` is covered.
    pub fn covers(&self, px: usize, py: usize) -> bool {
        let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
        let [x0, y0, x1, y1] = self.bbox;
        if x < x0 || x >= x1 || y < y0 || y >= y1 {
            return false;
        }
        match self.kind {
            ShapeKind::Rectangle => true,
            ShapeKind::Disc => {
                let (cx, cy, r) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0, (x1 - x0) / 2.0);
                (x - cx).powi(2) + (y - cy).powi(2) <= r * r
            }
            ShapeKind::Triangle => {
                // apex at the top centre, base along the bottom edge
                let half = (x1 - x0) / 2.0 * (y - y0) / (y1 - y0);
                (x - (x0 + x1) / 2.0).abs() <= half
            }
        }
    }

    /// Tight box of the covered pixels, or `None` if nothing is covered.
    pub fn raster_box(&self, h: usize, w: usize) -> Option<PixelBox> {
        let mut b: Option<PixelBox> = None;
        for py in 0..h {
            for px in 0..w {
                if self.covers(px, py) {
                    let (x, y) = (px as f64, py as f64);
                    b = Some(match b {
                        None => [x, y, x + 1.0, y + 1.0],
                        Some([a, c, d, e]) => [a.min(x), c.min(y), d.max(x + 1.0), e.max(y + 1.0)],
                    });
                }
            }
        }
        b
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub human: Shape,
    /// Objects with their classes.
    pub objects: Vec<(Shape, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// `[3, H, W]` in `[0, 1]`-ish intensities.
    pub image: Tensor,
    pub instances: Vec<GroundTruthInstance>,
    pub layout: SceneLayout,
    /// Sub-seed that produced the scene.
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub num_object_classes: usize,
    pub num_interaction_classes: usize,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.height.is_multiple_of(32) || !self.width.is_multiple_of(32) || self.height == 0 || self.width == 0 {
            return Err(contract(format!(
                "scene extents {}×{} must be positive multiples of 32",
                self.height, self.width
            )));
        }
        if self.num_object_classes == 0 || self.num_object_classes > PALETTE.len() {
            return Err(contract(format!("object classes must be 1..={}", PALETTE.len())));
        }
        if self.num_interaction_classes != RELATIONS.len() {
            return Err(contract(format!(
                "the generator derives exactly {} interaction classes",
                RELATIONS.len()
            )));
        }
        Ok(())
    }
}

const MAX_PLACEMENT_TRIES: usize = 200;

/// `count` scenes, deterministic in `seed`.
pub fn generate(seed: u64, count: usize, cfg: &GenConfig) -> Result<Vec<SyntheticScene>> {
    cfg.validate()?;
    let mut scenes = Vec::with_capacity(count);
    let mut sub = 0u64;
    while scenes.len() < count {
        let s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(sub);
        sub += 1;
        if let Some(layout) = layout(s, cfg) {
            scenes.push(render(layout, s, cfg));
        }
    }
    Ok(scenes)
}

fn overlaps_with_gap(a: PixelBox, b: PixelBox, gap: f64) -> bool {
    a[0] < b[2] + gap && b[0] < a[2] + gap && a[1] < b[3] + gap && b[1] < a[3] + gap
}

/// Samples a layout, or `None` when some object cannot be placed.
fn layout(seed: u64, cfg: &GenConfig) -> Option<SceneLayout> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let r = rng.random_range(7..=10) as f64;
    let cx = rng.random_range(r as i64 + 1..=(w - r) as i64 - 1) as f64;
    let cy = rng.random_range(r as i64 + 1..=(h - r) as i64 - 1) as f64;
    let human = Shape {
        kind: ShapeKind::Disc,
        bbox: [cx - r, cy - r, cx + r, cy + r],
        color: SKIN,
    };
    let hb = human.bbox;
    let n = rng.random_range(1..=3);
    let mut objects: Vec<(Shape, usize)> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut want = rng.random_range(0..RELATIONS.len());
        if want == CONTAINING && objects.iter().any(|(o, _)| relation(hb, o.bbox) == CONTAINING) {
            want = DISTANT;
        }
        let class = rng.random_range(0..cfg.num_object_classes);
        let kind = if rng.random_bool(0.5) {
            ShapeKind::Rectangle
        } else {
            ShapeKind::Triangle
        };
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let b = match want {
                CONTAINING => {
                    // well inside the disc so the disc outline stays visible
                    let side = rng.random_range(4..=((r * 0.9) as i64).max(4)) as f64;
                    let lim = r * std::f64::consts::FRAC_1_SQRT_2 - side / 2.0 - 0.5;
                    if lim < 0.0 {
                        continue;
                    }
                    let ox = cx + rng.random_range(-lim..=lim);
                    let oy = cy + rng.random_range(-lim..=lim);
                    let (x0, y0) = ((ox - side / 2.0).round(), (oy - side / 2.0).round());
                    [x0, y0, x0 + side, y0 + side]
                }
                _ => {
                    let bw = rng.random_range(8..=16) as f64;
                    let bh = rng.random_range(8..=16) as f64;
                    let x0 = rng.random_range(1..=(w - bw) as i64 - 1) as f64;
                    let y0 = rng.random_range(1..=(h - bh) as i64 - 1) as f64;
                    [x0, y0, x0 + bw, y0 + bh]
                }
            };
            if b[0] < 0.0 || b[1] < 0.0 || b[2] > w || b[3] > h || relation(hb, b) != want {
                continue;
            }
            let clear = match want {
                TOUCHING => {
                    // genuine contact: overlap of at least a pixel, without
                    // covering the disc centre
                    let ix = b[2].min(hb[2]) - b[0].max(hb[0]);
                    let iy = b[3].min(hb[3]) - b[1].max(hb[1]);
                    ix >= 1.0 && iy >= 1.0 && !(b[0] <= cx && cx <= b[2] && b[1] <= cy && cy <= b[3])
                }
                CONTAINING => true,
                _ => !overlaps_with_gap(b, hb, 3.0),
            };
            let apart = objects.iter().all(|(o, _)| !overlaps_with_gap(b, o.bbox, 2.0));
            if clear && apart {
                placed = Some(b);
                break;
            }
        }
        let bbox = placed?;
        let kind = if want == CONTAINING { ShapeKind::Rectangle } else { kind };
        objects.push((
            Shape {
                kind,
                bbox,
                color: PALETTE[class],
            },
            class,
        ));
    }
    Some(SceneLayout { human, objects })
}

fn render(layout: SceneLayout, seed: u64, cfg: &GenConfig) -> SyntheticScene {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5_eed0_fa11);
    let noise = Normal::new(0.0, NOISE).expect("finite deviation");
    let mut base = vec![[BACKGROUND; 3]; h * w];
    let hb = layout.human.bbox;
    // objects touching or beside the human first, the human, then held objects
    let (held, rest): (Vec<_>, Vec<_>) = layout.objects.iter().partition(|(o, _)| relation(hb, o.bbox) == CONTAINING);
    let order = rest
        .iter()
        .map(|(o, _)| o)
        .chain(std::iter::once(&layout.human))
        .chain(held.iter().map(|(o, _)| o));
    for shape in order {
        let [x0, y0, x1, y1] = shape.bbox;
        for py in (y0.max(0.0) as usize)..(y1.min(h as f64) as usize) {
            for px in (x0.max(0.0) as usize)..(x1.min(w as f64) as usize) {
                if shape.covers(px, py) {
                    base[py * w + px] = shape.color;
                }
            }
        }
    }
    let mut data = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for i in 0..h * w {
            data[c * h * w + i] = base[i][c] + noise.sample(&mut rng);
        }
    }
    let norm = |b: PixelBox| -> [f64; 4] {
        let (x0, y0, x1, y1) = (b[0] / w as f64, b[1] / h as f64, b[2] / w as f64, b[3] / h as f64);
        [(x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0]
    };
    let instances = layout
        .objects
        .iter()
        .map(|(o, class)| GroundTruthInstance {
            human_box: norm(hb),
            object_box: norm(o.bbox),
            object_class: *class,
            interaction_class: relation(hb, o.bbox),
        })
        .collect();
    SyntheticScene {
        image: Tensor::from_parts([3, h, w], data),
        instances,
        layout,
        seed,
    }
}

/// Mirrors a scene left-right; every relation is preserved.
pub fn flip_horizontal(scene: &SyntheticScene) -> SyntheticScene {
    let &[c, h, w] = scene.image.shape() else { unreachable!() };
    let src = scene.image.data();
    let image = Tensor::from_fn([c, h, w], |i| {
        let x = i % w;
        src[i - x + (w - 1 - x)]
    });
    let mirror_box = |b: PixelBox| [w as f64 - b[2], b[1], w as f64 - b[0], b[3]];
    let mirror_shape = |s: &Shape| Shape {
        bbox: mirror_box(s.bbox),
        ..s.clone()
    };
    SyntheticScene {
        image,
        instances: scene
            .instances
            .iter()
            .map(|g| GroundTruthInstance {
                human_box: [1.0 - g.human_box[0], g.human_box[1], g.human_box[2], g.human_box[3]],
                object_box: [1.0 - g.object_box[0], g.object_box[1], g.object_box[2], g.object_box[3]],
                ..g.clone()
            })
            .collect(),
        layout: SceneLayout {
            human: mirror_shape(&scene.layout.human),
            objects: scene.layout.objects.iter().map(|(s, k)| (mirror_shape(s), *k)).collect(),
        },
        seed: scene.seed,
    }
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    file: String,
    seed: u64,
    instances: Vec<GroundTruthInstance>,
    layout: SceneLayout,
}

#[derive(Serialize, Deserialize)]
struct Index {
    height: usize,
    width: usize,
    num_object_classes: usize,
    num_interaction_classes: usize,
    scenes: Vec<IndexEntry>,
}

pub const INDEX_FILE: &str = "index.json";

/// Writes `index.json` plus one tensor container per scene image.
pub fn save_dataset(dir: impl AsRef<Path>, scenes: &[SyntheticScene], cfg: &GenConfig) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let file = format!("scene_{i:05}.bin");
        checkpoint::save(dir.join(&file), &[("image", &s.image)])?;
        entries.push(IndexEntry {
            file,
            seed: s.seed,
            instances: s.instances.clone(),
            layout: s.layout.clone(),
        });
    }
    let index = Index {
        height: cfg.height,
        width: cfg.width,
        num_object_classes: cfg.num_object_classes,
        num_interaction_classes: cfg.num_interaction_classes,
        scenes: entries,
    };
    fs::write(dir.join(INDEX_FILE), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(Vec<SyntheticScene>, GenConfig)> {
    let dir = dir.as_ref();
    let index: Index = serde_json::from_str(&fs::read_to_string(dir.join(INDEX_FILE))?)?;
    let cfg = GenConfig {
        height: index.height,
        width: index.width,
        num_object_classes: index.num_object_classes,
        num_interaction_classes: index.num_interaction_classes,
    };
    let mut scenes = Vec::with_capacity(index.scenes.len());
    for e in index.scenes {
        let records = checkpoint::load(dir.join(&e.file))?;
        let (_, image) = records
            .into_iter()
            .find(|(n, _)| n == "image")
            .ok_or_else(|| Error::Config(format!("{} has no image record", e.file)))?;
        if image.shape() != [3, cfg.height, cfg.width] {
            return Err(contract(format!("{}: image shape {:?}", e.file, image.shape())));
        }
        scenes.push(SyntheticScene {
            image,
            instances: e.instances,
            layout: e.layout,
            seed: e.seed,
        });
    }
    Ok((scenes, cfg))
}
