//! Deterministic synthetic scenes of overlapping shapes on banded "stuff"
//! backgrounds, with amodal instance masks, visible masks and panoptic labels.

mod io;
mod raster;

pub use io::{read_dataset, write_dataset, DatasetError, Manifest, RNG_ALGORITHM, SPEC_VERSION};
pub use raster::{rasterize, Raster, ShapeInstance, ShapeKind};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mask::{BinaryMask, BoxXyxy};
use crate::numerics::FeatureMap;
use crate::panoptic::{PanopticMap, Segment};

pub const MIN_VISIBLE_AREA: usize = 16;
const PLACEMENT_RETRIES: usize = 40;
const MAX_PAIR_IOU: f64 = 0.35;
const MAX_INSTANCE_IOU: f64 = 0.5;

const STUFF_PALETTE: [[u8; 3]; 6] = [
    [40, 62, 44],
    [64, 44, 72],
    [34, 40, 88],
    [82, 70, 40],
    [52, 52, 52],
    [30, 74, 78],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub num_scenes: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub num_thing_classes: usize,
    pub num_stuff_classes: usize,
    /// Probability that a new instance may overlap earlier ones.
    pub occlusion_prob: f64,
    pub rng_seed: u64,
    /// Probability that a scene starts with two overlapping instances of identical appearance.
    pub identical_pair_prob: f64,
    pub min_radius: f64,
    pub max_radius: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_scenes: 200,
            image_width: 64,
            image_height: 64,
            min_instances: 1,
            max_instances: 5,
            num_thing_classes: 3,
            num_stuff_classes: 2,
            occlusion_prob: 0.3,
            rng_seed: 0,
            identical_pair_prob: 0.3,
            min_radius: 6.0,
            max_radius: 14.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.image_width == 0 || self.image_height == 0 {
            return Err("image size must be positive".into());
        }
        if self.image_width % 32 != 0 || self.image_height % 32 != 0 {
            return Err(format!(
                "image size {}x{} must be divisible by 32",
                self.image_width, self.image_height
            ));
        }
        if self.min_instances == 0 || self.max_instances < self.min_instances {
            return Err("instances range must satisfy 1 <= min <= max".into());
        }
        if self.num_thing_classes == 0 || self.num_stuff_classes == 0 {
            return Err("class counts must be positive".into());
        }
        if self.num_stuff_classes > STUFF_PALETTE.len() {
            return Err(format!("at most {} stuff classes", STUFF_PALETTE.len()));
        }
        if self.num_thing_classes + self.num_stuff_classes >= u16::MAX as usize {
            return Err("too many classes".into());
        }
        for (name, p) in [
            ("occlusion_prob", self.occlusion_prob),
            ("identical_pair_prob", self.identical_pair_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.min_radius >= 2.0 && self.max_radius >= self.min_radius) {
            return Err("radius range must satisfy 2 <= min <= max".into());
        }
        Ok(())
    }

    /// Category id of a stuff class `1..=S`.
    pub fn stuff_category(&self, stuff: usize) -> u32 {
        (self.num_thing_classes + stuff) as u32
    }

    pub fn num_categories(&self) -> usize {
        self.num_thing_classes + self.num_stuff_classes
    }
}

/// Shape family used for a thing class. Classes cycle through the three kinds.
pub fn kind_for_class(class_id: u32) -> ShapeKind {
    match (class_id.max(1) - 1) % 3 {
        0 => ShapeKind::Ellipse,
        1 => ShapeKind::Rectangle,
        _ => ShapeKind::Triangle,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceAnnotation {
    pub shape: ShapeInstance,
    /// Full (amodal) mask.
    pub mask: BinaryMask,
    /// Tight box of `mask`.
    pub bbox: BoxXyxy,
    /// `mask` minus pixels covered by instances with higher z-order.
    pub visible: BinaryMask,
}

impl InstanceAnnotation {
    pub fn class_id(&self) -> u32 {
        self.shape.class_id
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneAnnotation {
    pub index: usize,
    /// 3 channels at stride 1, values `k / 255`.
    pub image: FeatureMap,
    /// Sorted by ascending z-order.
    pub instances: Vec<InstanceAnnotation>,
    pub panoptic: PanopticMap,
    /// Stuff class `1..=S` underneath every pixel.
    pub stuff_labels: Vec<u8>,
    /// Instance index pairs generated with identical appearance.
    pub identical_pairs: Vec<(usize, usize)>,
}

impl SceneAnnotation {
    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    /// Per-pixel semantic category: visible thing class, else the stuff category.
    pub fn semantic_labels(&self, num_thing_classes: usize) -> Vec<u32> {
        let (w, h) = (self.width(), self.height());
        let mut out: Vec<u32> = self
            .stuff_labels
            .iter()
            .map(|&s| (num_thing_classes + s as usize) as u32)
            .collect();
        for inst in &self.instances {
            for (x, y) in inst.visible.foreground() {
                out[y * w + x] = inst.class_id();
            }
        }
        debug_assert_eq!(out.len(), w * h);
        out
    }

    /// Mirror image, masks and annotations left-to-right.
    pub fn flip_horizontal(&self) -> SceneAnnotation {
        let (w, h) = (self.width(), self.height());
        let mut image = self.image.clone();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    image.set(c, y, x, self.image.at(c, y, w - 1 - x));
                }
            }
        }
        let instances = self
            .instances
            .iter()
            .map(|inst| {
                let mask = inst.mask.flip_horizontal();
                let mut shape = inst.shape.clone();
                shape.center.0 = w as f64 - shape.center.0;
                shape.rotation = -shape.rotation;
                InstanceAnnotation {
                    bbox: mask.tight_box().unwrap_or(inst.bbox),
                    mask,
                    visible: inst.visible.flip_horizontal(),
                    shape,
                }
            })
            .collect();
        let mut ids = vec![0u16; w * h];
        let mut stuff = vec![0u8; w * h];
        for y in 0..h {
            for x in 0..w {
                ids[y * w + x] = self.panoptic.id_at(w - 1 - x, y);
                stuff[y * w + x] = self.stuff_labels[y * w + w - 1 - x];
            }
        }
        let panoptic = PanopticMap::new(w, h, ids, self.panoptic.segments().to_vec())
            .expect("flipped panoptic map stays consistent");
        SceneAnnotation {
            index: self.index,
            image,
            instances,
            panoptic,
            stuff_labels: stuff,
            identical_pairs: self.identical_pairs.clone(),
        }
    }
}

/// Generator for scene `index`: ChaCha8 seeded with the dataset seed, one stream per scene.
pub fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn random_fill(rng: &mut ChaCha8Rng) -> [u8; 3] {
    let mut fill = [0u8; 3];
    for c in &mut fill {
        *c = rng.random_range(110..=255);
    }
    fill
}

fn random_shape(rng: &mut ChaCha8Rng, config: &DatasetConfig, z_order: i32) -> ShapeInstance {
    let class_id = rng.random_range(1..=config.num_thing_classes) as u32;
    let kind = kind_for_class(class_id);
    let rx = rng.random_range(config.min_radius..=config.max_radius);
    let ry = match kind {
        ShapeKind::Ellipse | ShapeKind::Rectangle => rx * rng.random_range(0.6..=1.0),
        ShapeKind::Triangle => rx,
    };
    let margin = 2.0;
    let cx = rng.random_range(margin..config.image_width as f64 - margin);
    let cy = rng.random_range(margin..config.image_height as f64 - margin);
    let rotation = match kind {
        ShapeKind::Ellipse | ShapeKind::Rectangle => rng.random_range(0.0..std::f64::consts::PI),
        ShapeKind::Triangle => rng.random_range(-0.5..0.5),
    };
    ShapeInstance {
        class_id,
        kind,
        center: (cx, cy),
        radii: (rx, ry),
        rotation,
        z_order,
        fill: random_fill(rng),
    }
}

fn iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let union = a.union_count(b);
    if union == 0 {
        0.0
    } else {
        a.intersection_count(b) as f64 / union as f64
    }
}

/// Visible masks for masks given in ascending z-order.
fn visible_masks(masks: &[BinaryMask]) -> Vec<BinaryMask> {
    let mut out = masks.to_vec();
    for i in 0..masks.len() {
        for above in &masks[i + 1..] {
            out[i] = out[i].and_not(above);
        }
    }
    out
}

struct Placement {
    shapes: Vec<ShapeInstance>,
    masks: Vec<BinaryMask>,
}

impl Placement {
    /// Accepts `candidates` (on top of everything placed) if every instance keeps
    /// enough visible area and full-mask overlaps stay bounded.
    fn try_add(
        &mut self,
        candidates: &[ShapeInstance],
        width: usize,
        height: usize,
        allow_overlap: bool,
    ) -> bool {
        let mut masks = self.masks.clone();
        let existing = masks.len();
        for shape in candidates {
            let r = rasterize(shape, width, height);
            if r.degenerate || r.mask.count() < MIN_VISIBLE_AREA {
                return false;
            }
            masks.push(r.mask);
        }
        for (i, new) in masks.iter().enumerate().skip(existing) {
            for (j, old) in masks[..i].iter().enumerate() {
                if iou(new, old) > MAX_INSTANCE_IOU {
                    return false;
                }
                if !allow_overlap && j < existing && new.intersection_count(old) > 0 {
                    return false;
                }
            }
        }
        if visible_masks(&masks)
            .iter()
            .any(|v| v.count() < MIN_VISIBLE_AREA)
        {
            return false;
        }
        self.shapes.extend_from_slice(candidates);
        self.masks = masks;
        true
    }
}

fn try_identical_pair(
    rng: &mut ChaCha8Rng,
    config: &DatasetConfig,
    placement: &mut Placement,
) -> bool {
    let (w, h) = (config.image_width, config.image_height);
    for _ in 0..PLACEMENT_RETRIES {
        let first = random_shape(rng, config, 1);
        let mut second = first.clone();
        second.z_order = 2;
        let reach = 0.5 * (first.radii.0 + first.radii.1);
        let dist = reach * rng.random_range(0.9..1.6);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        second.center = (
            first.center.0 + dist * angle.cos(),
            first.center.1 + dist * angle.sin(),
        );
        if !(second.center.0 > 1.0
            && second.center.0 < w as f64 - 1.0
            && second.center.1 > 1.0
            && second.center.1 < h as f64 - 1.0)
        {
            continue;
        }
        let a = rasterize(&first, w, h).mask;
        let b = rasterize(&second, w, h).mask;
        if a.intersection_count(&b) == 0 || iou(&a, &b) > MAX_PAIR_IOU {
            continue;
        }
        if placement.try_add(&[first, second], w, h, true) {
            return true;
        }
    }
    false
}

/// Scenes `0..config.num_scenes`, generated in parallel.
pub fn generate_dataset(config: &DatasetConfig) -> Vec<SceneAnnotation> {
    use rayon::prelude::*;
    (0..config.num_scenes)
        .into_par_iter()
        .map(|i| generate_scene(config, i))
        .collect()
}

/// Generates scene `index`; identical `(config.rng_seed, index)` gives identical output.
pub fn generate_scene(config: &DatasetConfig, index: usize) -> SceneAnnotation {
    let (w, h) = (config.image_width, config.image_height);
    let mut rng = scene_rng(config.rng_seed, index);

    // stuff: horizontal bands with random boundaries
    let s = config.num_stuff_classes;
    let mut bounds: Vec<usize> = (0..s - 1)
        .map(|_| rng.random_range(h / 4..=3 * h / 4))
        .collect();
    bounds.sort_unstable();
    let mut stuff_colors = Vec::with_capacity(s);
    for k in 0..s {
        let mut c = STUFF_PALETTE[k];
        for ch in &mut c {
            *ch = (*ch as i32 + rng.random_range(-8..=8)).clamp(0, 255) as u8;
        }
        stuff_colors.push(c);
    }
    let stuff_labels: Vec<u8> = (0..w * h)
        .map(|i| {
            let y = i / w;
            1 + bounds.iter().filter(|&&b| y >= b).count() as u8
        })
        .collect();

    let target = rng.random_range(config.min_instances..=config.max_instances);
    let mut placement = Placement {
        shapes: Vec::new(),
        masks: Vec::new(),
    };
    let mut identical_pairs = Vec::new();
    if target >= 2 && rng.random_bool(config.identical_pair_prob) {
        if try_identical_pair(&mut rng, config, &mut placement) {
            identical_pairs.push((0, 1));
        } else {
            log::warn!("scene {index}: could not place an identical-appearance pair");
        }
    }
    while placement.shapes.len() < target {
        let z = placement.shapes.len() as i32 + 1;
        let allow_overlap = rng.random_bool(config.occlusion_prob);
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let shape = random_shape(&mut rng, config, z);
            if placement.try_add(&[shape], w, h, allow_overlap) {
                placed = true;
                break;
            }
        }
        if !placed {
            log::warn!(
                "scene {index}: placed {} of {target} instances after bounded retries",
                placement.shapes.len()
            );
            break;
        }
    }

    let visible = visible_masks(&placement.masks);
    let mut pixels: Vec<[u8; 3]> = stuff_labels
        .iter()
        .map(|&l| stuff_colors[l as usize - 1])
        .collect();
    for (shape, mask) in placement.shapes.iter().zip(&placement.masks) {
        for (x, y) in mask.foreground() {
            pixels[y * w + x] = shape.fill;
        }
    }
    let mut data = vec![0.0; 3 * w * h];
    for (i, p) in pixels.iter().enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = p[c] as f64 / 255.0;
        }
    }
    let image = FeatureMap::new(3, h, w, 1, data).expect("finite pixels");

    let instances: Vec<InstanceAnnotation> = placement
        .shapes
        .into_iter()
        .zip(placement.masks)
        .zip(visible)
        .map(|((shape, mask), visible)| InstanceAnnotation {
            bbox: mask.tight_box().expect("placed masks are nonempty"),
            mask,
            visible,
            shape,
        })
        .collect();
    let panoptic = build_panoptic(config, &instances, &stuff_labels, w, h);
    SceneAnnotation {
        index,
        image,
        instances,
        panoptic,
        stuff_labels,
        identical_pairs,
    }
}

/// Instance `i` gets segment id `i + 1`; stuff class `s` gets `n + s`.
fn build_panoptic(
    config: &DatasetConfig,
    instances: &[InstanceAnnotation],
    stuff_labels: &[u8],
    w: usize,
    h: usize,
) -> PanopticMap {
    let n = instances.len();
    let mut ids: Vec<u16> = stuff_labels
        .iter()
        .map(|&s| (n + s as usize) as u16)
        .collect();
    for (i, inst) in instances.iter().enumerate() {
        for (x, y) in inst.visible.foreground() {
            ids[y * w + x] = (i + 1) as u16;
        }
    }
    let mut segments: Vec<Segment> = instances
        .iter()
        .enumerate()
        .map(|(i, inst)| Segment {
            id: (i + 1) as u16,
            category: inst.class_id(),
            is_thing: true,
            instance: Some(i),
            area: 0,
            score: None,
        })
        .collect();
    for s in 1..=config.num_stuff_classes {
        let id = (n + s) as u16;
        if ids.contains(&id) {
            segments.push(Segment {
                id,
                category: config.stuff_category(s),
                is_thing: false,
                instance: None,
                area: 0,
                score: None,
            });
        }
    }
    PanopticMap::new(w, h, ids, segments).expect("generated panoptic map is consistent")
}
