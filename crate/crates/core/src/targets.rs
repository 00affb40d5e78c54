//! Ground-truth assignment to pyramid locations.
//!
//! A location is responsible for an instance when its input-space point falls
//! in the instance's center region and its largest box distance fits the
//! level's size range.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{BinaryMask, BoxXyxy};
use crate::model::Level;
use crate::synthdata::SceneAnnotation;

#[derive(Debug, Error, PartialEq)]
pub enum TargetError {
    #[error("instance mask is empty")]
    EmptyMask,
    #[error("stride must be positive")]
    ZeroStride,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetConfig {
    /// Center-region half size in units of the level stride.
    pub center_radius: f64,
    /// Multiplies every level's size-range bound.
    pub range_scale: f64,
    /// Upper bound on sampled positives per image for the mask loss.
    pub positive_cap: usize,
    /// Keep block averages as mask targets instead of thresholding.
    pub soft_mask_targets: bool,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            center_radius: 1.5,
            range_scale: 1.0,
            positive_cap: 64,
            soft_mask_targets: false,
        }
    }
}

/// One ground-truth instance as seen by the assigner.
#[derive(Debug, Clone, PartialEq)]
pub struct GtInstance {
    pub class_id: u32,
    pub mask: BinaryMask,
}

impl GtInstance {
    pub fn bbox(&self) -> Option<BoxXyxy> {
        self.mask.tight_box()
    }
}

/// Instance-segmentation ground truth: the full (amodal) mask of every instance.
pub fn gt_instances(scene: &SceneAnnotation) -> Vec<GtInstance> {
    scene
        .instances
        .iter()
        .map(|i| GtInstance {
            class_id: i.class_id(),
            mask: i.mask.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocationTarget {
    pub level: Level,
    pub x: usize,
    pub y: usize,
    pub px: f64,
    pub py: f64,
    /// 0 is background.
    pub class_label: u32,
    /// `(l, t, r, b)`; zero for negatives.
    pub distances: [f64; 4],
    pub centerness: f64,
    pub instance: Option<usize>,
}

/// Grid of one level inside a [`TargetSet`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelGrid {
    pub level: Level,
    pub height: usize,
    pub width: usize,
    /// Index of the level's first location.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    /// Level by level, row-major within a level.
    pub locations: Vec<LocationTarget>,
    pub grids: Vec<LevelGrid>,
    /// Positive location indices of every instance, ascending.
    pub per_instance: Vec<Vec<usize>>,
    pub num_pos: usize,
    /// Instances that received no positive location.
    pub unassigned: Vec<usize>,
}

impl TargetSet {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.locations
            .iter()
            .enumerate()
            .filter(|(_, l)| l.class_label > 0)
            .map(|(i, _)| i)
    }

    pub fn index_of(&self, grid: usize, y: usize, x: usize) -> usize {
        let g = &self.grids[grid];
        g.offset + y * g.width + x
    }

    /// Grid index of a location index.
    pub fn grid_of(&self, index: usize) -> usize {
        self.grids
            .iter()
            .rposition(|g| g.offset <= index)
            .expect("index within target set")
    }
}

/// Input-space point of cell `(x, y)` at stride `s`.
pub fn map_location(x: usize, y: usize, s: usize) -> (f64, f64) {
    ((s / 2 + x * s) as f64, (s / 2 + y * s) as f64)
}

/// `(c_x - r s, c_y - r s, c_x + r s, c_y + r s)` around the mass center, unclipped.
pub fn center_region_unclipped(
    mask: &BinaryMask,
    stride: usize,
    r: f64,
) -> Result<BoxXyxy, TargetError> {
    if stride == 0 {
        return Err(TargetError::ZeroStride);
    }
    let (cx, cy) = mask.mass_center().ok_or(TargetError::EmptyMask)?;
    let d = r * stride as f64;
    Ok(BoxXyxy::new(cx - d, cy - d, cx + d, cy + d))
}

/// Center region clipped to the instance's tight box and the image.
pub fn center_region(mask: &BinaryMask, stride: usize, r: f64) -> Result<BoxXyxy, TargetError> {
    let raw = center_region_unclipped(mask, stride, r)?;
    let tb = mask.tight_box().ok_or(TargetError::EmptyMask)?;
    Ok(BoxXyxy::new(
        raw.x1.max(tb.x1).max(0.0),
        raw.y1.max(tb.y1).max(0.0),
        raw.x2.min(tb.x2).min(mask.width() as f64),
        raw.y2.min(tb.y2).min(mask.height() as f64),
    ))
}

/// `sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b))`, 0 when either pair is all zero.
pub fn centerness_target(l: f64, t: f64, r: f64, b: f64) -> f64 {
    let (lr, tb) = (l.max(r), t.max(b));
    if lr <= 0.0 || tb <= 0.0 {
        return 0.0;
    }
    (l.min(r) / lr * (t.min(b) / tb)).sqrt().clamp(0.0, 1.0)
}

/// `(lo, hi]` bounds on the largest box distance per level. The lowest level
/// also accepts 0 and the highest is unbounded above.
pub fn level_ranges(levels: &[Level], scale: f64) -> Vec<(f64, f64)> {
    let n = levels.len();
    levels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let s = l.stride() as f64 * scale;
            let lo = if i == 0 { f64::NEG_INFINITY } else { s };
            let hi = if i + 1 == n { f64::INFINITY } else { 2.0 * s };
            (lo, hi)
        })
        .collect()
}

/// Box distances from `(px, py)` to the sides of `b`.
pub fn box_distances(b: &BoxXyxy, px: f64, py: f64) -> [f64; 4] {
    [px - b.x1, py - b.y1, b.x2 - px, b.y2 - py]
}

/// Labels every location of `levels` for an image of `height x width`.
pub fn assign_targets(
    instances: &[GtInstance],
    height: usize,
    width: usize,
    levels: &[Level],
    cfg: &TargetConfig,
) -> TargetSet {
    let mut levels = levels.to_vec();
    levels.sort();
    let ranges = level_ranges(&levels, cfg.range_scale);
    let boxes: Vec<Option<BoxXyxy>> = instances.iter().map(GtInstance::bbox).collect();
    let areas: Vec<usize> = instances.iter().map(|i| i.mask.count()).collect();

    let mut grids = Vec::with_capacity(levels.len());
    let mut locations = Vec::new();
    for (li, &level) in levels.iter().enumerate() {
        let s = level.stride();
        let (gh, gw) = (height / s, width / s);
        let offset = locations.len();
        grids.push(LevelGrid {
            level,
            height: gh,
            width: gw,
            offset,
        });
        for y in 0..gh {
            for x in 0..gw {
                let (px, py) = map_location(x, y, s);
                locations.push(LocationTarget {
                    level,
                    x,
                    y,
                    px,
                    py,
                    class_label: 0,
                    distances: [0.0; 4],
                    centerness: 0.0,
                    instance: None,
                });
            }
        }
        let (lo, hi) = ranges[li];
        for (k, inst) in instances.iter().enumerate() {
            let Some(bbox) = boxes[k] else { continue };
            let Ok(region) = center_region(&inst.mask, s, cfg.center_radius) else {
                continue;
            };
            // cells whose mapped point can fall inside the region
            let half = (s / 2) as f64;
            let sf = s as f64;
            let first = |v: f64| ((v - half) / sf).ceil().max(0.0) as usize;
            let last = |v: f64, n: usize| {
                let c = ((v - half) / sf).floor();
                if c < 0.0 {
                    None
                } else {
                    Some((c as usize).min(n.saturating_sub(1)))
                }
            };
            let (Some(x_hi), Some(y_hi)) = (last(region.x2, gw), last(region.y2, gh)) else {
                continue;
            };
            for y in first(region.y1)..=y_hi {
                for x in first(region.x1)..=x_hi {
                    let (px, py) = map_location(x, y, s);
                    if !region.contains_point(px, py) {
                        continue;
                    }
                    let d = box_distances(&bbox, px, py);
                    let m = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    if d.iter().any(|&v| v < 0.0) || m <= lo || m > hi {
                        continue;
                    }
                    let loc = &mut locations[offset + y * gw + x];
                    let better = match loc.instance {
                        None => true,
                        Some(prev) => areas[k] < areas[prev],
                    };
                    if better {
                        loc.class_label = inst.class_id;
                        loc.distances = d;
                        loc.centerness = centerness_target(d[0], d[1], d[2], d[3]);
                        loc.instance = Some(k);
                    }
                }
            }
        }
    }
    let mut per_instance = vec![Vec::new(); instances.len()];
    for (i, loc) in locations.iter().enumerate() {
        if let Some(k) = loc.instance {
            per_instance[k].push(i);
        }
    }
    let num_pos = per_instance.iter().map(Vec::len).sum();
    let unassigned = per_instance
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_empty())
        .map(|(k, _)| k)
        .collect();
    TargetSet {
        locations,
        grids,
        per_instance,
        num_pos,
        unassigned,
    }
}

/// Picks at most `cap` positives for the mask loss.
///
/// Each instance's positives are ranked by `scores[i]` (descending, ties by
/// level, y, x). Instances then take turns: round `r` offers every
/// instance's `r`-th best location, and a round is consumed in score order
/// until the cap is hit. Returned indices are ascending.
pub fn sample_positives(targets: &TargetSet, scores: &[f64], cap: usize) -> Vec<usize> {
    assert_eq!(
        scores.len(),
        targets.locations.len(),
        "one score per location"
    );
    let key = |i: usize| {
        let l = &targets.locations[i];
        (l.level, l.y, l.x)
    };
    let order = |a: &usize, b: &usize| {
        scores[*b]
            .total_cmp(&scores[*a])
            .then_with(|| key(*a).cmp(&key(*b)))
    };
    let ranked: Vec<Vec<usize>> = targets
        .per_instance
        .iter()
        .map(|v| {
            let mut v = v.clone();
            v.sort_by(order);
            v
        })
        .collect();
    let mut chosen = Vec::new();
    let rounds = ranked.iter().map(Vec::len).max().unwrap_or(0);
    'outer: for r in 0..rounds {
        let mut offered: Vec<usize> = ranked.iter().filter_map(|v| v.get(r).copied()).collect();
        offered.sort_by(order);
        for i in offered {
            if chosen.len() >= cap {
                break 'outer;
            }
            chosen.push(i);
        }
    }
    chosen.sort_unstable();
    chosen
}

/// Block-averages `mask` by `stride` (zero padded) and thresholds at 0.5
/// unless `soft`. Output is row-major `ceil(h/s) x ceil(w/s)`.
pub fn downsample_gt_mask(
    mask: &BinaryMask,
    stride: usize,
    soft: bool,
) -> Result<Vec<f64>, TargetError> {
    if stride == 0 {
        return Err(TargetError::ZeroStride);
    }
    let (w, h) = (mask.width(), mask.height());
    let (ow, oh) = (w.div_ceil(stride), h.div_ceil(stride));
    let mut out = vec![0.0; ow * oh];
    for (x, y) in mask.foreground() {
        out[(y / stride) * ow + x / stride] += 1.0;
    }
    let norm = (stride * stride) as f64;
    for v in &mut out {
        *v /= norm;
        if !soft {
            *v = if *v >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_scene, DatasetConfig};
    use proptest::prelude::*;

    const LEVELS: [Level; 3] = [Level::P3, Level::P4, Level::P5];

    fn square(w: usize, h: usize, x0: usize, y0: usize, side: usize) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| {
            (x0..x0 + side).contains(&x) && (y0..y0 + side).contains(&y)
        })
    }

    /// Visits every (level, y, x) and every instance with no window shortcut.
    fn brute_force(
        instances: &[GtInstance],
        h: usize,
        w: usize,
        cfg: &TargetConfig,
    ) -> Vec<Option<usize>> {
        let mut out = Vec::new();
        for (li, level) in LEVELS.iter().enumerate() {
            let s = level.stride();
            let lo = if li == 0 {
                -1.0
            } else {
                s as f64 * cfg.range_scale
            };
            let hi = if li == 2 {
                f64::MAX
            } else {
                2.0 * s as f64 * cfg.range_scale
            };
            for y in 0..h / s {
                for x in 0..w / s {
                    let px = (s / 2 + x * s) as f64;
                    let py = (s / 2 + y * s) as f64;
                    let mut best: Option<(usize, usize)> = None;
                    for (k, inst) in instances.iter().enumerate() {
                        let pts: Vec<(usize, usize)> = inst.mask.foreground().collect();
                        let n = pts.len() as f64;
                        let cx = pts.iter().map(|p| p.0 as f64).sum::<f64>() / n;
                        let cy = pts.iter().map(|p| p.1 as f64).sum::<f64>() / n;
                        let x1 = pts.iter().map(|p| p.0).min().unwrap() as f64;
                        let x2 = pts.iter().map(|p| p.0).max().unwrap() as f64 + 1.0;
                        let y1 = pts.iter().map(|p| p.1).min().unwrap() as f64;
                        let y2 = pts.iter().map(|p| p.1).max().unwrap() as f64 + 1.0;
                        let rs = cfg.center_radius * s as f64;
                        let in_region = px >= (cx - rs).max(x1).max(0.0)
                            && px <= (cx + rs).min(x2).min(w as f64)
                            && py >= (cy - rs).max(y1).max(0.0)
                            && py <= (cy + rs).min(y2).min(h as f64);
                        let d = [px - x1, py - y1, x2 - px, y2 - py];
                        let m = d.iter().cloned().fold(f64::MIN, f64::max);
                        if in_region && d.iter().all(|&v| v >= 0.0) && m > lo && m <= hi {
                            let area = pts.len();
                            if best.is_none_or(|(_, a)| area < a) {
                                best = Some((k, area));
                            }
                        }
                    }
                    out.push(best.map(|b| b.0));
                }
            }
        }
        out
    }

    #[test]
    fn mapping_examples() {
        assert_eq!(map_location(0, 0, 8), (4.0, 4.0));
        assert_eq!(map_location(1, 2, 8), (12.0, 20.0));
        assert_eq!(map_location(3, 3, 16), (56.0, 56.0));
    }

    #[test]
    fn center_region_examples() {
        let m = square(32, 32, 4, 4, 6);
        assert_eq!(m.mass_center(), Some((6.5, 6.5)));
        let one = BinaryMask::from_fn(32, 32, |x, y| x == 10 && y == 10);
        assert_eq!(
            center_region_unclipped(&one, 8, 1.5).unwrap(),
            BoxXyxy::new(-2.0, -2.0, 22.0, 22.0)
        );
        assert_eq!(
            center_region(&one, 8, 1.5).unwrap(),
            BoxXyxy::new(10.0, 10.0, 11.0, 11.0)
        );
        assert_eq!(
            center_region(&BinaryMask::new(4, 4), 8, 1.5),
            Err(TargetError::EmptyMask)
        );

        let l_shape = BinaryMask::from_fn(16, 16, |x, y| {
            (x < 3 && y < 9) || (y >= 6 && y < 9 && x < 8)
        });
        let pts: Vec<(usize, usize)> = l_shape.foreground().collect();
        let cx = pts.iter().map(|p| p.0).sum::<usize>() as f64 / pts.len() as f64;
        let cy = pts.iter().map(|p| p.1).sum::<usize>() as f64 / pts.len() as f64;
        let (mx, my) = l_shape.mass_center().unwrap();
        assert!((mx - cx).abs() < 1e-12 && (my - cy).abs() < 1e-12);
    }

    #[test]
    fn centerness_examples() {
        assert_eq!(centerness_target(3.0, 2.0, 3.0, 2.0), 1.0);
        assert!((centerness_target(1.0, 1.0, 3.0, 3.0) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(centerness_target(0.0, 2.0, 5.0, 2.0), 0.0);
        assert_eq!(centerness_target(0.0, 2.0, 0.0, 2.0), 0.0);
    }

    proptest! {
        #[test]
        fn centerness_properties(l in 0.0f64..50.0, t in 0.0f64..50.0, r in 0.0f64..50.0, b in 0.0f64..50.0) {
            let c = centerness_target(l, t, r, b);
            prop_assert!((0.0..=1.0).contains(&c));
            prop_assert_eq!(c, centerness_target(r, t, l, b));
            prop_assert_eq!(c, centerness_target(l, b, r, t));
            if c == 1.0 {
                prop_assert!((l - r).abs() < 1e-9 * l.max(r) && (t - b).abs() < 1e-9 * t.max(b));
            }
        }

        #[test]
        fn sampling_is_capped_and_deterministic(seed in 0u64..500, cap in 1usize..80) {
            let scene = generate_scene(&DatasetConfig { rng_seed: seed, ..DatasetConfig::default() }, 0);
            let gts = gt_instances(&scene);
            let ts = assign_targets(&gts, 64, 64, &LEVELS, &TargetConfig::default());
            let scores: Vec<f64> = (0..ts.locations.len()).map(|i| ((i * 37 + seed as usize) % 11) as f64 / 11.0).collect();
            let a = sample_positives(&ts, &scores, cap);
            prop_assert!(a.len() <= cap);
            prop_assert_eq!(a.len(), ts.num_pos.min(cap));
            prop_assert_eq!(&a, &sample_positives(&ts, &scores, cap));
            prop_assert!(a.iter().all(|&i| ts.locations[i].class_label > 0));
        }
    }

    #[test]
    fn tiny_instance_gets_no_positives() {
        let inst = GtInstance {
            class_id: 1,
            mask: BinaryMask::from_fn(64, 64, |x, y| x == 10 && y == 10),
        };
        let ts = assign_targets(&[inst], 64, 64, &LEVELS, &TargetConfig::default());
        assert_eq!(ts.num_pos, 0);
        assert_eq!(ts.unassigned, vec![0]);
    }

    #[test]
    fn centered_square_matches_scan() {
        let inst = GtInstance {
            class_id: 2,
            mask: square(64, 64, 16, 16, 32),
        };
        let cfg = TargetConfig::default();
        let ts = assign_targets(std::slice::from_ref(&inst), 64, 64, &LEVELS, &cfg);
        let oracle = brute_force(std::slice::from_ref(&inst), 64, 64, &cfg);
        let got: Vec<Option<usize>> = ts.locations.iter().map(|l| l.instance).collect();
        assert_eq!(got, oracle);
        assert!(ts.num_pos > 0);
        // max distance for a 32-wide box is at most 32: P4 cells only
        assert!(ts.positives().all(|i| ts.locations[i].level == Level::P4));
        assert!(ts.positives().all(|i| ts.locations[i].class_label == 2));
    }

    #[test]
    fn disjoint_instances_have_disjoint_positives() {
        let a = GtInstance {
            class_id: 1,
            mask: square(64, 64, 2, 2, 12),
        };
        let b = GtInstance {
            class_id: 3,
            mask: square(64, 64, 40, 40, 14),
        };
        let ts = assign_targets(&[a, b], 64, 64, &LEVELS, &TargetConfig::default());
        assert!(!ts.per_instance[0].is_empty() && !ts.per_instance[1].is_empty());
        assert!(ts.per_instance[0]
            .iter()
            .all(|i| !ts.per_instance[1].contains(i)));
    }

    #[test]
    fn agrees_with_brute_force_on_random_scenes() {
        let cfg = TargetConfig::default();
        let data = DatasetConfig {
            num_scenes: 200,
            occlusion_prob: 0.6,
            ..DatasetConfig::default()
        };
        for i in 0..200 {
            let scene = generate_scene(&data, i);
            let gts = gt_instances(&scene);
            let ts = assign_targets(&gts, 64, 64, &LEVELS, &cfg);
            let got: Vec<Option<usize>> = ts.locations.iter().map(|l| l.instance).collect();
            assert_eq!(got, brute_force(&gts, 64, 64, &cfg), "scene {i}");
            assert_eq!(ts.num_pos, ts.positives().count());
            for p in ts.positives() {
                let l = &ts.locations[p];
                let k = l.instance.unwrap();
                let s = l.level.stride() as f64 * cfg.center_radius;
                let b = gts[k].bbox().unwrap();
                assert!(
                    l.px >= b.x1 - s && l.px <= b.x2 + s && l.py >= b.y1 - s && l.py <= b.y2 + s
                );
                assert!(l.distances.iter().all(|&d| d >= 0.0));
                assert_eq!(l.class_label, gts[k].class_id);
            }
        }
    }

    #[test]
    fn sampling_examples() {
        let inst = GtInstance {
            class_id: 1,
            mask: square(64, 64, 16, 16, 32),
        };
        let ts = assign_targets(&[inst], 64, 64, &LEVELS, &TargetConfig::default());
        let scores = vec![0.5; ts.locations.len()];
        assert_eq!(sample_positives(&ts, &scores, 64).len(), ts.num_pos);

        // 70 single-positive instances: keep the 64 best scores
        let n = 70;
        let locations: Vec<LocationTarget> = (0..n)
            .map(|k| LocationTarget {
                level: Level::P3,
                x: k % 8,
                y: k / 8,
                px: 0.0,
                py: 0.0,
                class_label: 1,
                distances: [1.0; 4],
                centerness: 1.0,
                instance: Some(k),
            })
            .collect();
        let ts = TargetSet {
            grids: vec![LevelGrid {
                level: Level::P3,
                height: 9,
                width: 8,
                offset: 0,
            }],
            per_instance: (0..n).map(|k| vec![k]).collect(),
            num_pos: n,
            unassigned: vec![],
            locations,
        };
        let scores: Vec<f64> = (0..n).map(|k| ((k * 29) % n) as f64).collect();
        let got = sample_positives(&ts, &scores, 64);
        let mut oracle: Vec<usize> = (0..n).collect();
        oracle.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]));
        oracle.truncate(64);
        oracle.sort_unstable();
        assert_eq!(got, oracle);

        // equal scores fall back to (level, y, x)
        let flat = vec![1.0; n];
        assert_eq!(sample_positives(&ts, &flat, 5), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn round_robin_keeps_every_instance() {
        let a = GtInstance {
            class_id: 1,
            mask: square(64, 64, 0, 0, 30),
        };
        let b = GtInstance {
            class_id: 2,
            mask: square(64, 64, 34, 34, 30),
        };
        let ts = assign_targets(&[a, b], 64, 64, &LEVELS, &TargetConfig::default());
        assert!(ts.per_instance.iter().all(|v| v.len() >= 2));
        let scores: Vec<f64> = (0..ts.locations.len())
            .map(|i| {
                if ts.locations[i].instance == Some(0) {
                    0.9
                } else {
                    0.1
                }
            })
            .collect();
        let got = sample_positives(&ts, &scores, 2);
        assert_eq!(got.len(), 2);
        assert!(got.iter().any(|&i| ts.locations[i].instance == Some(1)));
    }

    #[test]
    fn downsample_examples() {
        let ones = BinaryMask::from_fn(8, 8, |_, _| true);
        for s in [2, 4, 8] {
            assert!(downsample_gt_mask(&ones, s, false)
                .unwrap()
                .iter()
                .all(|&v| v == 1.0));
        }
        let checker = BinaryMask::from_fn(8, 8, |x, y| (x + y) % 2 == 0);
        assert!(downsample_gt_mask(&checker, 2, true)
            .unwrap()
            .iter()
            .all(|&v| v == 0.5));
        assert!(downsample_gt_mask(&checker, 2, false)
            .unwrap()
            .iter()
            .all(|&v| v == 1.0));
        assert!(downsample_gt_mask(&BinaryMask::new(8, 8), 4, false)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        // 5x5 padded to 6x6 at stride 2: the corner block holds one of four pixels
        let odd = BinaryMask::from_fn(5, 5, |_, _| true);
        let d = downsample_gt_mask(&odd, 2, true).unwrap();
        assert_eq!(d.len(), 9);
        assert_eq!(d[8], 0.25);
    }
}
