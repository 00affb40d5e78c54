//! From head outputs to instance masks and panoptic maps.

mod merge;
mod output;

use std::cell::Cell;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mask::{BinaryMask, BoxXyxy};
use crate::model::{apply_mask_heads_batched, HeadOutputs, Level, MaskHead, Model, ModelError};
use crate::numerics::{bilinear_upsample, resize_bilinear, sigmoid, FeatureMap};
use crate::panoptic::PanopticMap;
use crate::targets::map_location;

pub use merge::{panoptic_merge, semantic_category_map, CategoryMap, MergeConfig};
pub use output::{
    rle_decode, rle_encode, write_inference, DetectionRecord, InferenceFile, RLE_FORMAT,
};

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Write {
        path: std::path::PathBuf,
        reason: String,
    },
}

thread_local! {
    static BOX_READS: Cell<usize> = const { Cell::new(0) };
}

/// Number of [`Detection::bbox`] calls on this thread since the last reset.
pub fn box_reads() -> usize {
    BOX_READS.with(Cell::get)
}

pub fn reset_box_reads() {
    BOX_READS.with(|c| c.set(0));
}

/// A decoded location that passed the score floor.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_id: u32,
    pub score: f64,
    bbox: BoxXyxy,
    pub level: Level,
    /// Position of the level in the model's head list.
    pub head_index: usize,
    pub x: usize,
    pub y: usize,
    /// Generated filter parameters; `None` for a static-head model.
    pub theta: Option<Vec<f64>>,
}

impl Detection {
    pub fn new(class_id: u32, score: f64, bbox: BoxXyxy, level: Level, x: usize, y: usize) -> Self {
        Self {
            class_id,
            score,
            bbox,
            level,
            head_index: 0,
            x,
            y,
            theta: None,
        }
    }

    /// Predicted box. Every call is counted per thread.
    pub fn bbox(&self) -> BoxXyxy {
        BOX_READS.with(|c| c.set(c.get() + 1));
        self.bbox
    }

    /// Input-space point of the generating location.
    pub fn origin(&self) -> (f64, f64) {
        map_location(self.x, self.y, self.level.stride())
    }

    fn order_key(&self) -> (Level, usize, usize) {
        (self.level, self.y, self.x)
    }
}

/// Descending score, ties by (level, y, x).
fn by_score(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.order_key().cmp(&b.order_key()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceResult {
    pub class_id: u32,
    pub score: f64,
    pub level: Level,
    pub x: usize,
    pub y: usize,
    /// Probabilities at input resolution.
    pub soft: FeatureMap,
    pub mask: BinaryMask,
    pub area: usize,
    /// Set when nothing survived the threshold.
    pub empty: bool,
    /// Predicted box on the box-NMS path, the mask's tight box otherwise.
    pub bbox: Option<BoxXyxy>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NmsMode {
    Box,
    Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub score_threshold: f64,
    pub pre_nms_top_k: usize,
    pub nms_mode: NmsMode,
    pub box_iou: f64,
    pub mask_iou: f64,
    pub max_detections: usize,
    pub mask_threshold: f64,
    /// Stitch a panoptic map from the semantic branch.
    pub panoptic: bool,
    pub merge: MergeConfig,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            pre_nms_top_k: 1000,
            nms_mode: NmsMode::Box,
            box_iou: 0.6,
            mask_iou: 0.6,
            max_detections: 100,
            mask_threshold: 0.5,
            panoptic: false,
            merge: MergeConfig::default(),
        }
    }
}

/// Thresholded detections of every level, best first. At most `top_k` per level.
pub fn decode_detections(
    outputs: &[HeadOutputs],
    image_height: usize,
    image_width: usize,
    score_threshold: f64,
    top_k: usize,
) -> Vec<Detection> {
    let mut all = Vec::new();
    for (head_index, out) in outputs.iter().enumerate() {
        let s = out.level.stride();
        let (h, w) = (out.cls_logits.height(), out.cls_logits.width());
        let mut level_dets = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let (mut best, mut best_p) = (0, f64::NEG_INFINITY);
                for c in 0..out.cls_logits.channels() {
                    let p = sigmoid(out.cls_logits.at(c, y, x));
                    if p > best_p {
                        best = c;
                        best_p = p;
                    }
                }
                let score = (best_p * sigmoid(out.ctr_logits.at(0, y, x))).sqrt();
                if !(score > score_threshold) {
                    continue;
                }
                let (px, py) = map_location(x, y, s);
                let [l, t, r, b] = out.box_distances(y, x);
                let bbox = BoxXyxy::new(
                    (px - l).max(0.0),
                    (py - t).max(0.0),
                    (px + r).min(image_width as f64),
                    (py + b).min(image_height as f64),
                );
                let theta = out
                    .controller
                    .as_ref()
                    .map(|c| (0..c.channels()).map(|k| c.at(k, y, x)).collect());
                level_dets.push(Detection {
                    class_id: best as u32 + 1,
                    score,
                    bbox,
                    level: out.level,
                    head_index,
                    x,
                    y,
                    theta,
                });
            }
        }
        level_dets.sort_by(by_score);
        level_dets.truncate(top_k);
        all.extend(level_dets);
    }
    all.sort_by(by_score);
    all
}

/// Greedy same-class suppression of boxes with IoU above `iou`, then the best `max_keep`.
pub fn box_nms(detections: &[Detection], iou: f64, max_keep: usize) -> Vec<Detection> {
    let mut order: Vec<&Detection> = detections.iter().collect();
    order.sort_by(|a, b| by_score(a, b));
    let mut kept: Vec<&Detection> = Vec::new();
    for d in order {
        if kept.len() >= max_keep {
            break;
        }
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && k.bbox().iou(&d.bbox()) > iou);
        if !suppressed {
            kept.push(d);
        }
    }
    kept.into_iter().cloned().collect()
}

/// Greedy same-class suppression by mask IoU, then the best `max_keep`.
pub fn mask_nms(results: &[InstanceResult], iou: f64, max_keep: usize) -> Vec<InstanceResult> {
    let mut order: Vec<&InstanceResult> = results.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| (a.level, a.y, a.x).cmp(&(b.level, b.y, b.x)))
    });
    let mut kept: Vec<&InstanceResult> = Vec::new();
    for r in order {
        if kept.len() >= max_keep {
            break;
        }
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == r.class_id && mask_iou(&k.mask, &r.mask) > iou);
        if !suppressed {
            kept.push(r);
        }
    }
    kept.into_iter().cloned().collect()
}

/// Intersection over union of two binary masks; 0 when both are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let u = a.union_count(b);
    if u == 0 {
        0.0
    } else {
        a.intersection_count(b) as f64 / u as f64
    }
}

/// Head for one detection: its generated filters or the model's static head.
fn head_for(model: &Model, det: &Detection) -> Result<MaskHead, ModelError> {
    match &det.theta {
        Some(theta) => crate::model::unpack_filter_params(theta, &model.config().mask_shape()),
        None => model.static_head().ok_or_else(|| {
            ModelError::Config("detection has no filters and the model no static head".into())
        }),
    }
}

/// Runs the mask head of every detection over `bottom` and brings the
/// probabilities to input resolution.
pub fn compute_masks(
    model: &Model,
    detections: &[Detection],
    bottom: &FeatureMap,
    image_height: usize,
    image_width: usize,
    mask_threshold: f64,
) -> Result<Vec<InstanceResult>, ModelError> {
    let heads = detections
        .iter()
        .map(|d| Ok((head_for(model, d)?, model.coords_for(d.origin(), bottom))))
        .collect::<Result<Vec<_>, ModelError>>()?;
    let logits = apply_mask_heads_batched(bottom, &heads)?;
    let factor = model.config().upsample_factor;
    logits
        .into_par_iter()
        .zip(detections.par_iter())
        .map(|(z, d)| {
            let prob = crate::numerics::pointwise(&z, crate::numerics::Pointwise::Sigmoid);
            let up = bilinear_upsample(&prob, factor)?;
            let soft = resize_bilinear(&up, image_height, image_width)?.with_stride(1);
            let mask = BinaryMask::from_vec(
                image_width,
                image_height,
                soft.data().iter().map(|&p| p >= mask_threshold).collect(),
            );
            let area = mask.count();
            Ok(InstanceResult {
                class_id: d.class_id,
                score: d.score,
                level: d.level,
                x: d.x,
                y: d.y,
                bbox: mask.tight_box(),
                soft,
                empty: area == 0,
                area,
                mask,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct InferenceOutput {
    /// Detections before suppression.
    pub candidates: usize,
    pub instances: Vec<InstanceResult>,
    pub panoptic: Option<PanopticMap>,
}

/// The whole test-time path for one image.
pub fn run_inference(
    model: &Model,
    image: &FeatureMap,
    cfg: &InferenceConfig,
) -> Result<InferenceOutput, ModelError> {
    let fwd = model.forward(image)?;
    let outputs = fwd.head_outputs();
    let bottom = fwd.bottom_features().clone();
    let (h, w) = (image.height(), image.width());
    let dets = decode_detections(&outputs, h, w, cfg.score_threshold, cfg.pre_nms_top_k);
    let candidates = dets.len();
    let instances = match cfg.nms_mode {
        NmsMode::Box => {
            let kept = box_nms(&dets, cfg.box_iou, cfg.max_detections);
            let mut results = compute_masks(model, &kept, &bottom, h, w, cfg.mask_threshold)?;
            for (r, d) in results.iter_mut().zip(&kept) {
                r.bbox = Some(d.bbox());
            }
            results
        }
        NmsMode::Mask => {
            let results = compute_masks(model, &dets, &bottom, h, w, cfg.mask_threshold)?;
            mask_nms(&results, cfg.mask_iou, cfg.max_detections)
        }
    };
    let panoptic = match fwd.semantic.filter(|_| cfg.panoptic) {
        Some(node) => {
            let sem = semantic_category_map(fwd.tape.value(node), h, w)?;
            Some(panoptic_merge(
                &instances,
                &sem,
                model.config().num_classes,
                &cfg.merge,
            ))
        }
        None => None,
    };
    Ok(InferenceOutput {
        candidates,
        instances,
        panoptic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{apply_mask_head, make_relative_coords, unpack_filter_params, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn head_outputs(level: Level, h: usize, w: usize, cls: f64, ctr: f64, reg: f64) -> HeadOutputs {
        HeadOutputs {
            level,
            cls_logits: FeatureMap::filled(3, h, w, level.stride(), cls),
            ctr_logits: FeatureMap::filled(1, h, w, level.stride(), ctr),
            box_reg: FeatureMap::filled(4, h, w, level.stride(), reg),
            controller: None,
        }
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn decode_examples() {
        let none = head_outputs(Level::P3, 2, 2, -1e9, 0.0, 0.0);
        assert!(decode_detections(&[none], 16, 16, 0.05, 1000).is_empty());

        let mut out = head_outputs(Level::P3, 4, 4, -30.0, -30.0, (0.5f64).ln());
        out.cls_logits.set(1, 2, 1, logit(0.81));
        out.ctr_logits.set(0, 2, 1, 40.0);
        let dets = decode_detections(&[out], 32, 32, 0.05, 1000);
        assert_eq!(dets.len(), 1);
        let d = &dets[0];
        assert!((d.score - 0.9).abs() < 1e-9);
        assert_eq!(d.class_id, 2);
        // exp(ln 0.5) * 8 = 4 around (12, 20)
        assert_eq!(d.bbox(), BoxXyxy::new(8.0, 16.0, 16.0, 24.0));
    }

    fn det(class_id: u32, score: f64, b: BoxXyxy, x: usize) -> Detection {
        Detection::new(class_id, score, b, Level::P3, x, 0)
    }

    /// Keeps `i` iff no earlier kept same-class entry overlaps it beyond the threshold.
    fn greedy_oracle(
        scores: &[f64],
        classes: &[u32],
        overlap: &dyn Fn(usize, usize) -> f64,
        thr: f64,
    ) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let mut kept: Vec<usize> = Vec::new();
        for i in idx {
            if kept
                .iter()
                .all(|&k| classes[k] != classes[i] || overlap(k, i) <= thr)
            {
                kept.push(i);
            }
        }
        kept
    }

    #[test]
    fn box_nms_examples() {
        let a = BoxXyxy::new(0.0, 0.0, 10.0, 10.0);
        let b = BoxXyxy::new(0.0, 0.0, 10.0, 7.0);
        assert!((a.iou(&b) - 0.7).abs() < 1e-12);
        let kept = box_nms(&[det(1, 0.8, b, 1), det(1, 0.9, a, 0)], 0.6, 100);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        assert_eq!(
            box_nms(&[det(1, 0.8, a, 1), det(2, 0.9, a, 0)], 0.6, 100).len(),
            2
        );
        let many: Vec<Detection> = (0..150)
            .map(|i| {
                det(
                    1,
                    0.5 + i as f64 * 1e-3,
                    BoxXyxy::new(i as f64 * 3.0, 0.0, i as f64 * 3.0 + 2.0, 2.0),
                    i,
                )
            })
            .collect();
        let kept = box_nms(&many, 0.6, 100);
        assert_eq!(kept.len(), 100);
        assert!(kept.iter().all(|d| d.score >= 0.5 + 50.0 * 1e-3 - 1e-12));
    }

    #[test]
    fn nms_matches_brute_force_on_random_fixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let n = rng.random_range(1..15);
            let dets: Vec<Detection> = (0..n)
                .map(|i| {
                    let x1 = rng.random_range(0.0..20.0);
                    let y1 = rng.random_range(0.0..20.0);
                    let b = BoxXyxy::new(
                        x1,
                        y1,
                        x1 + rng.random_range(1.0..12.0),
                        y1 + rng.random_range(1.0..12.0),
                    );
                    det(rng.random_range(1..3), rng.random_range(0.0..1.0), b, i)
                })
                .collect();
            let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
            let classes: Vec<u32> = dets.iter().map(|d| d.class_id).collect();
            let boxes: Vec<BoxXyxy> = dets.iter().map(|d| d.bbox()).collect();
            let oracle = greedy_oracle(&scores, &classes, &|a, b| boxes[a].iou(&boxes[b]), 0.6);
            let got: Vec<usize> = box_nms(&dets, 0.6, 100).iter().map(|d| d.x).collect();
            assert_eq!(got, oracle);

            let results: Vec<InstanceResult> = dets
                .iter()
                .map(|d| {
                    let b = d.bbox();
                    let mask = BinaryMask::from_fn(32, 32, |x, y| {
                        b.contains_point(x as f64 + 0.5, y as f64 + 0.5)
                    });
                    instance(d.class_id, d.score, d.x, mask)
                })
                .collect();
            let masks: Vec<BinaryMask> = results.iter().map(|r| r.mask.clone()).collect();
            let oracle = greedy_oracle(
                &scores,
                &classes,
                &|a, b| mask_iou(&masks[a], &masks[b]),
                0.6,
            );
            let got: Vec<usize> = mask_nms(&results, 0.6, 100).iter().map(|r| r.x).collect();
            assert_eq!(got, oracle);
        }
    }

    fn instance(class_id: u32, score: f64, x: usize, mask: BinaryMask) -> InstanceResult {
        let area = mask.count();
        InstanceResult {
            class_id,
            score,
            level: Level::P3,
            x,
            y: 0,
            soft: FeatureMap::zeros(1, mask.height(), mask.width(), 1),
            bbox: mask.tight_box(),
            empty: area == 0,
            area,
            mask,
        }
    }

    #[test]
    fn mask_nms_examples() {
        let m = BinaryMask::from_fn(8, 8, |x, _| x < 4);
        let other = BinaryMask::from_fn(8, 8, |x, _| x >= 4);
        assert_eq!(
            mask_nms(
                &[
                    instance(1, 0.9, 0, m.clone()),
                    instance(1, 0.8, 1, m.clone())
                ],
                0.6,
                100
            )
            .len(),
            1
        );
        assert_eq!(
            mask_nms(
                &[instance(1, 0.9, 0, m), instance(1, 0.8, 1, other)],
                0.6,
                100
            )
            .len(),
            2
        );
    }

    fn trained_like_model(seed: u64) -> Model {
        let mut model = Model::new(ModelConfig::default(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for name in ["head.controller.weight", "head.cls_logits.bias"] {
            let id = model.params().find(name).unwrap();
            for v in model.params_mut().get_mut(id) {
                *v = if name.ends_with("bias") {
                    1.0
                } else {
                    rng.random_range(-0.2..0.2)
                };
            }
        }
        model
    }

    fn random_image(seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(
            3,
            64,
            64,
            1,
            (0..3 * 64 * 64)
                .map(|_| rng.random_range(0.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn compute_masks_batched_equals_sequential() {
        let model = trained_like_model(4);
        let fwd = model.forward(&random_image(5)).unwrap();
        let outputs = fwd.head_outputs();
        let bottom = fwd.bottom_features().clone();
        let dets = decode_detections(&outputs, 64, 64, 0.05, 1000);
        assert!(dets.len() >= 2);
        assert!(compute_masks(&model, &[], &bottom, 64, 64, 0.5)
            .unwrap()
            .is_empty());
        let two = &dets[..2];
        let got = compute_masks(&model, two, &bottom, 64, 64, 0.5).unwrap();
        for (r, d) in got.iter().zip(two) {
            let head =
                unpack_filter_params(d.theta.as_ref().unwrap(), &model.config().mask_shape())
                    .unwrap();
            let coords = make_relative_coords(
                d.origin(),
                bottom.height(),
                bottom.width(),
                bottom.stride(),
                32.0,
            );
            let z = apply_mask_head(&bottom, &coords, &head).unwrap();
            let p = crate::numerics::pointwise(&z, crate::numerics::Pointwise::Sigmoid);
            let up = bilinear_upsample(&p, 2).unwrap();
            let soft = resize_bilinear(&up, 64, 64).unwrap();
            assert!(soft
                .data()
                .iter()
                .zip(r.soft.data())
                .all(|(a, b)| (a - b).abs() < 1e-6));
            assert_eq!(r.area, r.mask.count());
            assert!(r
                .mask
                .data()
                .iter()
                .zip(r.soft.data())
                .all(|(&m, &s)| m == (s >= 0.5)));
        }
    }

    #[test]
    fn factor_two_downsampled_matches_factor_one_on_smooth_input() {
        // a smooth ramp: bilinear upsampling followed by 2x box averaging reproduces it
        let ramp = FeatureMap::new(
            1,
            8,
            8,
            8,
            (0..64)
                .map(|i| 0.2 + 0.005 * (i % 8) as f64 + 0.004 * (i / 8) as f64)
                .collect(),
        )
        .unwrap();
        let up = bilinear_upsample(&ramp, 2).unwrap();
        for y in 1..7 {
            for x in 1..7 {
                let avg = (up.at(0, 2 * y, 2 * x)
                    + up.at(0, 2 * y + 1, 2 * x)
                    + up.at(0, 2 * y, 2 * x + 1)
                    + up.at(0, 2 * y + 1, 2 * x + 1))
                    / 4.0;
                assert!((avg - ramp.at(0, y, x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mask_nms_path_never_reads_boxes() {
        let model = trained_like_model(6);
        let cfg = InferenceConfig {
            nms_mode: NmsMode::Mask,
            ..InferenceConfig::default()
        };
        reset_box_reads();
        let out = run_inference(&model, &random_image(7), &cfg).unwrap();
        assert!(out.candidates > 0);
        assert_eq!(box_reads(), 0);
        assert!(out.instances.len() <= 100);

        let box_cfg = InferenceConfig::default();
        run_inference(&model, &random_image(7), &box_cfg).unwrap();
        assert!(box_reads() > 0);
    }
}
