//! Whole-dataset evaluation of a trained model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::inference::{run_inference, InferenceConfig};
use crate::model::Model;
use crate::synthdata::SceneAnnotation;
use crate::targets::gt_instances;

use super::{
    coco_iou_thresholds, evaluate_ap, mask_iou, APReport, EvalError, ImageEval, PQReport,
    PqAccumulator, ScoredMask,
};

/// Predicted masks attributed to the two members of an identical-appearance pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub scene: usize,
    pub instances: (usize, usize),
    /// IoU between the two attributed masks; `None` when a member has no same-class prediction.
    pub mutual_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEval {
    pub ap: APReport,
    pub pq: Option<PQReport>,
    pub pairs: Vec<PairResult>,
    pub num_images: usize,
}

impl DatasetEval {
    /// Share of pairs whose attributed masks overlap with IoU below `threshold`.
    pub fn pairs_below(&self, threshold: f64) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        let n = self
            .pairs
            .iter()
            .filter(|p| p.mutual_iou.is_some_and(|v| v < threshold))
            .count();
        n as f64 / self.pairs.len() as f64
    }

    /// Share of pairs whose attributed masks overlap with IoU above `threshold`.
    pub fn pairs_above(&self, threshold: f64) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        let n = self
            .pairs
            .iter()
            .filter(|p| p.mutual_iou.is_some_and(|v| v > threshold))
            .count();
        n as f64 / self.pairs.len() as f64
    }
}

/// Each pair member takes the same-class prediction with the highest IoU against it.
fn pair_results(
    scene: &SceneAnnotation,
    preds: &[ScoredMask],
) -> Result<Vec<PairResult>, EvalError> {
    let best_for = |inst: usize| -> Result<Option<usize>, EvalError> {
        let gt = &scene.instances[inst];
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in preds
            .iter()
            .enumerate()
            .filter(|(_, p)| p.class_id == gt.class_id())
        {
            let iou = mask_iou(&p.mask, &gt.mask)?.0;
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((i, iou));
            }
        }
        Ok(best.map(|b| b.0))
    };
    scene
        .identical_pairs
        .iter()
        .map(|&(a, b)| {
            let mutual_iou = match (best_for(a)?, best_for(b)?) {
                (Some(i), Some(j)) => Some(mask_iou(&preds[i].mask, &preds[j].mask)?.0),
                _ => None,
            };
            Ok(PairResult {
                scene: scene.index,
                instances: (a, b),
                mutual_iou,
            })
        })
        .collect()
}

/// Runs inference on every scene and scores masks, panoptic maps and identical pairs.
pub fn evaluate_model(
    model: &Model,
    scenes: &[SceneAnnotation],
    cfg: &InferenceConfig,
) -> Result<DatasetEval, EvalError> {
    let per_scene = scenes
        .par_iter()
        .map(|scene| {
            let out = run_inference(model, &scene.image, cfg)?;
            let preds: Vec<ScoredMask> = out
                .instances
                .into_iter()
                .map(|r| ScoredMask {
                    class_id: r.class_id,
                    score: r.score,
                    mask: r.mask,
                })
                .collect();
            let pairs = pair_results(scene, &preds)?;
            Ok((
                ImageEval {
                    gts: gt_instances(scene),
                    preds,
                },
                out.panoptic,
                pairs,
            ))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;

    let mut images = Vec::with_capacity(per_scene.len());
    let mut pairs = Vec::new();
    let mut pq = PqAccumulator::new();
    let mut any_panoptic = false;
    for (scene, (im, pano, p)) in scenes.iter().zip(per_scene) {
        if let Some(pano) = pano {
            pq.add(&pano, &scene.panoptic)?;
            any_panoptic = true;
        }
        images.push(im);
        pairs.extend(p);
    }
    Ok(DatasetEval {
        ap: evaluate_ap(&images, &coco_iou_thresholds())?,
        pq: any_panoptic.then(|| pq.finish()),
        pairs,
        num_images: scenes.len(),
    })
}
