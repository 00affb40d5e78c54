//! COCO-style mask average precision.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mask::BinaryMask;
use crate::targets::GtInstance;

use super::{mask_iou, EvalError};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredMask {
    pub class_id: u32,
    pub score: f64,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageEval {
    pub gts: Vec<GtInstance>,
    pub preds: Vec<ScoredMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: u32,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub num_gt: usize,
    pub num_pred: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct APReport {
    /// Mean over the IoU thresholds and over classes with ground truth.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub per_class: Vec<ClassAp>,
    pub num_gt: usize,
    pub num_pred: usize,
}

/// 0.50, 0.55, ..., 0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| f64::from(50 + 5 * i) / 100.0).collect()
}

/// 101-point interpolated precision of a ranked list of hit flags.
fn interpolated_ap(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (i, &hit) in hits.iter().enumerate() {
        tp += usize::from(hit);
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut j = 0;
    for r in 0..=100 {
        let r = f64::from(r) / 100.0;
        while j < recall.len() && recall[j] < r {
            j += 1;
        }
        if j < recall.len() {
            sum += precision[j];
        }
    }
    sum / 101.0
}

/// Greedy matching in descending score order: each prediction takes the
/// unmatched ground truth of its image with the highest IoU, if that IoU
/// reaches `threshold`.
fn ranked_hits(
    ranked: &[(usize, usize)],
    ious: &[Vec<Vec<f64>>],
    gt_counts: &[usize],
    threshold: f64,
) -> Vec<bool> {
    let mut taken: Vec<Vec<bool>> = gt_counts.iter().map(|&n| vec![false; n]).collect();
    ranked
        .iter()
        .map(|&(img, p)| {
            let mut best: Option<(usize, f64)> = None;
            for (g, &iou) in ious[img][p].iter().enumerate() {
                if taken[img][g] || iou < threshold {
                    continue;
                }
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[img][g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

pub fn evaluate_ap(images: &[ImageEval], thresholds: &[f64]) -> Result<APReport, EvalError> {
    let mut classes: Vec<u32> = images
        .iter()
        .flat_map(|im| {
            im.gts
                .iter()
                .map(|g| g.class_id)
                .chain(im.preds.iter().map(|p| p.class_id))
        })
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let mut per_class = Vec::new();
    for &class in &classes {
        // per image: indices of this class's predictions and ground truths, and their IoUs
        let per_image = images
            .par_iter()
            .map(|im| {
                let preds: Vec<&ScoredMask> =
                    im.preds.iter().filter(|p| p.class_id == class).collect();
                let gts: Vec<&GtInstance> = im.gts.iter().filter(|g| g.class_id == class).collect();
                let ious = preds
                    .iter()
                    .map(|p| {
                        gts.iter()
                            .map(|g| mask_iou(&p.mask, &g.mask).map(|r| r.0))
                            .collect::<Result<Vec<_>, _>>()
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok((
                    preds.iter().map(|p| p.score).collect::<Vec<f64>>(),
                    gts.len(),
                    ious,
                ))
            })
            .collect::<Result<Vec<_>, EvalError>>()?;
        let gt_counts: Vec<usize> = per_image.iter().map(|x| x.1).collect();
        let ious: Vec<Vec<Vec<f64>>> = per_image.iter().map(|x| x.2.clone()).collect();
        let mut ranked: Vec<(usize, usize)> = per_image
            .iter()
            .enumerate()
            .flat_map(|(i, x)| (0..x.0.len()).map(move |p| (i, p)))
            .collect();
        ranked.sort_by(|a, b| {
            per_image[b.0].0[b.1]
                .total_cmp(&per_image[a.0].0[a.1])
                .then(a.cmp(b))
        });
        let num_gt: usize = gt_counts.iter().sum();
        let at = |t: f64| interpolated_ap(&ranked_hits(&ranked, &ious, &gt_counts, t), num_gt);
        let ap = if thresholds.is_empty() {
            0.0
        } else {
            thresholds.iter().map(|&t| at(t)).sum::<f64>() / thresholds.len() as f64
        };
        per_class.push(ClassAp {
            class_id: class,
            ap,
            ap50: at(0.5),
            ap75: at(0.75),
            num_gt,
            num_pred: ranked.len(),
        });
    }

    let scored: Vec<&ClassAp> = per_class.iter().filter(|c| c.num_gt > 0).collect();
    let mean = |f: fn(&ClassAp) -> f64| {
        if scored.is_empty() {
            0.0
        } else {
            scored.iter().map(|c| f(c)).sum::<f64>() / scored.len() as f64
        }
    };
    Ok(APReport {
        ap: mean(|c| c.ap),
        ap50: mean(|c| c.ap50),
        ap75: mean(|c| c.ap75),
        num_gt: per_class.iter().map(|c| c.num_gt).sum(),
        num_pred: per_class.iter().map(|c| c.num_pred).sum(),
        per_class,
    })
}
