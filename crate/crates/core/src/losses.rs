//! Training losses with hand-derived gradients, and the per-scene objective
//! that wires them to a model's forward pass.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::BoxXyxy;
use crate::model::{Model, ModelError};
use crate::numerics::{sigmoid, FeatureMap};
use crate::targets::{
    assign_targets, downsample_gt_mask, sample_positives, GtInstance, TargetConfig, TargetSet,
};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("{what}: {a} vs {b} elements")]
    SizeMismatch {
        what: &'static str,
        a: usize,
        b: usize,
    },
    #[error("label {label} is out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },
    #[error("predicted box has non-positive extent")]
    DegenerateBox,
    #[error("loss component {0} is not finite")]
    NonFinite(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub const DICE_EPS: f64 = 1e-6;

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `1 - (2 sum(p g) + eps) / (sum(p^2) + sum(g^2) + eps)`.
pub fn dice_loss(pred: &[f64], gt: &[f64]) -> Result<f64, LossError> {
    Ok(dice_loss_grad(pred, gt)?.0)
}

/// Dice loss and its gradient with respect to `pred`.
pub fn dice_loss_grad(pred: &[f64], gt: &[f64]) -> Result<(f64, Vec<f64>), LossError> {
    if pred.len() != gt.len() {
        return Err(LossError::SizeMismatch {
            what: "dice",
            a: pred.len(),
            b: gt.len(),
        });
    }
    let inter: f64 = pred.iter().zip(gt).map(|(p, g)| p * g).sum();
    let denom: f64 =
        pred.iter().map(|p| p * p).sum::<f64>() + gt.iter().map(|g| g * g).sum::<f64>() + DICE_EPS;
    let num = 2.0 * inter + DICE_EPS;
    let loss = 1.0 - num / denom;
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| -(2.0 * g * denom - num * 2.0 * p) / (denom * denom))
        .collect();
    Ok((loss, grad))
}

/// `sum_i dice_i / n_pos`; the flag is set when the image has no positives.
pub fn mask_loss(dice_values: &[f64], n_pos: usize) -> (f64, bool) {
    if n_pos == 0 {
        return (0.0, true);
    }
    (dice_values.iter().sum::<f64>() / n_pos as f64, false)
}

/// One focal term and its derivative in the logit.
pub fn focal_term(x: f64, target: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    if target >= 0.5 {
        let sp = softplus(-x);
        let w = (1.0 - p).powf(gamma);
        (alpha * w * sp, alpha * w * (-gamma * p * sp - (1.0 - p)))
    } else {
        let sp = softplus(x);
        let w = p.powf(gamma);
        (
            (1.0 - alpha) * w * sp,
            (1.0 - alpha) * w * (gamma * (1.0 - p) * sp + p),
        )
    }
}

/// Sum of focal terms over all entries divided by `max(normalizer, 1)`.
pub fn focal_loss(
    logits: &[f64],
    targets: &[f64],
    alpha: f64,
    gamma: f64,
    normalizer: usize,
) -> Result<(f64, Vec<f64>), LossError> {
    if logits.len() != targets.len() {
        return Err(LossError::SizeMismatch {
            what: "focal",
            a: logits.len(),
            b: targets.len(),
        });
    }
    let norm = normalizer.max(1) as f64;
    let mut total = 0.0;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&x, &t)| {
            let (v, d) = focal_term(x, t, alpha, gamma);
            total += v;
            d / norm
        })
        .collect();
    Ok((total / norm, grad))
}

/// Generalized IoU of two boxes.
pub fn giou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    let hull = BoxXyxy::new(
        a.x1.min(b.x1),
        a.y1.min(b.y1),
        a.x2.max(b.x2),
        a.y2.max(b.y2),
    )
    .area();
    inter / union - (hull - union) / hull
}

/// `1 - GIoU` of two boxes given as `(l, t, r, b)` around one shared point,
/// with the gradient in the predicted distances.
pub fn giou_loss_single(pred: [f64; 4], gt: [f64; 4]) -> Result<(f64, [f64; 4]), LossError> {
    let [l, t, r, b] = pred;
    let [gl, gt_, gr, gb] = gt;
    if l + r <= 0.0 || t + b <= 0.0 || pred.iter().any(|v| !v.is_finite()) {
        return Err(LossError::DegenerateBox);
    }
    let (pw, ph) = (l + r, t + b);
    let ap = pw * ph;
    let ag = (gl + gr) * (gt_ + gb);
    let iw = l.min(gl) + r.min(gr);
    let ih = t.min(gt_) + b.min(gb);
    let inter = iw * ih;
    let union = ap + ag - inter;
    let cw = l.max(gl) + r.max(gr);
    let ch = t.max(gt_) + b.max(gb);
    let hull = cw * ch;
    let loss = 1.0 - (inter / union - 1.0 + union / hull);

    // partials per distance: (d ap, d inter, d hull)
    let part = |k: usize| -> (f64, f64, f64) {
        let (mine, theirs) = (pred[k], gt[k]);
        let horizontal = k % 2 == 0;
        let (dap, other_i, other_c) = if horizontal {
            (ph, ih, ch)
        } else {
            (pw, iw, cw)
        };
        let dinter = if mine < theirs { other_i } else { 0.0 };
        let dhull = if mine > theirs { other_c } else { 0.0 };
        (dap, dinter, dhull)
    };
    let mut grad = [0.0; 4];
    for (k, g) in grad.iter_mut().enumerate() {
        let (dap, dinter, dhull) = part(k);
        let du = dap - dinter;
        let diou = (dinter * union - inter * du) / (union * union);
        let dterm = (du * hull - union * dhull) / (hull * hull);
        *g = -(diou + dterm);
    }
    Ok((loss, grad))
}

/// Centerness-weighted mean of `1 - GIoU` over positives.
pub fn giou_loss(
    pred: &[[f64; 4]],
    gt: &[[f64; 4]],
    weights: &[f64],
) -> Result<(f64, Vec<[f64; 4]>), LossError> {
    if pred.len() != gt.len() || pred.len() != weights.len() {
        return Err(LossError::SizeMismatch {
            what: "giou",
            a: pred.len(),
            b: gt.len(),
        });
    }
    let wsum: f64 = weights.iter().sum();
    if wsum <= 0.0 {
        return Ok((0.0, vec![[0.0; 4]; pred.len()]));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(pred.len());
    for ((p, g), w) in pred.iter().zip(gt).zip(weights) {
        let (v, d) = giou_loss_single(*p, *g)?;
        total += w * v;
        grads.push(d.map(|x| x * w / wsum));
    }
    Ok((total / wsum, grads))
}

/// Mean binary cross-entropy on logits; flagged when there are no positives.
pub fn centerness_loss(
    logits: &[f64],
    targets: &[f64],
) -> Result<(f64, Vec<f64>, bool), LossError> {
    if logits.len() != targets.len() {
        return Err(LossError::SizeMismatch {
            what: "centerness",
            a: logits.len(),
            b: targets.len(),
        });
    }
    if logits.is_empty() {
        return Ok((0.0, Vec::new(), true));
    }
    let n = logits.len() as f64;
    let value = logits
        .iter()
        .zip(targets)
        .map(|(&x, &y)| softplus(x) - y * x)
        .sum::<f64>()
        / n;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&x, &y)| (sigmoid(x) - y) / n)
        .collect();
    Ok((value, grad, false))
}

/// Mean per-pixel softmax cross-entropy. `labels` are channel indices.
pub fn semantic_ce_loss(logits: &FeatureMap, labels: &[u32]) -> Result<(f64, Vec<f64>), LossError> {
    let (c, p) = (logits.channels(), logits.plane_len());
    if labels.len() != p {
        return Err(LossError::SizeMismatch {
            what: "semantic labels",
            a: labels.len(),
            b: p,
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(LossError::LabelOutOfRange {
            label: bad,
            classes: c,
        });
    }
    let data = logits.data();
    let mut grad = vec![0.0; c * p];
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let m = (0..c)
            .map(|k| data[k * p + i])
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..c).map(|k| (data[k * p + i] - m).exp()).sum();
        total += m + z.ln() - data[label as usize * p + i];
        for k in 0..c {
            let soft = (data[k * p + i] - m).exp() / z;
            grad[k * p + i] = (soft - if k == label as usize { 1.0 } else { 0.0 }) / p as f64;
        }
    }
    Ok((total / p as f64, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Mask loss weight.
    pub lambda: f64,
    /// Panoptic semantic loss weight.
    pub mu: f64,
    pub aux_semantic: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            mu: 0.5,
            aux_semantic: 0.5,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub l_cls: f64,
    pub l_box: f64,
    pub l_ctr: f64,
    pub l_mask: f64,
    pub l_pano: Option<f64>,
    pub l_aux_sem: Option<f64>,
    pub num_pos: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_box: f64,
    pub l_ctr: f64,
    pub l_mask: f64,
    pub l_pano: Option<f64>,
    pub l_aux_sem: Option<f64>,
    pub total: f64,
    pub num_pos: usize,
}

impl LossBreakdown {
    /// Field-wise sum, used to average over a batch.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.l_cls += other.l_cls;
        self.l_box += other.l_box;
        self.l_ctr += other.l_ctr;
        self.l_mask += other.l_mask;
        self.l_pano = add_opt(self.l_pano, other.l_pano);
        self.l_aux_sem = add_opt(self.l_aux_sem, other.l_aux_sem);
        self.total += other.total;
        self.num_pos += other.num_pos;
    }

    pub fn scaled(&self, f: f64) -> LossBreakdown {
        LossBreakdown {
            l_cls: self.l_cls * f,
            l_box: self.l_box * f,
            l_ctr: self.l_ctr * f,
            l_mask: self.l_mask * f,
            l_pano: self.l_pano.map(|v| v * f),
            l_aux_sem: self.l_aux_sem.map(|v| v * f),
            total: self.total * f,
            num_pos: self.num_pos,
        }
    }
}

fn add_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (None, None) => None,
        (a, b) => Some(a.unwrap_or(0.0) + b.unwrap_or(0.0)),
    }
}

/// `l_cls + l_box + l_ctr + lambda l_mask + mu l_pano + aux l_aux_sem`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<LossBreakdown, LossError> {
    let named = [
        ("l_cls", Some(parts.l_cls)),
        ("l_box", Some(parts.l_box)),
        ("l_ctr", Some(parts.l_ctr)),
        ("l_mask", Some(parts.l_mask)),
        ("l_pano", parts.l_pano),
        ("l_aux_sem", parts.l_aux_sem),
    ];
    for (name, v) in named {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(LossError::NonFinite(name));
            }
        }
    }
    let total = parts.l_cls
        + parts.l_box
        + parts.l_ctr
        + w.lambda * parts.l_mask
        + w.mu * parts.l_pano.unwrap_or(0.0)
        + w.aux_semantic * parts.l_aux_sem.unwrap_or(0.0);
    Ok(LossBreakdown {
        l_cls: parts.l_cls,
        l_box: parts.l_box,
        l_ctr: parts.l_ctr,
        l_mask: parts.l_mask,
        l_pano: parts.l_pano,
        l_aux_sem: parts.l_aux_sem,
        total,
        num_pos: parts.num_pos,
    })
}

/// Which semantic objective the semantic branch is trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SemanticKind {
    /// Stuff and thing categories; weighted by `mu`.
    Panoptic,
    /// Background plus thing classes from instance masks; weighted by `aux_semantic`.
    Auxiliary,
}

/// Per-pixel semantic labels at the semantic branch's resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTarget {
    pub kind: SemanticKind,
    /// Channel index per cell, row-major.
    pub labels: Vec<u32>,
}

/// Samples a full-resolution label map at the center pixel of every `stride` cell.
pub fn downsample_labels(labels: &[u32], width: usize, height: usize, stride: usize) -> Vec<u32> {
    let (ow, oh) = (width / stride, height / stride);
    let mut out = Vec::with_capacity(ow * oh);
    for y in 0..oh {
        for x in 0..ow {
            out.push(labels[(y * stride + stride / 2) * width + x * stride + stride / 2]);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct SceneLoss {
    pub breakdown: LossBreakdown,
    /// Gradient of `breakdown.total` in the model's flat parameter layout.
    pub grads: Vec<f64>,
    pub targets: TargetSet,
    /// Positives whose mask was supervised.
    pub sampled: Vec<usize>,
}

/// Forward, loss and backward for one image.
pub fn scene_loss(
    model: &Model,
    image: &FeatureMap,
    gts: &[GtInstance],
    semantic: Option<&SemanticTarget>,
    tcfg: &TargetConfig,
    w: &LossWeights,
) -> Result<SceneLoss, LossError> {
    let cfg = model.config();
    let mut fwd = model.forward(image)?;
    let levels: Vec<_> = fwd.heads.iter().map(|h| h.level).collect();
    let ts = assign_targets(gts, image.height(), image.width(), &levels, tcfg);
    let num_pos = ts.num_pos;
    let heads = fwd.heads.clone();
    let mut seeds = Vec::new();

    // classification
    let mut l_cls = 0.0;
    for (gi, h) in heads.iter().enumerate() {
        let grid = ts.grids[gi];
        let logits = fwd.tape.value(h.cls);
        let p = logits.plane_len();
        let mut target = vec![0.0; logits.data().len()];
        for i in 0..p {
            let c = ts.locations[grid.offset + i].class_label;
            if c > 0 {
                target[(c as usize - 1) * p + i] = 1.0;
            }
        }
        let (v, g) = focal_loss(
            logits.data(),
            &target,
            w.focal_alpha,
            w.focal_gamma,
            num_pos,
        )?;
        l_cls += v;
        seeds.push((h.cls, g));
    }

    // box regression and center-ness over positives
    let positives: Vec<usize> = ts.positives().collect();
    let mut preds = Vec::with_capacity(positives.len());
    let mut gt_d = Vec::with_capacity(positives.len());
    let mut ctr_w = Vec::with_capacity(positives.len());
    let mut ctr_logits = Vec::with_capacity(positives.len());
    let mut cells: Vec<(usize, usize)> = Vec::with_capacity(positives.len());
    for &i in &positives {
        let gi = ts.grid_of(i);
        let loc = &ts.locations[i];
        let h = &heads[gi];
        let raw = fwd.tape.value(h.box_reg);
        let s = loc.level.stride() as f64;
        preds.push(std::array::from_fn(|k| raw.at(k, loc.y, loc.x).exp() * s));
        gt_d.push(loc.distances);
        ctr_w.push(loc.centerness);
        ctr_logits.push(fwd.tape.value(h.ctr).at(0, loc.y, loc.x));
        cells.push((gi, loc.y * raw.width() + loc.x));
    }
    let (l_box, box_grads) = giou_loss(&preds, &gt_d, &ctr_w)?;
    let (l_ctr, ctr_grads, _) = centerness_loss(&ctr_logits, &ctr_w)?;
    let mut box_seed: Vec<Vec<f64>> = heads
        .iter()
        .map(|h| vec![0.0; fwd.tape.value(h.box_reg).data().len()])
        .collect();
    let mut ctr_seed: Vec<Vec<f64>> = heads
        .iter()
        .map(|h| vec![0.0; fwd.tape.value(h.ctr).data().len()])
        .collect();
    for (j, &(gi, cell)) in cells.iter().enumerate() {
        let plane = fwd.tape.value(heads[gi].box_reg).plane_len();
        for k in 0..4 {
            // d(exp(raw) s)/d raw = distance
            box_seed[gi][k * plane + cell] += box_grads[j][k] * preds[j][k];
        }
        ctr_seed[gi][cell] += ctr_grads[j];
    }
    for (gi, h) in heads.iter().enumerate() {
        seeds.push((h.box_reg, std::mem::take(&mut box_seed[gi])));
        seeds.push((h.ctr, std::mem::take(&mut ctr_seed[gi])));
    }

    // masks on sampled positives
    let scores: Vec<f64> = ts
        .locations
        .iter()
        .enumerate()
        .map(|(i, loc)| {
            if loc.class_label == 0 {
                return 0.0;
            }
            let gi = ts.grid_of(i);
            sigmoid(
                fwd.tape
                    .value(heads[gi].cls)
                    .at(loc.class_label as usize - 1, loc.y, loc.x),
            )
        })
        .collect();
    let sampled = sample_positives(&ts, &scores, tcfg.positive_cap);
    let ms = cfg.mask_stride();
    let mut gt_cache: Vec<Option<Vec<f64>>> = vec![None; gts.len()];
    let mut dice_values = Vec::with_capacity(sampled.len());
    for &i in &sampled {
        let loc = ts.locations[i];
        let k = loc.instance.expect("sampled locations are positive");
        let gi = ts.grid_of(i);
        let node = fwd.mask_logits(gi, loc.y, loc.x)?;
        if gt_cache[k].is_none() {
            gt_cache[k] = Some(
                downsample_gt_mask(&gts[k].mask, ms, tcfg.soft_mask_targets)
                    .expect("positive stride"),
            );
        }
        let gt = gt_cache[k].as_ref().expect("filled above");
        let z = fwd.tape.value(node).data();
        let p: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
        let (d, dp) = dice_loss_grad(&p, gt)?;
        dice_values.push(d);
        let scale = w.lambda / num_pos.max(1) as f64;
        let g = dp
            .iter()
            .zip(&p)
            .map(|(g, p)| g * p * (1.0 - p) * scale)
            .collect();
        seeds.push((node, g));
    }
    let (l_mask, _) = mask_loss(&dice_values, num_pos);

    // semantic branch
    let (mut l_pano, mut l_aux_sem) = (None, None);
    if let (Some(sem), Some(node)) = (semantic, fwd.semantic) {
        let (v, g) = semantic_ce_loss(fwd.tape.value(node), &sem.labels)?;
        let weight = match sem.kind {
            SemanticKind::Panoptic => {
                l_pano = Some(v);
                w.mu
            }
            SemanticKind::Auxiliary => {
                l_aux_sem = Some(v);
                w.aux_semantic
            }
        };
        seeds.push((node, g.into_iter().map(|x| x * weight).collect()));
    }

    let breakdown = total_loss(
        &LossParts {
            l_cls,
            l_box,
            l_ctr,
            l_mask,
            l_pano,
            l_aux_sem,
            num_pos,
        },
        w,
    )?;
    let grads = fwd.tape.backward(&seeds).params;
    Ok(SceneLoss {
        breakdown,
        grads,
        targets: ts,
        sampled,
    })
}
