//! Panoptic quality with its segmentation and recognition factors.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::panoptic::{PanopticMap, VOID};

use super::EvalError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPq {
    pub category: u32,
    pub is_thing: bool,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PQReport {
    /// Means over categories that appear in either prediction or ground truth.
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub pq_things: f64,
    pub pq_stuff: f64,
    pub per_class: Vec<ClassPq>,
}

impl PQReport {
    /// Largest |PQ - SQ*RQ| over the categories.
    pub fn identity_residual(&self) -> f64 {
        self.per_class
            .iter()
            .map(|c| (c.pq - c.sq * c.rq).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Default)]
struct Counts {
    is_thing: bool,
    tp: usize,
    fp: usize,
    fn_: usize,
    iou_sum: f64,
}

/// Sums matches over any number of image pairs.
#[derive(Debug, Clone, Default)]
pub struct PqAccumulator {
    counts: BTreeMap<u32, Counts>,
}

impl PqAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Segments of the same category match when their IoU exceeds 0.5. Pixels
    /// that are void in the ground truth are left out of the union, and an
    /// unmatched prediction lying mostly on such pixels is not a false positive.
    pub fn add(&mut self, pred: &PanopticMap, gt: &PanopticMap) -> Result<(), EvalError> {
        if pred.width() != gt.width() || pred.height() != gt.height() {
            return Err(EvalError::SizeMismatch(
                pred.width(),
                pred.height(),
                gt.width(),
                gt.height(),
            ));
        }
        let mut inter: HashMap<(u16, u16), usize> = HashMap::new();
        for (&g, &p) in gt.ids().iter().zip(pred.ids()) {
            *inter.entry((g, p)).or_default() += 1;
        }
        let mut gt_matched = std::collections::HashSet::new();
        let mut pred_matched = std::collections::HashSet::new();
        for (&(g, p), &n) in &inter {
            if g == VOID || p == VOID {
                continue;
            }
            let (gs, ps) = (
                gt.segment(g).expect("gt id"),
                pred.segment(p).expect("pred id"),
            );
            if gs.category != ps.category {
                continue;
            }
            let void_in_pred = inter.get(&(VOID, p)).copied().unwrap_or(0);
            let union = ps.area + gs.area - n - void_in_pred;
            let iou = n as f64 / union as f64;
            if iou > 0.5 {
                let c = self.entry(gs.category, gs.is_thing);
                c.tp += 1;
                c.iou_sum += iou;
                gt_matched.insert(g);
                pred_matched.insert(p);
            }
        }
        for s in gt
            .segments()
            .iter()
            .filter(|s| s.area > 0 && !gt_matched.contains(&s.id))
        {
            self.entry(s.category, s.is_thing).fn_ += 1;
        }
        for s in pred
            .segments()
            .iter()
            .filter(|s| s.area > 0 && !pred_matched.contains(&s.id))
        {
            let on_void = inter.get(&(VOID, s.id)).copied().unwrap_or(0);
            if on_void as f64 / s.area as f64 > 0.5 {
                continue;
            }
            self.entry(s.category, s.is_thing).fp += 1;
        }
        Ok(())
    }

    fn entry(&mut self, category: u32, is_thing: bool) -> &mut Counts {
        self.counts.entry(category).or_insert_with(|| Counts {
            is_thing,
            ..Counts::default()
        })
    }

    pub fn finish(&self) -> PQReport {
        let per_class: Vec<ClassPq> = self
            .counts
            .iter()
            .filter(|(_, c)| c.tp + c.fp + c.fn_ > 0)
            .map(|(&category, c)| {
                let denom = c.tp as f64 + 0.5 * c.fp as f64 + 0.5 * c.fn_ as f64;
                ClassPq {
                    category,
                    is_thing: c.is_thing,
                    pq: c.iou_sum / denom,
                    sq: if c.tp > 0 {
                        c.iou_sum / c.tp as f64
                    } else {
                        0.0
                    },
                    rq: c.tp as f64 / denom,
                    tp: c.tp,
                    fp: c.fp,
                    fn_: c.fn_,
                }
            })
            .collect();
        let mean = |f: &dyn Fn(&ClassPq) -> Option<f64>| {
            let v: Vec<f64> = per_class.iter().filter_map(f).collect();
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        PQReport {
            pq: mean(&|c| Some(c.pq)),
            sq: mean(&|c| Some(c.sq)),
            rq: mean(&|c| Some(c.rq)),
            pq_things: mean(&|c| c.is_thing.then_some(c.pq)),
            pq_stuff: mean(&|c| (!c.is_thing).then_some(c.pq)),
            per_class,
        }
    }
}

pub fn evaluate_pq(pred: &PanopticMap, gt: &PanopticMap) -> Result<PQReport, EvalError> {
    let mut acc = PqAccumulator::new();
    acc.add(pred, gt)?;
    Ok(acc.finish())
}
