//! Mask AP, panoptic quality and the mask-head timing benchmark.

mod ap;
mod bench;
mod dataset;
mod pq;

pub use ap::{coco_iou_thresholds, evaluate_ap, APReport, ClassAp, ImageEval, ScoredMask};
pub use bench::{bench_mask_head, write_timings_csv, BenchConfig, KTiming, TimingReport};
pub use dataset::{evaluate_model, DatasetEval, PairResult};
pub use pq::{evaluate_pq, ClassPq, PQReport, PqAccumulator};

use crate::mask::BinaryMask;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("mask sizes differ: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// IoU of two equally sized masks. Two empty masks give 1 and set the flag.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<(f64, bool), EvalError> {
    if !a.same_size(b) {
        return Err(EvalError::SizeMismatch(
            a.width(),
            a.height(),
            b.width(),
            b.height(),
        ));
    }
    let union = a.union_count(b);
    if union == 0 {
        return Ok((1.0, true));
    }
    Ok((a.intersection_count(b) as f64 / union as f64, false))
}
