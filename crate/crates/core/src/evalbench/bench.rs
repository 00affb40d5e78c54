//! Wall-clock cost of the per-instance mask heads as the instance count grows.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::inference::{compute_masks, Detection};
use crate::mask::BoxXyxy;
use crate::model::{apply_mask_heads_batched, HeadOutputs, MaskHead, Model, ModelError};
use crate::numerics::FeatureMap;

use super::EvalError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub ks: Vec<usize>,
    /// Timed samples per K after warm-up.
    pub repeats: usize,
    pub warmup: usize,
    /// Each sample repeats the stage until at least this much time has passed.
    pub min_sample_ms: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 10, 100],
            repeats: 21,
            warmup: 3,
            min_sample_ms: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KTiming {
    pub k: usize,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    /// Stage executions folded into each sample.
    pub inner: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub entries: Vec<KTiming>,
    /// Instance count used for the whole-image measurement (the largest K).
    pub total_k: usize,
    pub total_inference_ms: f64,
    /// Mask-head median at `total_k` over the whole-image median.
    pub mask_head_share: f64,
    pub repeats: usize,
}

impl TimingReport {
    pub fn get(&self, k: usize) -> Option<&KTiming> {
        self.entries.iter().find(|e| e.k == k)
    }

    /// Median time at `k` over the median at `base`; `None` when either is missing or `base` is 0.
    pub fn ratio(&self, k: usize, base: usize) -> Option<f64> {
        if base == 0 {
            return None;
        }
        Some(self.get(k)?.median_ms / self.get(base)?.median_ms)
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Milliseconds per call: calibrates a repeat count against the timer, then
/// returns (samples, repeat count).
fn sample<F: FnMut() -> Result<(), ModelError>>(
    mut stage: F,
    cfg: &BenchConfig,
) -> Result<(Vec<f64>, usize), ModelError> {
    for _ in 0..cfg.warmup {
        stage()?;
    }
    let mut inner = 1usize;
    loop {
        let t = Instant::now();
        for _ in 0..inner {
            stage()?;
        }
        let ms = t.elapsed().as_secs_f64() * 1e3;
        if ms >= cfg.min_sample_ms || inner >= 1 << 20 {
            break;
        }
        inner *= 2;
    }
    let mut samples = Vec::with_capacity(cfg.repeats);
    for _ in 0..cfg.repeats.max(1) {
        let t = Instant::now();
        for _ in 0..inner {
            stage()?;
        }
        samples.push(t.elapsed().as_secs_f64() * 1e3 / inner as f64);
    }
    samples.sort_by(f64::total_cmp);
    Ok((samples, inner))
}

/// `k` detections taken cyclically from the head locations, with their filters.
fn synthetic_detections(outputs: &[HeadOutputs], k: usize) -> Vec<Detection> {
    let locations: Vec<(usize, usize, usize)> = outputs
        .iter()
        .enumerate()
        .flat_map(|(i, o)| {
            let w = o.cls_logits.width();
            (0..o.cls_logits.height() * w).map(move |p| (i, p / w, p % w))
        })
        .collect();
    (0..k)
        .map(|n| {
            let (i, y, x) = locations[n % locations.len()];
            let o = &outputs[i];
            let mut d = Detection::new(1, 1.0, BoxXyxy::new(0.0, 0.0, 1.0, 1.0), o.level, x, y);
            d.head_index = i;
            d.theta = o
                .controller
                .as_ref()
                .map(|c| (0..c.channels()).map(|ch| c.at(ch, y, x)).collect());
            d
        })
        .collect()
}

fn unpack(model: &Model, d: &Detection) -> Result<MaskHead, ModelError> {
    match &d.theta {
        Some(theta) => crate::model::unpack_filter_params(theta, &model.config().mask_shape()),
        None => model.static_head().ok_or_else(|| {
            ModelError::Config("model has neither filters nor a static head".into())
        }),
    }
}

/// Times filter unpacking plus mask-head application for each K, and one
/// whole-image inference at the largest K. Runs on a single worker thread.
pub fn bench_mask_head(
    model: &Model,
    image: &FeatureMap,
    cfg: &BenchConfig,
) -> Result<TimingReport, EvalError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| ModelError::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        let fwd = model.forward(image)?;
        let outputs = fwd.head_outputs();
        let bottom = fwd.bottom_features().clone();
        drop(fwd);

        let mut entries = Vec::new();
        for &k in &cfg.ks {
            let dets = synthetic_detections(&outputs, k);
            let (samples, inner) = sample(
                || {
                    let heads = dets
                        .iter()
                        .map(|d| Ok((unpack(model, d)?, model.coords_for(d.origin(), &bottom))))
                        .collect::<Result<Vec<_>, ModelError>>()?;
                    std::hint::black_box(apply_mask_heads_batched(&bottom, &heads)?);
                    Ok(())
                },
                cfg,
            )?;
            entries.push(KTiming {
                k,
                median_ms: quantile(&samples, 0.5),
                p10_ms: quantile(&samples, 0.1),
                p90_ms: quantile(&samples, 0.9),
                inner,
            });
        }

        let total_k = cfg.ks.iter().copied().max().unwrap_or(0);
        let (h, w) = (image.height(), image.width());
        let (samples, _) = sample(
            || {
                let fwd = model.forward(image)?;
                let dets = synthetic_detections(&fwd.head_outputs(), total_k);
                std::hint::black_box(compute_masks(
                    model,
                    &dets,
                    fwd.bottom_features(),
                    h,
                    w,
                    0.5,
                )?);
                Ok(())
            },
            cfg,
        )?;
        let total_inference_ms = quantile(&samples, 0.5);
        let head_ms = entries
            .iter()
            .find(|e| e.k == total_k)
            .map_or(0.0, |e| e.median_ms);
        Ok(TimingReport {
            entries,
            total_k,
            total_inference_ms,
            mask_head_share: head_ms / total_inference_ms,
            repeats: cfg.repeats,
        })
    })
}

pub fn write_timings_csv(report: &TimingReport, path: &Path) -> Result<(), EvalError> {
    let io = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    writeln!(f, "K,median_ms,p10,p90").map_err(io)?;
    for e in &report.entries {
        writeln!(
            f,
            "{},{:.6},{:.6},{:.6}",
            e.k, e.median_ms, e.p10_ms, e.p90_ms
        )
        .map_err(io)?;
    }
    Ok(())
}
