//! Acceptance criteria 1-7. Each test prints one `[PASS]`/`[FAIL]` line to the
//! uncaptured stderr, then asserts. Tests share a lock so timings and the
//! trained-model cache are not disturbed by concurrent runs.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use condinst::evalbench::{
    bench_mask_head, coco_iou_thresholds, evaluate_ap, evaluate_model, evaluate_pq, BenchConfig,
    DatasetEval, ImageEval, PQReport, ScoredMask,
};
use condinst::inference::{
    box_nms, mask_nms, panoptic_merge, CategoryMap, Detection, InferenceConfig, InstanceResult,
    MergeConfig, NmsMode,
};
use condinst::losses::{
    centerness_loss, dice_loss, dice_loss_grad, focal_loss, giou_loss, scene_loss,
    semantic_ce_loss, LossWeights,
};
use condinst::mask::{BinaryMask, BoxXyxy};
use condinst::model::{
    apply_mask_head, apply_mask_heads_batched, make_relative_coords, num_filter_params,
    unpack_filter_params, CoordMode, Level, MaskHead, MaskHeadShape, Model, ModelConfig,
};
use condinst::numerics::{conv2d, finite_diff_check, ConvSpec, FeatureMap};
use condinst::panoptic::{PanopticMap, Segment, VOID};
use condinst::synthdata::{generate_dataset, generate_scene, DatasetConfig, SceneAnnotation};
use condinst::targets::{assign_targets, gt_instances, GtInstance, TargetConfig};
use condinst::training::{train, train_vanilla_fcn_baseline, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "[{}] criterion {criterion} ({name}): {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn rvec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_1_filter_parameter_count() {
    let _g = serial();
    let t = Instant::now();
    let shape = ModelConfig::default().mask_shape();
    let default_ok = (shape.c_bottom, shape.depth, shape.width) == (8, 3, 8)
        && num_filter_params(&shape) == 169
        // (8+2)*8 + 8, 8*8 + 8, 8*1 + 1
        && 88 + 72 + 9 == 169;

    let mut mismatches = Vec::new();
    for depth in 1..=4 {
        for width in [2, 4, 8, 16] {
            for c_bottom in 1..=16 {
                let shape = MaskHeadShape {
                    c_bottom,
                    depth,
                    width,
                };
                let mut layers = Vec::new();
                let mut cin = c_bottom + 2;
                for l in 0..depth {
                    let cout = if l + 1 == depth { 1 } else { width };
                    layers.push(ConvSpec::zeros(cin, cout, 1));
                    cin = cout;
                }
                let explicit = MaskHead { layers };
                let counted = explicit.num_params();
                let unpacked = unpack_filter_params(&vec![0.0; counted], &shape);
                let same_layout = unpacked.as_ref().is_ok_and(|h| {
                    h.layers.len() == depth
                        && h.layers.iter().zip(&explicit.layers).all(|(a, b)| {
                            (a.in_channels, a.out_channels, a.kernel)
                                == (b.in_channels, b.out_channels, b.kernel)
                        })
                });
                let rejects = unpack_filter_params(&vec![0.0; counted + 1], &shape).is_err()
                    && unpack_filter_params(&vec![0.0; counted - 1], &shape).is_err();
                if num_filter_params(&shape) != counted || !same_layout || !rejects {
                    mismatches.push((c_bottom, depth, width));
                }
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = default_ok && mismatches.is_empty() && secs < 1.0;
    report(
        1,
        "filter parameter count",
        pass,
        &format!(
            "default head has {} params; {} of 256 grid shapes disagree; {secs:.3} s",
            num_filter_params(&shape),
            mismatches.len()
        ),
    );
    assert!(pass, "mismatches {mismatches:?}");
}

// ---------------------------------------------------------------- 2

const GRAD_STEP: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-4;
const CHAIN_POINT: u64 = 1;

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        backbone_channels: vec![2, 2, 3, 3, 3, 3],
        fpn_channels: 4,
        head_channels: 4,
        tower_depth: 1,
        bottom_channels: 4,
        bottom_convs: 1,
        c_bottom: 2,
        mask_head_width: 3,
        ..ModelConfig::default()
    }
}

#[test]
fn criterion_2_gradient_suite() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut results: Vec<(&str, f64)> = Vec::new();
    let check = |f: &dyn Fn(&[f64]) -> f64, x: &[f64], g: &[f64]| {
        finite_diff_check(f, x, g, usize::MAX, GRAD_STEP, 0)
            .unwrap()
            .max_rel_err
    };

    let gt: Vec<f64> = (0..40).map(|i| f64::from(i % 3 == 0)).collect();
    let pred = rvec(&mut rng, 40, 0.05, 0.95);
    let (_, g) = dice_loss_grad(&pred, &gt).unwrap();
    results.push(("dice", check(&|p| dice_loss(p, &gt).unwrap(), &pred, &g)));

    let logits = rvec(&mut rng, 60, -3.0, 3.0);
    let targets: Vec<f64> = (0..60).map(|i| f64::from(i % 4 == 0)).collect();
    let (_, g) = focal_loss(&logits, &targets, 0.25, 2.0, 5).unwrap();
    results.push((
        "focal",
        check(
            &|p| focal_loss(p, &targets, 0.25, 2.0, 5).unwrap().0,
            &logits,
            &g,
        ),
    ));

    let preds: Vec<[f64; 4]> = (0..8)
        .map(|_| std::array::from_fn(|_| rng.random_range(1.0..10.0)))
        .collect();
    let gts: Vec<[f64; 4]> = (0..8)
        .map(|_| std::array::from_fn(|_| rng.random_range(1.0..10.0)))
        .collect();
    let weights = rvec(&mut rng, 8, 0.1, 1.0);
    let (_, g) = giou_loss(&preds, &gts, &weights).unwrap();
    let flat: Vec<f64> = preds.iter().flatten().copied().collect();
    let gflat: Vec<f64> = g.iter().flatten().copied().collect();
    results.push((
        "giou",
        check(
            &|p| {
                let pr: Vec<[f64; 4]> = p.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
                giou_loss(&pr, &gts, &weights).unwrap().0
            },
            &flat,
            &gflat,
        ),
    ));

    let cl = rvec(&mut rng, 20, -2.0, 2.0);
    let ct = rvec(&mut rng, 20, 0.0, 1.0);
    let (_, g, _) = centerness_loss(&cl, &ct).unwrap();
    results.push((
        "centerness",
        check(&|p| centerness_loss(p, &ct).unwrap().0, &cl, &g),
    ));

    let sl = FeatureMap::new(5, 4, 4, 4, rvec(&mut rng, 80, -2.0, 2.0)).unwrap();
    let labels: Vec<u32> = (0..16).map(|i| (i % 5) as u32).collect();
    let (_, g) = semantic_ce_loss(&sl, &labels).unwrap();
    results.push((
        "semantic",
        check(
            &|p| {
                semantic_ce_loss(&FeatureMap::new(5, 4, 4, 4, p.to_vec()).unwrap(), &labels)
                    .unwrap()
                    .0
            },
            sl.data(),
            &g,
        ),
    ));

    // Total loss through the generated filters into the controller, on a
    // single-instance 32x32 scene. Central differences at this step are only
    // meaningful where no ReLU pre-activation lies within reach of the probe,
    // so the fixture is a point that is smooth at that scale.
    let mut rng = ChaCha8Rng::seed_from_u64(CHAIN_POINT);
    let mut model = Model::new(tiny_model_config(), CHAIN_POINT).unwrap();
    let ctrl = model.params().find("head.controller.weight").unwrap();
    let ctrl_bias = model.params().find("head.controller.bias").unwrap();
    for v in model.params_mut().get_mut(ctrl) {
        *v = rng.random_range(-0.4..0.4);
    }
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        if model.params().info(id).name.ends_with(".bias") {
            for v in model.params_mut().get_mut(id) {
                *v += rng.random_range(-0.05..0.05);
            }
        }
    }
    let img = FeatureMap::new(3, 32, 32, 1, rvec(&mut rng, 3 * 32 * 32, 0.0, 1.0)).unwrap();
    let gts = vec![GtInstance {
        class_id: 2,
        mask: BinaryMask::from_fn(32, 32, |x, y| (6..20).contains(&x) && (9..21).contains(&y)),
    }];
    let tcfg = TargetConfig::default();
    let w = LossWeights::default();
    let out = scene_loss(&model, &img, &gts, None, &tcfg, &w).unwrap();
    let base = model.clone();
    let mut chain_probes = 0;
    let mut chain_err: f64 = 0.0;
    for id in [ctrl, ctrl_bias] {
        let range = model.params().range(id);
        let x0 = model.params().flat()[range.clone()].to_vec();
        let r = finite_diff_check(
            |p| {
                let mut m = base.clone();
                m.params_mut().get_mut(id).copy_from_slice(p);
                scene_loss(&m, &img, &gts, None, &tcfg, &w)
                    .unwrap()
                    .breakdown
                    .total
            },
            &x0,
            &out.grads[range],
            usize::MAX,
            GRAD_STEP,
            0,
        )
        .unwrap();
        chain_probes += r.num_probes - r.skipped;
        chain_err = chain_err.max(r.max_rel_err);
    }
    results.push(("loss->controller->dynamic head", chain_err));

    let secs = t.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let pass = out.breakdown.l_mask > 0.0 && chain_probes > 100 && worst < GRAD_TOL && secs < 120.0;
    let detail = results
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    report(
        2,
        "gradient suite",
        pass,
        &format!("max rel err at h=1e-4: {detail}; {chain_probes} chain probes; {secs:.1} s"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 3

fn conv_reference(input: &FeatureMap, spec: &ConvSpec) -> Vec<f64> {
    let (c, h, w) = (input.channels(), input.height(), input.width());
    let k = spec.kernel as isize;
    let pad = k / 2;
    let mut out = vec![0.0; spec.out_channels * h * w];
    for o in 0..spec.out_channels {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = spec.bias[o];
                for i in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let (sy, sx) = (y + ky - pad, x + kx - pad);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let wi =
                                ((o * c + i) * k as usize + ky as usize) * k as usize + kx as usize;
                            acc += spec.weights[wi] * input.at(i, sy as usize, sx as usize);
                        }
                    }
                }
                out[(o * h + y as usize) * w + x as usize] = acc;
            }
        }
    }
    out
}

fn conv_oracle() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    for case in 0..40 {
        let kernel = if case % 2 == 0 { 1 } else { 3 };
        let (cin, cout) = (rng.random_range(1..7), rng.random_range(1..7));
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let input = FeatureMap::new(cin, h, w, 1, rvec(&mut rng, cin * h * w, -1.0, 1.0)).unwrap();
        let spec = ConvSpec::new(
            cin,
            cout,
            kernel,
            rvec(&mut rng, cout * cin * kernel * kernel, -1.0, 1.0),
            rvec(&mut rng, cout, -1.0, 1.0),
        )
        .unwrap();
        let got = conv2d(&input, &spec).unwrap();
        let want = conv_reference(&input, &spec);
        for (a, b) in got.data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

fn batched_head_oracle() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let shape = ModelConfig::default().mask_shape();
    let (h, w, stride) = (16, 16, 4);
    let bottom = FeatureMap::new(
        shape.c_bottom,
        h,
        w,
        stride,
        rvec(&mut rng, shape.c_bottom * h * w, -1.0, 1.0),
    )
    .unwrap();
    let heads: Vec<(MaskHead, FeatureMap)> = (0..50)
        .map(|_| {
            let theta = rvec(&mut rng, num_filter_params(&shape), -0.5, 0.5);
            let origin = (rng.random_range(0.0..64.0), rng.random_range(0.0..64.0));
            (
                unpack_filter_params(&theta, &shape).unwrap(),
                make_relative_coords(origin, h, w, stride, 32.0),
            )
        })
        .collect();
    let batched = apply_mask_heads_batched(&bottom, &heads).unwrap();
    heads
        .iter()
        .zip(&batched)
        .map(|((head, coords), b)| {
            apply_mask_head(&bottom, coords, head)
                .unwrap()
                .max_abs_diff(b)
        })
        .fold(0.0, f64::max)
}

/// Every location of every level against every instance, no pruning.
fn assignment_oracle(scenes: &[SceneAnnotation], levels: &[Level], cfg: &TargetConfig) -> usize {
    let mut mismatches = 0;
    for scene in scenes {
        let gts = gt_instances(scene);
        let (h, w) = (scene.height(), scene.width());
        let got = assign_targets(&gts, h, w, levels, cfg);
        let mut sorted = levels.to_vec();
        sorted.sort();
        let mut idx = 0;
        for (li, level) in sorted.iter().enumerate() {
            let s = level.stride();
            let sf = s as f64 * cfg.range_scale;
            let lo = if li == 0 { f64::NEG_INFINITY } else { sf };
            let hi = if li + 1 == sorted.len() {
                f64::INFINITY
            } else {
                2.0 * sf
            };
            for gy in 0..h / s {
                for gx in 0..w / s {
                    let (px, py) = ((s / 2 + gx * s) as f64, (s / 2 + gy * s) as f64);
                    let mut best: Option<(usize, usize, [f64; 4])> = None;
                    for (k, g) in gts.iter().enumerate() {
                        let pixels: Vec<(usize, usize)> = (0..h)
                            .flat_map(|y| (0..w).map(move |x| (x, y)))
                            .filter(|&(x, y)| g.mask.get(x, y))
                            .collect();
                        if pixels.is_empty() {
                            continue;
                        }
                        let n = pixels.len() as f64;
                        let cx = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
                        let cy = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;
                        let x1 = pixels.iter().map(|p| p.0).min().unwrap() as f64;
                        let x2 = pixels.iter().map(|p| p.0).max().unwrap() as f64 + 1.0;
                        let y1 = pixels.iter().map(|p| p.1).min().unwrap() as f64;
                        let y2 = pixels.iter().map(|p| p.1).max().unwrap() as f64 + 1.0;
                        let d = cfg.center_radius * s as f64;
                        let (rx1, ry1) = ((cx - d).max(x1).max(0.0), (cy - d).max(y1).max(0.0));
                        let (rx2, ry2) = (
                            (cx + d).min(x2).min(w as f64),
                            (cy + d).min(y2).min(h as f64),
                        );
                        if !(px >= rx1 && px <= rx2 && py >= ry1 && py <= ry2) {
                            continue;
                        }
                        let dist = [px - x1, py - y1, x2 - px, y2 - py];
                        let m = dist.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        if dist.iter().any(|&v| v < 0.0) || m <= lo || m > hi {
                            continue;
                        }
                        if best.is_none_or(|(_, area, _)| pixels.len() < area) {
                            best = Some((k, pixels.len(), dist));
                        }
                    }
                    let loc = &got.locations[idx];
                    idx += 1;
                    let ok = match best {
                        None => loc.instance.is_none() && loc.class_label == 0,
                        Some((k, _, d)) => {
                            let [l, t, r, b] = d;
                            let ctr = ((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt();
                            loc.instance == Some(k)
                                && loc.class_label == gts[k].class_id
                                && loc.distances == d
                                && loc.centerness == ctr
                        }
                    };
                    let placed = (loc.level, loc.x, loc.y) == (*level, gx, gy);
                    if !ok || !placed {
                        mismatches += 1;
                    }
                }
            }
        }
        if idx != got.locations.len() {
            mismatches += 1;
        }
    }
    mismatches
}

fn random_box(rng: &mut ChaCha8Rng) -> BoxXyxy {
    let (x, y) = (rng.random_range(0.0..40.0), rng.random_range(0.0..40.0));
    BoxXyxy::new(
        x,
        y,
        x + rng.random_range(2.0..20.0),
        y + rng.random_range(2.0..20.0),
    )
}

fn iou_boxes(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn iou_masks(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut i, mut u) = (0usize, 0usize);
    for (&p, &q) in a.data().iter().zip(b.data()) {
        i += usize::from(p && q);
        u += usize::from(p || q);
    }
    if u == 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}

/// Repeatedly keeps the best remaining candidate and deletes everything of its
/// class that overlaps it too much.
fn greedy_brute<T: Clone>(
    items: &[T],
    key: impl Fn(&T) -> (f64, (Level, usize, usize), u32),
    overlap: impl Fn(&T, &T) -> f64,
    thr: f64,
    max_keep: usize,
) -> Vec<T> {
    let mut alive: Vec<T> = items.to_vec();
    let mut kept = Vec::new();
    while !alive.is_empty() && kept.len() < max_keep {
        let mut bi = 0;
        for i in 1..alive.len() {
            let (s, o, _) = key(&alive[i]);
            let (bs, bo, _) = key(&alive[bi]);
            if s > bs || (s == bs && o < bo) {
                bi = i;
            }
        }
        let best = alive.remove(bi);
        alive.retain(|d| key(d).2 != key(&best).2 || overlap(&best, d) <= thr);
        kept.push(best);
    }
    kept
}

fn nms_oracles() -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let levels = [Level::P3, Level::P4, Level::P5];
    let mut box_bad = 0;
    for f in 0..500 {
        let n = rng.random_range(0..40);
        let dets: Vec<Detection> = (0..n)
            .map(|i| {
                // coarse scores force ties on the (level, y, x) order
                let score = f64::from(rng.random_range(1..20u32)) / 20.0;
                Detection::new(
                    rng.random_range(1..4),
                    score,
                    random_box(&mut rng),
                    levels[i % 3],
                    rng.random_range(0..8),
                    rng.random_range(0..8),
                )
            })
            .collect();
        let thr = [0.3, 0.5, 0.6][f % 3];
        let max_keep = if f % 5 == 0 { 5 } else { 100 };
        let got = box_nms(&dets, thr, max_keep);
        let want = greedy_brute(
            &dets,
            |d| (d.score, (d.level, d.y, d.x), d.class_id),
            |a, b| iou_boxes(&a.bbox(), &b.bbox()),
            thr,
            max_keep,
        );
        if got != want {
            box_bad += 1;
        }
    }
    let mut mask_bad = 0;
    for f in 0..500 {
        let n = rng.random_range(0..25);
        let results: Vec<InstanceResult> = (0..n)
            .map(|i| {
                let b = random_box(&mut rng);
                let mask = BinaryMask::from_fn(64, 64, |x, y| {
                    b.contains_point(x as f64 + 0.5, y as f64 + 0.5)
                });
                let area = mask.count();
                InstanceResult {
                    class_id: rng.random_range(1..3),
                    score: f64::from(rng.random_range(1..20u32)) / 20.0,
                    level: levels[i % 3],
                    x: rng.random_range(0..8),
                    y: rng.random_range(0..8),
                    soft: FeatureMap::zeros(1, 1, 1, 1),
                    bbox: mask.tight_box(),
                    empty: area == 0,
                    area,
                    mask,
                }
            })
            .collect();
        let thr = [0.3, 0.5, 0.6][f % 3];
        let got = mask_nms(&results, thr, 100);
        let want = greedy_brute(
            &results,
            |r| (r.score, (r.level, r.y, r.x), r.class_id),
            |a, b| iou_masks(&a.mask, &b.mask),
            thr,
            100,
        );
        if got != want {
            mask_bad += 1;
        }
    }
    (box_bad, mask_bad)
}

/// Greedy matching of score-sorted predictions, then the 101-point
/// interpolated precision by direct maximisation over the ranked prefixes.
fn ap_brute(gts: &[BinaryMask], preds: &[(f64, BinaryMask)], thr: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].0.total_cmp(&preds[a].0).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut points = Vec::new();
    let mut tp = 0;
    for (rank, &p) in order.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            let iou = iou_masks(&preds[p].1, gt);
            if !taken[g] && iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            tp += 1;
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / (rank + 1) as f64));
    }
    (0..=100)
        .map(|r| {
            let r = f64::from(r) / 100.0;
            points
                .iter()
                .filter(|(rec, _)| *rec >= r)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

fn rect(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
    BinaryMask::from_fn(w, h, |x, y| (x0..x1).contains(&x) && (y0..y1).contains(&y))
}

fn ap_pq_oracles() -> f64 {
    let mut worst: f64 = 0.0;

    // Hand fixture: two ground truths; ranked hits are hit, miss, hit.
    let g1 = rect(10, 10, 0, 0, 4, 4);
    let g2 = rect(10, 10, 5, 5, 9, 9);
    let images = [ImageEval {
        gts: vec![
            GtInstance {
                class_id: 1,
                mask: g1.clone(),
            },
            GtInstance {
                class_id: 1,
                mask: g2.clone(),
            },
        ],
        preds: vec![
            ScoredMask {
                class_id: 1,
                score: 0.9,
                mask: g1.clone(),
            },
            ScoredMask {
                class_id: 1,
                score: 0.8,
                mask: rect(10, 10, 0, 6, 3, 9),
            },
            ScoredMask {
                class_id: 1,
                score: 0.7,
                mask: g2.clone(),
            },
        ],
    }];
    let r = evaluate_ap(&images, &[0.5]).unwrap();
    // recall 0.5 at precision 1 for r <= 0.5 (51 points), recall 1 at precision 2/3 above
    let hand = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
    worst = worst.max((r.ap - hand).abs());

    // Random fixtures against the brute-force reference.
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for _ in 0..200 {
        let random_mask = |rng: &mut ChaCha8Rng| {
            let (x, y) = (rng.random_range(0..10), rng.random_range(0..10));
            rect(
                16,
                16,
                x,
                y,
                x + rng.random_range(2..7),
                y + rng.random_range(2..7),
            )
        };
        let gts: Vec<BinaryMask> = (0..rng.random_range(1..5))
            .map(|_| random_mask(&mut rng))
            .collect();
        let preds: Vec<(f64, BinaryMask)> = (0..rng.random_range(0..7))
            .map(|_| {
                let m = if rng.random_bool(0.5) && !gts.is_empty() {
                    gts[rng.random_range(0..gts.len())].clone()
                } else {
                    random_mask(&mut rng)
                };
                (rng.random_range(0.0..1.0), m)
            })
            .collect();
        let im = ImageEval {
            gts: gts
                .iter()
                .map(|m| GtInstance {
                    class_id: 1,
                    mask: m.clone(),
                })
                .collect(),
            preds: preds
                .iter()
                .map(|(s, m)| ScoredMask {
                    class_id: 1,
                    score: *s,
                    mask: m.clone(),
                })
                .collect(),
        };
        let thresholds = coco_iou_thresholds();
        let got = evaluate_ap(std::slice::from_ref(&im), &thresholds).unwrap();
        let want = thresholds
            .iter()
            .map(|&t| ap_brute(&gts, &preds, t))
            .sum::<f64>()
            / thresholds.len() as f64;
        worst = worst.max((got.ap - want).abs());
        worst = worst.max((got.ap50 - ap_brute(&gts, &preds, 0.5)).abs());
    }

    // PQ hand fixture: a stuff segment matched at IoU 0.8 and a thing matched at
    // IoU 0.4 (so a false positive and a false negative).
    let (w, h) = (10, 10);
    let gt_ids: Vec<u16> = (0..w * h).map(|p| if p % w < 5 { 1 } else { 2 }).collect();
    let gt = PanopticMap::new(
        w,
        h,
        gt_ids,
        vec![pq_segment(1, 4, false), pq_segment(2, 1, true)],
    )
    .unwrap();
    // prediction: stuff covers x < 4 (40 of the 50 stuff pixels, IoU 0.8);
    // the thing covers x >= 8 only (20 of 50, IoU 0.4); x in 4..8 is stuff 5
    let pred_ids: Vec<u16> = (0..w * h)
        .map(|p| match p % w {
            0..=3 => 1,
            4..=7 => 3,
            _ => 2,
        })
        .collect();
    let pred = PanopticMap::new(
        w,
        h,
        pred_ids,
        vec![
            pq_segment(1, 4, false),
            pq_segment(2, 1, true),
            pq_segment(3, 5, false),
        ],
    )
    .unwrap();
    let pq = evaluate_pq(&pred, &gt).unwrap();
    // category 4: tp 1 at 0.8 -> 0.8; category 1: fp 1 fn 1 -> 0; category 5: fp 1 -> 0
    worst = worst.max((pq.pq - 0.8 / 3.0).abs());
    worst = worst.max((pq.pq_stuff - 0.4).abs());
    worst = worst.max(pq.pq_things.abs());
    worst = worst.max(pq.identity_residual());

    let mut rng = ChaCha8Rng::seed_from_u64(35);
    for _ in 0..200 {
        let (a, b) = (random_panoptic(&mut rng), random_panoptic(&mut rng));
        let got = evaluate_pq(&a, &b).unwrap();
        let want = pq_brute(&a, &b);
        worst = worst.max((got.pq - want).abs());
        worst = worst.max(got.identity_residual());
    }
    worst
}

fn pq_segment(id: u16, category: u32, is_thing: bool) -> Segment {
    Segment {
        id,
        category,
        is_thing,
        instance: None,
        area: 0,
        score: None,
    }
}

fn random_panoptic(rng: &mut ChaCha8Rng) -> PanopticMap {
    let (w, h) = (8, 8);
    let n = rng.random_range(1..5u16);
    let segs: Vec<Segment> = (1..=n)
        .map(|id| {
            let cat = rng.random_range(1..5);
            pq_segment(id, cat, cat <= 2)
        })
        .collect();
    // blocky layout so that matches above 0.5 happen
    let cells: Vec<u16> = (0..16).map(|_| rng.random_range(0..=n)).collect();
    let ids = (0..w * h)
        .map(|p| cells[(p / w / 2) * 4 + (p % w) / 2])
        .collect();
    PanopticMap::new(w, h, ids, segs).unwrap()
}

/// Mean PQ over categories, straight from pixel counts.
fn pq_brute(pred: &PanopticMap, gt: &PanopticMap) -> f64 {
    let mut cats: Vec<u32> = pred
        .segments()
        .iter()
        .chain(gt.segments())
        .filter(|s| s.area > 0)
        .map(|s| s.category)
        .collect();
    cats.sort_unstable();
    cats.dedup();
    let mut total = 0.0;
    let mut counted = 0;
    for c in cats {
        let ps: Vec<&Segment> = pred
            .segments()
            .iter()
            .filter(|s| s.category == c && s.area > 0)
            .collect();
        let gs: Vec<&Segment> = gt
            .segments()
            .iter()
            .filter(|s| s.category == c && s.area > 0)
            .collect();
        let (mut tp, mut iou_sum) = (0usize, 0.0);
        let mut pm = vec![false; ps.len()];
        let mut gm = vec![false; gs.len()];
        for (i, p) in ps.iter().enumerate() {
            for (j, g) in gs.iter().enumerate() {
                let (mut inter, mut union) = (0usize, 0usize);
                for (&a, &b) in pred.ids().iter().zip(gt.ids()) {
                    let (ip, ig) = (a == p.id, b == g.id);
                    inter += usize::from(ip && ig);
                    union += usize::from((ip || ig) && b != VOID);
                }
                let iou = inter as f64 / union as f64;
                if iou > 0.5 {
                    tp += 1;
                    iou_sum += iou;
                    pm[i] = true;
                    gm[j] = true;
                }
            }
        }
        let fn_ = gm.iter().filter(|m| !**m).count();
        let fp = ps
            .iter()
            .zip(&pm)
            .filter(|(p, m)| {
                let on_void = pred
                    .ids()
                    .iter()
                    .zip(gt.ids())
                    .filter(|(&a, &b)| a == p.id && b == VOID)
                    .count();
                !**m && on_void as f64 / p.area as f64 <= 0.5
            })
            .count();
        let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
        if denom > 0.0 {
            total += iou_sum / denom;
            counted += 1;
        }
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

#[test]
fn criterion_3_oracle_equivalences() {
    let _g = serial();
    let t = Instant::now();
    let conv_err = conv_oracle();
    let head_err = batched_head_oracle();
    let scenes = generate_dataset(&DatasetConfig {
        num_scenes: 200,
        rng_seed: 3,
        ..DatasetConfig::default()
    });
    let assign_bad = assignment_oracle(
        &scenes,
        &ModelConfig::default().fpn_levels,
        &TargetConfig::default(),
    );
    let (box_bad, mask_bad) = nms_oracles();
    let metric_err = ap_pq_oracles();
    let secs = t.elapsed().as_secs_f64();
    let pass = conv_err < 1e-12
        && head_err < 1e-6
        && assign_bad == 0
        && box_bad == 0
        && mask_bad == 0
        && metric_err < 1e-9
        && secs < 300.0;
    report(
        3,
        "oracle equivalences",
        pass,
        &format!(
            "conv {conv_err:.1e}, batched heads {head_err:.1e}, assignment mismatches {assign_bad}/200 scenes, \
             box-NMS {box_bad}/500, mask-NMS {mask_bad}/500, AP/PQ {metric_err:.1e}; {secs:.1} s"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4, 5

const SEEDS: [u64; 3] = [0, 1, 2];

struct Splits {
    data: DatasetConfig,
    train: Vec<SceneAnnotation>,
    val: Vec<SceneAnnotation>,
}

fn splits() -> &'static Splits {
    static S: OnceLock<Splits> = OnceLock::new();
    S.get_or_init(|| {
        let data = DatasetConfig {
            num_scenes: 400,
            ..DatasetConfig::default()
        };
        let val = generate_dataset(&DatasetConfig {
            num_scenes: 100,
            rng_seed: 1000,
            ..data.clone()
        });
        Splits {
            train: generate_dataset(&data),
            data,
            val,
        }
    })
}

struct Run {
    boxed: DatasetEval,
    masked: DatasetEval,
    /// Training plus the box-NMS evaluation.
    secs: f64,
    mask_eval_secs: f64,
}

/// Trains (once per process) and evaluates one configuration and seed.
fn trained(label: &str, model_cfg: ModelConfig, vanilla: bool, seed: u64) -> Arc<Run> {
    static CACHE: OnceLock<Mutex<HashMap<(String, u64), Arc<Run>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(r) = cache.lock().unwrap().get(&(label.to_string(), seed)) {
        return r.clone();
    }
    let s = splits();
    let t = Instant::now();
    let tcfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let out = if vanilla {
        train_vanilla_fcn_baseline(&model_cfg, &s.data, &s.train, &tcfg, None)
    } else {
        train(&model_cfg, &s.data, &s.train, &tcfg, None)
    }
    .unwrap();
    let boxed = evaluate_model(&out.model, &s.val, &InferenceConfig::default()).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let masked = evaluate_model(
        &out.model,
        &s.val,
        &InferenceConfig {
            nms_mode: NmsMode::Mask,
            ..InferenceConfig::default()
        },
    )
    .unwrap();
    let run = Arc::new(Run {
        boxed,
        masked,
        secs,
        mask_eval_secs: t.elapsed().as_secs_f64(),
    });
    let _ = std::io::stderr().lock().write_all(
        format!(
            "  trained {label} seed {seed}: AP {:.3} AP50 {:.3} in {:.0} s\n",
            run.boxed.ap.ap, run.boxed.ap.ap50, run.secs
        )
        .as_bytes(),
    );
    cache
        .lock()
        .unwrap()
        .insert((label.to_string(), seed), run.clone());
    run
}

fn arm(label: &str, model_cfg: ModelConfig, vanilla: bool) -> Vec<Arc<Run>> {
    SEEDS
        .iter()
        .map(|&s| trained(label, model_cfg.clone(), vanilla, s))
        .collect()
}

fn default_arm() -> Vec<Arc<Run>> {
    arm("default", ModelConfig::default(), false)
}

/// Share of pairs whose two attributed predictions overlap with IoU below 0.5;
/// a pair missing a prediction counts against it.
fn pairs_separated(e: &DatasetEval) -> f64 {
    e.pairs_below(0.5)
}

#[test]
fn criterion_4_identical_pair_discrimination() {
    let _g = serial();
    let condinst = default_arm();
    let vanilla = arm("vanilla", ModelConfig::default(), true);
    let ap50: Vec<f64> = condinst.iter().map(|r| r.boxed.ap.ap50).collect();
    let separated: Vec<f64> = condinst.iter().map(|r| pairs_separated(&r.boxed)).collect();
    let merged_control: Vec<f64> = vanilla.iter().map(|r| r.boxed.pairs_above(0.5)).collect();
    let pairs = condinst[0].boxed.pairs.len();
    let cpu_min = condinst.iter().chain(&vanilla).map(|r| r.secs).sum::<f64>() / 60.0;
    let (m_ap50, m_sep, m_ctrl) = (median(&ap50), median(&separated), median(&merged_control));
    let pass = pairs > 0 && m_ap50 >= 0.5 && m_sep == 1.0 && m_ctrl > 0.5 && cpu_min < 30.0;
    report(
        4,
        "identical-pair discrimination",
        pass,
        &format!(
            "median AP50 {m_ap50:.3} (>= 0.5); pairs with mutual IoU < 0.5: median {:.1}% of {pairs} \
             (each pair required; per seed {:?}); control pairs with mutual IoU > 0.5: median {:.1}% \
             (> 50%); {cpu_min:.1} CPU min",
            100.0 * m_sep,
            separated
                .iter()
                .map(|v| format!("{:.1}%", 100.0 * v))
                .collect::<Vec<_>>(),
            100.0 * m_ctrl
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_ablation_directionality() {
    let _g = serial();
    let t = Instant::now();
    let base = ModelConfig::default();
    let ap = |runs: &[Arc<Run>]| median(&runs.iter().map(|r| r.boxed.ap.ap).collect::<Vec<_>>());
    let default = default_arm();
    let rel = ap(&default);
    let none_arm = arm(
        "coords=none",
        ModelConfig {
            coord_mode: CoordMode::None,
            ..base.clone()
        },
        false,
    );
    let abs_arm = arm(
        "coords=absolute",
        ModelConfig {
            coord_mode: CoordMode::Absolute,
            ..base.clone()
        },
        false,
    );
    let f1_arm = arm(
        "factor=1",
        ModelConfig {
            upsample_factor: 1,
            ..base.clone()
        },
        false,
    );
    let d1_arm = arm(
        "depth=1",
        ModelConfig {
            mask_head_depth: 1,
            ..base.clone()
        },
        false,
    );
    let d2_arm = arm(
        "depth=2",
        ModelConfig {
            mask_head_depth: 2,
            ..base.clone()
        },
        false,
    );
    let (none, abs, f1, d1, d2) = (
        ap(&none_arm),
        ap(&abs_arm),
        ap(&f1_arm),
        ap(&d1_arm),
        ap(&d2_arm),
    );
    let mask_ap = median(&default.iter().map(|r| r.masked.ap.ap).collect::<Vec<_>>());
    let hours = |arms: &[&[Arc<Run>]]| {
        arms.iter()
            .flat_map(|a| a.iter())
            .map(|r| r.secs)
            .sum::<f64>()
            / 3600.0
    };
    let sweep_h = [
        hours(&[&default, &none_arm, &abs_arm]),
        hours(&[&default, &f1_arm]),
        hours(&[&default, &d1_arm, &d2_arm]),
        hours(&[&default]) + default.iter().map(|r| r.mask_eval_secs).sum::<f64>() / 3600.0,
    ];
    let slowest = sweep_h.iter().cloned().fold(0.0, f64::max);

    let a = rel > none && rel > abs;
    let b = rel >= f1;
    let c = d2 > d1 && rel > d1;
    let d = (mask_ap - rel).abs() <= 0.015;
    let pass = a && b && c && d && slowest < 2.0;
    let yes = |v: bool| if v { "ok" } else { "violated" };
    report(
        5,
        "ablation directionality",
        pass,
        &format!(
            "median AP: (a) rel {rel:.3} vs none {none:.3}, abs {abs:.3} {}; (b) factor 2 {rel:.3} vs 1 {f1:.3} {}; \
             (c) depth 3 {rel:.3}, 2 {d2:.3} vs 1 {d1:.3} {}; (d) mask-NMS {mask_ap:.3} vs box-NMS {rel:.3} {}; \
             sweep CPU h {:?} (each < 2); {:.2} h wall",
            yes(a),
            yes(b),
            yes(c),
            yes(d),
            sweep_h.map(|h| (h * 100.0).round() / 100.0),
            t.elapsed().as_secs_f64() / 3600.0
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_6_mask_head_timing() {
    let _g = serial();
    let t = Instant::now();
    let model = Model::new(ModelConfig::default(), 0).unwrap();
    let image = generate_scene(&DatasetConfig::default(), 0).image;
    let r = bench_mask_head(&model, &image, &BenchConfig::default()).unwrap();
    let ratio = r.ratio(100, 1).unwrap();
    let share = r.mask_head_share;
    let secs = t.elapsed().as_secs_f64();
    let pass = ratio <= 150.0 && share <= 0.25 && secs < 120.0;
    report(
        6,
        "mask-head timing",
        pass,
        &format!(
            "K=100 / K=1 median ratio {ratio:.1} (<= 150); mask-head share at K=100 {:.1}% (<= 25%); \
             K=1 {:.4} ms, K=100 {:.4} ms, whole image {:.2} ms; {secs:.1} s",
            100.0 * share,
            r.get(1).unwrap().median_ms,
            r.get(100).unwrap().median_ms,
            r.total_inference_ms
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 7

const C: usize = 3;

fn inst(class_id: u32, score: f64, mask: BinaryMask) -> InstanceResult {
    let area = mask.count();
    InstanceResult {
        class_id,
        score,
        level: Level::P3,
        x: 0,
        y: 0,
        soft: FeatureMap::zeros(1, 1, 1, 1),
        bbox: mask.tight_box(),
        empty: area == 0,
        area,
        mask,
    }
}

fn thing(id: u16, category: u32, instance: usize, score: f64) -> Segment {
    Segment {
        id,
        category,
        is_thing: true,
        instance: Some(instance),
        area: 0,
        score: Some(score),
    }
}

fn stuff(id: u16, category: u32) -> Segment {
    Segment {
        id,
        category,
        is_thing: false,
        instance: None,
        area: 0,
        score: None,
    }
}

/// Rows of single-character ids, `.` for void.
fn ids_from(rows: &[&str]) -> Vec<u16> {
    rows.iter()
        .flat_map(|r| {
            r.chars().map(|c| match c {
                '.' => VOID,
                d => d.to_digit(10).unwrap() as u16,
            })
        })
        .collect()
}

fn mask_from(rows: &[&str]) -> BinaryMask {
    let w = rows[0].len();
    let data = rows
        .iter()
        .flat_map(|r| r.chars().map(|c| c == '#'))
        .collect();
    BinaryMask::from_vec(w, rows.len(), data)
}

fn categories(rows: &[&str]) -> CategoryMap {
    CategoryMap {
        width: rows[0].len(),
        height: rows.len(),
        categories: rows
            .iter()
            .flat_map(|r| r.chars().map(|c| c.to_digit(10).unwrap()))
            .collect(),
    }
}

#[test]
fn criterion_7_panoptic_merge_rules() {
    let _g = serial();
    let t = Instant::now();
    let cfg = MergeConfig::default();
    let mut failures: Vec<&str> = Vec::new();
    let mut reports: Vec<PQReport> = Vec::new();

    // stuff 4 on the left, stuff 5 on the right, thing category 2 in the middle column
    let sem = categories(&["44255", "44255", "44255", "44255"]);
    let block = |rows: &[&str]| mask_from(rows);

    // score floor: 0.44 is dropped, 0.45 is kept
    let low = inst(1, 0.44, block(&["##...", "##...", ".....", "....."]));
    let at = inst(3, 0.45, block(&[".....", ".....", "...##", "...##"]));
    let got = panoptic_merge(&[low, at], &sem, C, &cfg);
    let want = PanopticMap::new(
        5,
        4,
        ids_from(&["22.33", "22.33", "22.11", "22.11"]),
        vec![thing(1, 3, 1, 0.45), stuff(2, 4), stuff(3, 5)],
    )
    .unwrap();
    if got != want {
        failures.push("score floor");
    }

    // area-loss discard: B loses 2 of 4 pixels (50%) and is dropped; C loses
    // 2 of 5 (exactly 40%) and keeps its 3 free pixels
    let a = inst(1, 0.9, block(&["###..", "###..", ".....", "....."]));
    let b = inst(2, 0.8, block(&["..##.", "..##.", ".....", "....."]));
    let c = inst(3, 0.7, block(&[".....", ".##..", ".###.", "....."]));
    let got = panoptic_merge(&[c, a, b], &sem, C, &cfg);
    let want = PanopticMap::new(
        5,
        4,
        ids_from(&["11133", "11133", "42223", "44.33"]),
        vec![
            thing(1, 1, 1, 0.9),
            thing(2, 3, 0, 0.7),
            stuff(3, 5),
            stuff(4, 4),
        ],
    )
    .unwrap();
    if got != want {
        failures.push("area-loss discard");
    }

    // shared pixels go to the higher score whatever the input order; both keep
    // 8 of 12 pixels
    let hi = inst(1, 0.6, block(&["###..", "###..", "###..", "###.."]));
    let lo = inst(2, 0.95, block(&["..###", "..###", "..###", "..###"]));
    let got = panoptic_merge(&[hi.clone(), lo.clone()], &sem, C, &cfg);
    let got_rev = panoptic_merge(&[lo, hi], &sem, C, &cfg);
    let ids = ids_from(&["22111", "22111", "22111", "22111"]);
    let want = PanopticMap::new(
        5,
        4,
        ids.clone(),
        vec![thing(1, 2, 1, 0.95), thing(2, 1, 0, 0.6)],
    )
    .unwrap();
    let want_rev =
        PanopticMap::new(5, 4, ids, vec![thing(1, 2, 0, 0.95), thing(2, 1, 1, 0.6)]).unwrap();
    if got != want || got_rev != want_rev {
        failures.push("higher-score overlap attribution");
    }

    // stuff fill: no instances; thing category pixels become void
    let got = panoptic_merge(&[], &sem, C, &cfg);
    let want = PanopticMap::new(
        5,
        4,
        ids_from(&["11.22", "11.22", "11.22", "11.22"]),
        vec![stuff(1, 4), stuff(2, 5)],
    )
    .unwrap();
    if got != want || got.void_count() != 4 {
        failures.push("stuff fill");
    }

    // PQ on every merge result against a fixed reference, and on random maps
    let reference = PanopticMap::new(
        5,
        4,
        ids_from(&["11322", "11322", "11322", "11322"]),
        vec![stuff(1, 4), stuff(2, 5), thing(3, 2, 0, 1.0)],
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    for _ in 0..200 {
        let n = rng.random_range(0..4);
        let instances: Vec<InstanceResult> = (0..n)
            .map(|_| {
                let (x0, y0) = (rng.random_range(0..4), rng.random_range(0..3));
                let (x1, y1) = (rng.random_range(x0 + 1..=5), rng.random_range(y0 + 1..=4));
                inst(
                    rng.random_range(1..=3),
                    rng.random_range(0.3..1.0),
                    rect(5, 4, x0, y0, x1, y1),
                )
            })
            .collect();
        let merged = panoptic_merge(&instances, &sem, C, &cfg);
        if !merged.check_bookkeeping() {
            failures.push("bookkeeping");
        }
        reports.push(evaluate_pq(&merged, &reference).unwrap());
        reports.push(evaluate_pq(&reference, &merged).unwrap());
    }
    let residual = reports
        .iter()
        .map(|r| r.identity_residual())
        .fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    let pass = failures.is_empty() && residual < 1e-12 && secs < 10.0;
    report(
        7,
        "panoptic merge rules",
        pass,
        &format!(
            "fixtures failing: {failures:?}; max |PQ - SQ*RQ| over {} evaluations {residual:.1e}; {secs:.2} s",
            reports.len()
        ),
    );
    assert!(pass);
}
