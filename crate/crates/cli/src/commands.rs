//! Subcommand definitions and their implementations.

use std::path::{Path, PathBuf};

use condinst::evalbench::{
    bench_mask_head, evaluate_model, write_timings_csv, BenchConfig, DatasetEval,
};
use condinst::inference::{
    rle_decode, run_inference, write_inference, InferenceConfig, InferenceFile,
};
use condinst::model::{load_checkpoint, Model, ModelConfig};
use condinst::numerics::FeatureMap;
use condinst::panoptic::{PanopticMap, Segment};
use condinst::synthdata::{
    generate_dataset, generate_scene, read_dataset, write_dataset, DatasetConfig, SceneAnnotation,
};
use condinst::training::{
    run_sweep, train, train_vanilla_fcn_baseline, write_sweep_csv, SweepAxis, SweepSetup,
    TrainConfig,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{RunConfig, Section};
use crate::render::{plot_timings, render_instances, render_panoptic, Overlay};
use crate::CliError;

pub struct Spec {
    pub name: &'static str,
    pub about: &'static str,
    pub sections: Vec<Section>,
    pub run: fn(&RunConfig) -> Result<(), CliError>,
}

fn paths(keys: &[&str]) -> Section {
    let obj: serde_json::Map<String, Value> =
        keys.iter().map(|k| (k.to_string(), json!(""))).collect();
    Section::new("paths", &Value::Object(obj), true)
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainRun {
    /// Train the shared-head control arm instead.
    vanilla: bool,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct InferRun {
    /// Scene indices to process; empty means all.
    scenes: Vec<usize>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct BenchRun {
    plot: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct RenderRun {
    scene: usize,
    scale: u32,
    panoptic: bool,
}

impl Default for RenderRun {
    fn default() -> Self {
        Self {
            scene: 0,
            scale: 4,
            panoptic: false,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct SweepRun {
    axis: String,
    seeds: Vec<u64>,
    /// Trailing share of the dataset held out when no validation set is given.
    val_fraction: f64,
}

impl Default for SweepRun {
    fn default() -> Self {
        Self {
            axis: String::new(),
            seeds: vec![0],
            val_fraction: 0.2,
        }
    }
}

pub fn specs() -> Vec<Spec> {
    vec![
        Spec {
            name: "gen-data",
            about: "Generate a synthetic dataset",
            sections: vec![
                Section::new("data", &DatasetConfig::default(), true),
                paths(&["out"]),
            ],
            run: gen_data,
        },
        Spec {
            name: "train",
            about: "Train a model on a generated dataset",
            sections: vec![
                Section::new("train", &TrainConfig::default(), true),
                Section::new("model", &ModelConfig::default(), false),
                Section::new("run", &TrainRun::default(), true),
                paths(&["data", "out"]),
            ],
            run: train_cmd,
        },
        Spec {
            name: "infer",
            about: "Run inference and write masks, boxes and panoptic maps",
            sections: vec![
                Section::new("inference", &InferenceConfig::default(), true),
                Section::new("run", &InferRun::default(), true),
                paths(&["checkpoint", "data", "image", "out"]),
            ],
            run: infer,
        },
        Spec {
            name: "eval",
            about: "Evaluate mask AP, panoptic quality and identical-pair separation",
            sections: vec![
                Section::new("inference", &InferenceConfig::default(), true),
                paths(&["checkpoint", "data", "out"]),
            ],
            run: eval,
        },
        Spec {
            name: "bench",
            about: "Time the mask-head stage against the instance count",
            sections: vec![
                Section::new("bench", &BenchConfig::default(), true),
                Section::new("model", &ModelConfig::default(), false),
                Section::new("run", &BenchRun::default(), true),
                paths(&["checkpoint", "data", "out"]),
            ],
            run: bench,
        },
        Spec {
            name: "render",
            about: "Draw ground truth or predictions over a scene",
            sections: vec![
                Section::new("run", &RenderRun::default(), true),
                paths(&["data", "predictions", "out"]),
            ],
            run: render,
        },
        Spec {
            name: "sweep",
            about: "Train and evaluate every combination of the given axes and seeds",
            sections: vec![
                Section::new("train", &TrainConfig::default(), true),
                Section::new("model", &ModelConfig::default(), false),
                Section::new("inference", &InferenceConfig::default(), false),
                Section::new("run", &SweepRun::default(), true),
                paths(&["data", "val_data", "out"]),
            ],
            run: sweep,
        },
    ]
}

fn required(rc: &RunConfig, key: &str) -> Result<PathBuf, CliError> {
    let v = rc.str(key);
    if v.is_empty() {
        let flag = key.rsplit('.').next().unwrap_or(key).replace('_', "-");
        return Err(CliError::Usage(format!(
            "`{}` needs --{flag}",
            rc.subcommand
        )));
    }
    Ok(PathBuf::from(v))
}

fn optional(rc: &RunConfig, key: &str) -> Option<PathBuf> {
    Some(rc.str(key))
        .filter(|s| !s.is_empty())
        .map(PathBuf::from)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn save_png(img: &image::RgbImage, path: &Path) -> Result<(), CliError> {
    img.save(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn gen_data(rc: &RunConfig) -> Result<(), CliError> {
    let cfg: DatasetConfig = rc.section("data")?;
    cfg.validate().map_err(CliError::Usage)?;
    let out = required(rc, "paths.out")?;
    let scenes = generate_dataset(&cfg);
    write_dataset(&cfg, &scenes, &out)?;
    rc.write_echo(&out)?;
    let pairs: usize = scenes.iter().map(|s| s.identical_pairs.len()).sum();
    println!(
        "wrote {} scenes ({} identical pairs) to {}",
        scenes.len(),
        pairs,
        out.display()
    );
    Ok(())
}

fn train_cmd(rc: &RunConfig) -> Result<(), CliError> {
    let data_dir = required(rc, "paths.data")?;
    let out = required(rc, "paths.out")?;
    let model_cfg: ModelConfig = rc.section("model")?;
    let tcfg: TrainConfig = rc.section("train")?;
    let run: TrainRun = rc.section("run")?;
    let (manifest, scenes) = read_dataset(&data_dir)?;
    rc.write_echo(&out)?;
    let outcome = if run.vanilla {
        train_vanilla_fcn_baseline(&model_cfg, &manifest.config, &scenes, &tcfg, Some(&out))?
    } else {
        train(&model_cfg, &manifest.config, &scenes, &tcfg, Some(&out))?
    };
    if let Some(last) = outcome.log.last() {
        println!(
            "iteration {}: total loss {:.4}",
            last.iteration, last.loss.total
        );
    }
    if let Some(ckpt) = outcome.checkpoint {
        println!("checkpoint: {}", ckpt.display());
    }
    Ok(())
}

/// Enables panoptic output when the model's semantic branch covers every dataset category.
fn inference_config(
    rc: &RunConfig,
    model: &Model,
    data: Option<&DatasetConfig>,
) -> Result<InferenceConfig, CliError> {
    let mut cfg: InferenceConfig = rc.section("inference")?;
    if !rc.is_explicit("inference.panoptic") {
        if let Some(d) = data {
            cfg.panoptic = model.config().semantic_classes == d.num_categories();
        }
    }
    Ok(cfg)
}

fn load_png_image(path: &Path) -> Result<FeatureMap, CliError> {
    let img = image::open(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * w * h + y as usize * w + x as usize] = p.0[c] as f64 / 255.0;
        }
    }
    FeatureMap::new(3, h, w, 1, data)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn infer(rc: &RunConfig) -> Result<(), CliError> {
    let ckpt = required(rc, "paths.checkpoint")?;
    let out = required(rc, "paths.out")?;
    let model = load_checkpoint(&ckpt)?;
    let run: InferRun = rc.section("run")?;
    let mut inputs: Vec<(String, FeatureMap)> = Vec::new();
    let cfg = if let Some(img) = optional(rc, "paths.image") {
        let name = img
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        inputs.push((name, load_png_image(&img)?));
        inference_config(rc, &model, None)?
    } else if let Some(data) = optional(rc, "paths.data") {
        let (manifest, scenes) = read_dataset(&data)?;
        for s in scenes {
            if run.scenes.is_empty() || run.scenes.contains(&s.index) {
                inputs.push((format!("scene_{}", s.index), s.image));
            }
        }
        if let Some(missing) = run
            .scenes
            .iter()
            .find(|&&i| !inputs.iter().any(|(n, _)| *n == format!("scene_{i}")))
        {
            return Err(CliError::Data(format!(
                "{}: no scene {missing}",
                data.display()
            )));
        }
        inference_config(rc, &model, Some(&manifest.config))?
    } else {
        return Err(CliError::Usage("`infer` needs --image or --data".into()));
    };
    rc.write_echo(&out)?;
    for (name, image) in &inputs {
        let o = run_inference(&model, image, &cfg)?;
        let path = write_inference(&out, name, &o)?;
        println!(
            "{name}: {} instances from {} candidates -> {}",
            o.instances.len(),
            o.candidates,
            path.display()
        );
    }
    Ok(())
}

fn eval_summary(e: &DatasetEval) -> Value {
    json!({
        "num_images": e.num_images,
        "ap": e.ap,
        "pq": e.pq,
        "pairs_total": e.pairs.len(),
        "pairs_distinguished": e.pairs_below(0.5),
        "pairs_merged": e.pairs_above(0.5),
        "pairs": e.pairs,
    })
}

fn eval(rc: &RunConfig) -> Result<(), CliError> {
    let ckpt = required(rc, "paths.checkpoint")?;
    let data = required(rc, "paths.data")?;
    let out = required(rc, "paths.out")?;
    let model = load_checkpoint(&ckpt)?;
    let (manifest, scenes) = read_dataset(&data)?;
    let cfg = inference_config(rc, &model, Some(&manifest.config))?;
    rc.write_echo(&out)?;
    let e = evaluate_model(&model, &scenes, &cfg)?;
    write_json(&out.join("metrics.json"), &eval_summary(&e))?;
    println!(
        "images {}  AP {:.4}  AP50 {:.4}  AP75 {:.4}",
        e.num_images, e.ap.ap, e.ap.ap50, e.ap.ap75
    );
    if let Some(pq) = &e.pq {
        println!(
            "PQ {:.4}  SQ {:.4}  RQ {:.4}  PQ_th {:.4}  PQ_st {:.4}",
            pq.pq, pq.sq, pq.rq, pq.pq_things, pq.pq_stuff
        );
    }
    if !e.pairs.is_empty() {
        println!(
            "identical pairs {}: {:.1}% with mutual IoU < 0.5",
            e.pairs.len(),
            100.0 * e.pairs_below(0.5)
        );
    }
    Ok(())
}

fn bench(rc: &RunConfig) -> Result<(), CliError> {
    let out = required(rc, "paths.out")?;
    let cfg: BenchConfig = rc.section("bench")?;
    let run: BenchRun = rc.section("run")?;
    let model = match optional(rc, "paths.checkpoint") {
        Some(p) => load_checkpoint(&p)?,
        None => Model::new(rc.section("model")?, 0)?,
    };
    let image = match optional(rc, "paths.data") {
        Some(d) => {
            read_dataset(&d)?
                .1
                .into_iter()
                .next()
                .ok_or_else(|| CliError::Data(format!("{}: no scenes", d.display())))?
                .image
        }
        None => generate_scene(&DatasetConfig::default(), 0).image,
    };
    rc.write_echo(&out)?;
    let report = bench_mask_head(&model, &image, &cfg)?;
    write_timings_csv(&report, &out.join("timings.csv"))?;
    write_json(&out.join("bench.json"), &report)?;
    if run.plot {
        save_png(&plot_timings(&report), &out.join("timings.png"))?;
    }
    let base = report.entries.first().map(|e| e.k);
    for e in &report.entries {
        let ratio = base.and_then(|b| report.ratio(e.k, b)).unwrap_or(f64::NAN);
        println!(
            "K={:<4} median {:.4} ms  p10 {:.4}  p90 {:.4}  ratio {:.2}",
            e.k, e.median_ms, e.p10_ms, e.p90_ms, ratio
        );
    }
    println!(
        "whole image at K={}: {:.3} ms, mask-head share {:.1}%",
        report.total_k,
        report.total_inference_ms,
        100.0 * report.mask_head_share
    );
    Ok(())
}

fn read_prediction_panoptic(dir: &Path, file: &InferenceFile) -> Result<PanopticMap, CliError> {
    let (Some(png), Some(seg)) = (&file.panoptic_png, &file.segments_json) else {
        return Err(CliError::Data(format!(
            "prediction `{}` has no panoptic output",
            file.image
        )));
    };
    let png = dir.join(png);
    let ids = image::open(&png)
        .map_err(|e| CliError::Data(format!("{}: {e}", png.display())))?
        .into_luma16();
    let seg = dir.join(seg);
    let text = std::fs::read_to_string(&seg)
        .map_err(|e| CliError::Data(format!("{}: {e}", seg.display())))?;
    let segments: Vec<Segment> = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", seg.display())))?;
    PanopticMap::new(
        ids.width() as usize,
        ids.height() as usize,
        ids.into_raw(),
        segments,
    )
    .map_err(|e| CliError::Data(format!("{}: {e}", png.display())))
}

fn gt_overlays(scene: &SceneAnnotation) -> Vec<Overlay> {
    scene
        .instances
        .iter()
        .map(|i| Overlay {
            mask: i.visible.clone(),
            label: Some(i.class_id().to_string()),
        })
        .collect()
}

fn render(rc: &RunConfig) -> Result<(), CliError> {
    let data = required(rc, "paths.data")?;
    let out = required(rc, "paths.out")?;
    let run: RenderRun = rc.section("run")?;
    if run.scale == 0 {
        return Err(CliError::Usage("--scale must be positive".into()));
    }
    let (_, scenes) = read_dataset(&data)?;
    let scene = scenes
        .into_iter()
        .find(|s| s.index == run.scene)
        .ok_or_else(|| CliError::Data(format!("{}: no scene {}", data.display(), run.scene)))?;
    let predictions = match optional(rc, "paths.predictions") {
        Some(p) => {
            let text = std::fs::read_to_string(&p)
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            let file: InferenceFile = serde_json::from_str(&text)
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            Some((p.parent().map(Path::to_path_buf).unwrap_or_default(), file))
        }
        None => None,
    };
    rc.write_echo(&out)?;
    let (img, kind) = if run.panoptic {
        let map = match &predictions {
            Some((dir, file)) => read_prediction_panoptic(dir, file)?,
            None => scene.panoptic.clone(),
        };
        (render_panoptic(&map, run.scale), "panoptic")
    } else {
        let overlays = match &predictions {
            Some((_, file)) => file
                .detections
                .iter()
                .map(|d| {
                    let mask =
                        rle_decode(&d.rle, file.width, file.height).map_err(CliError::Data)?;
                    Ok(Overlay {
                        mask,
                        label: Some(format!("{:.2}", d.score)),
                    })
                })
                .collect::<Result<Vec<_>, CliError>>()?,
            None => gt_overlays(&scene),
        };
        (
            render_instances(&scene.image, &overlays, run.scale),
            "instances",
        )
    };
    let source = if predictions.is_some() { "pred" } else { "gt" };
    let path = out.join(format!("scene_{}_{source}_{kind}.png", scene.index));
    save_png(&img, &path)?;
    println!("{}", path.display());
    Ok(())
}

fn sweep(rc: &RunConfig) -> Result<(), CliError> {
    let data = required(rc, "paths.data")?;
    let out = required(rc, "paths.out")?;
    let run: SweepRun = rc.section("run")?;
    let axes = run
        .axis
        .split(';')
        .map(str::trim)
        .filter(|a| !a.is_empty())
        .map(|a| a.parse::<SweepAxis>().map_err(CliError::Usage))
        .collect::<Result<Vec<_>, _>>()?;
    if axes.is_empty() {
        return Err(CliError::Usage(
            "`sweep` needs at least one --axis NAME=V1,V2".into(),
        ));
    }
    if run.seeds.is_empty() {
        return Err(CliError::Usage("--seeds is empty".into()));
    }
    let (manifest, scenes) = read_dataset(&data)?;
    let (train_scenes, val_scenes) = match optional(rc, "paths.val_data") {
        Some(v) => (scenes, read_dataset(&v)?.1),
        None => {
            if !(0.0..1.0).contains(&run.val_fraction) {
                return Err(CliError::Usage("--val-fraction must lie in [0, 1)".into()));
            }
            let n_val = ((scenes.len() as f64 * run.val_fraction).round() as usize)
                .max(1)
                .min(scenes.len() - 1);
            let mut train = scenes;
            let val = train.split_off(train.len() - n_val);
            (train, val)
        }
    };
    rc.write_echo(&out)?;
    let setup = SweepSetup {
        model: rc.section("model")?,
        train: rc.section("train")?,
        inference: rc.section("inference")?,
        data: manifest.config,
        train_scenes: &train_scenes,
        val_scenes: &val_scenes,
        seeds: run.seeds,
    };
    let result = run_sweep(&setup, &axes)?;
    let csv = out.join("sweep.csv");
    write_sweep_csv(&result.rows, &csv)?;
    for r in &result.rows {
        println!(
            "{:<32} seed {:<3} AP {:.4}  AP50 {:.4}  pairs<0.5 {:.3}",
            r.config, r.seed, r.ap, r.ap50, r.pairs_distinguished
        );
    }
    println!("{}", csv.display());
    Ok(())
}
