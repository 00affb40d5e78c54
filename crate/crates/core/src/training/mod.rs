//! SGD training loop, checkpoints and the static-head control.

mod sweep;

use std::borrow::Cow;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::losses::{
    downsample_labels, scene_loss, LossBreakdown, LossError, LossWeights, SemanticKind,
    SemanticTarget,
};
use crate::model::{
    save_checkpoint, CheckpointError, CoordMode, MaskHeadKind, Model, ModelConfig, ModelError,
};
use crate::synthdata::{DatasetConfig, SceneAnnotation};
use crate::targets::{gt_instances, TargetConfig};

pub use sweep::{
    run_sweep, write_sweep_csv, SweepAxis, SweepError, SweepResult, SweepRow, SweepSetup,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("iteration {iteration}: {source}")]
    Loss {
        iteration: usize,
        #[source]
        source: LossError,
    },
    #[error(
        "iteration {iteration}: {component} is not finite (last good weights: {checkpoint:?})"
    )]
    NonFinite {
        iteration: usize,
        component: String,
        checkpoint: Option<PathBuf>,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskMode {
    Instance,
    Panoptic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Iterations after which the learning rate is multiplied by `lr_drop`.
    pub milestones: Vec<usize>,
    pub lr_drop: f64,
    /// Linear ramp from `warmup_factor * base_lr` over the first iterations.
    pub warmup_iters: usize,
    pub warmup_factor: f64,
    /// Global gradient-norm cap.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub task: TaskMode,
    pub flip: bool,
    pub aux_semantic: bool,
    pub targets: TargetConfig,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 8,
            base_lr: 0.03,
            momentum: 0.9,
            weight_decay: 1e-4,
            milestones: vec![1500],
            lr_drop: 0.1,
            warmup_iters: 100,
            warmup_factor: 1.0 / 3.0,
            grad_clip: Some(10.0),
            seed: 0,
            task: TaskMode::Instance,
            flip: true,
            aux_semantic: false,
            targets: TargetConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.base_lr > 0.0)
            || !(self.momentum >= 0.0 && self.momentum < 1.0)
            || !(self.weight_decay >= 0.0)
        {
            return bad(
                "learning rate must be positive, momentum in [0, 1), weight decay non-negative",
            );
        }
        if self
            .milestones
            .iter()
            .any(|&m| m == 0 || (self.iterations > 0 && m >= self.iterations))
        {
            return bad("milestones must lie strictly between 0 and iterations");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        if self.task == TaskMode::Panoptic && self.aux_semantic {
            return bad("aux_semantic applies to the instance task only");
        }
        Ok(())
    }

    /// Learning rate used at 0-based iteration `it`.
    pub fn lr_at(&self, it: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| it >= m).count();
        let mut lr = self.base_lr * self.lr_drop.powi(drops as i32);
        if it < self.warmup_iters {
            let a = it as f64 / self.warmup_iters as f64;
            lr *= self.warmup_factor * (1.0 - a) + a;
        }
        lr
    }

    /// `base` with class counts and the semantic branch matching the dataset and task.
    pub fn model_config(&self, base: &ModelConfig, data: &DatasetConfig) -> ModelConfig {
        let semantic_classes = match (self.task, self.aux_semantic) {
            (TaskMode::Panoptic, _) => data.num_categories(),
            (TaskMode::Instance, true) => data.num_thing_classes + 1,
            (TaskMode::Instance, false) => 0,
        };
        ModelConfig {
            num_classes: data.num_thing_classes,
            semantic_classes,
            ..base.clone()
        }
    }
}

/// Momentum SGD with decoupled-from-bias weight decay: `v = m v + g + wd p`, `p -= lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    velocity: Vec<f64>,
    decay: Vec<bool>,
}

impl Sgd {
    pub fn new(model: &Model) -> Self {
        let decay = model.params().decay_mask();
        Self {
            velocity: vec![0.0; decay.len()],
            decay,
        }
    }

    pub fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) {
        for i in 0..params.len() {
            let wd = if self.decay[i] {
                weight_decay * params[i]
            } else {
                0.0
            };
            self.velocity[i] = momentum * self.velocity[i] + grads[i] + wd;
            params[i] -= lr * self.velocity[i];
        }
    }
}

/// Scales `grads` in place so that its norm is at most `max_norm`; returns the norm before.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    /// 1-based.
    pub iteration: usize,
    pub lr: f64,
    /// Batch mean.
    pub loss: LossBreakdown,
}

pub const LOSS_LOG_HEADER: &str =
    "iteration,lr,l_cls,l_box,l_ctr,l_mask,l_pano,l_aux_sem,total,num_pos";

fn log_line(r: &LogRow) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.9}"));
    let l = &r.loss;
    format!(
        "{},{:.9},{:.9},{:.9},{:.9},{:.9},{},{},{:.9},{}",
        r.iteration,
        r.lr,
        l.l_cls,
        l.l_box,
        l.l_ctr,
        l.l_mask,
        opt(l.l_pano),
        opt(l.l_aux_sem),
        l.total,
        l.num_pos
    )
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogRow>,
    /// Final checkpoint directory when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

/// Semantic supervision for one scene at the semantic branch's stride.
fn semantic_target(
    scene: &SceneAnnotation,
    cfg: &TrainConfig,
    model: &Model,
) -> Option<SemanticTarget> {
    let mcfg = model.config();
    if mcfg.semantic_classes == 0 {
        return None;
    }
    let c = mcfg.num_classes;
    let (w, h) = (scene.width(), scene.height());
    let (kind, full) = match cfg.task {
        TaskMode::Panoptic => (
            SemanticKind::Panoptic,
            scene
                .semantic_labels(c)
                .iter()
                .map(|&l| l - 1)
                .collect::<Vec<_>>(),
        ),
        TaskMode::Instance => {
            let mut labels = vec![0u32; w * h];
            for inst in &scene.instances {
                for (x, y) in inst.visible.foreground() {
                    labels[y * w + x] = inst.class_id();
                }
            }
            (SemanticKind::Auxiliary, labels)
        }
    };
    let stride = crate::model::Level::P2.stride();
    Some(SemanticTarget {
        kind,
        labels: downsample_labels(&full, w, h, stride),
    })
}

/// First non-finite component of a batch breakdown.
fn non_finite_component(b: &LossBreakdown) -> Option<&'static str> {
    [
        ("l_cls", Some(b.l_cls)),
        ("l_box", Some(b.l_box)),
        ("l_ctr", Some(b.l_ctr)),
        ("l_mask", Some(b.l_mask)),
        ("l_pano", b.l_pano),
        ("l_aux_sem", b.l_aux_sem),
        ("total", Some(b.total)),
    ]
    .into_iter()
    .find(|(_, v)| v.is_some_and(|v| !v.is_finite()))
    .map(|(n, _)| n)
}

/// Trains `model` in place on `scenes`. With `out`, writes `loss_log.csv`,
/// a checkpoint after every milestone and a final `checkpoint/`.
pub fn train_model(
    mut model: Model,
    scenes: &[SceneAnnotation],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if scenes.is_empty() && cfg.iterations > 0 {
        return Err(TrainError::Config("no training scenes".into()));
    }
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| TrainError::Io { path, source }
    };
    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join("loss_log.csv");
            let mut f = BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?);
            writeln!(f, "{LOSS_LOG_HEADER}").map_err(io_err(&path))?;
            Some((f, path))
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut cursor = order.len();
    let mut sgd = Sgd::new(&model);
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut last_good = model.params().flat().to_vec();

    for it in 0..cfg.iterations {
        let batch: Vec<(usize, bool)> = (0..cfg.batch_size)
            .map(|_| {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                cursor += 1;
                (order[cursor - 1], cfg.flip && rng.random_bool(0.5))
            })
            .collect();
        let model_ref = &model;
        let results: Vec<Result<_, LossError>> = batch
            .par_iter()
            .map(|&(idx, flip)| {
                let scene = if flip {
                    Cow::Owned(scenes[idx].flip_horizontal())
                } else {
                    Cow::Borrowed(&scenes[idx])
                };
                let sem = semantic_target(&scene, cfg, model_ref);
                let r = scene_loss(
                    model_ref,
                    &scene.image,
                    &gt_instances(&scene),
                    sem.as_ref(),
                    &cfg.targets,
                    &cfg.loss,
                )?;
                Ok((r.breakdown, r.grads))
            })
            .collect();

        let mut total = LossBreakdown::default();
        let mut grads = vec![0.0; last_good.len()];
        let mut failure = None;
        for r in results {
            match r {
                Ok((b, g)) => {
                    total.accumulate(&b);
                    grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                Err(LossError::NonFinite(name)) => {
                    failure.get_or_insert(name);
                }
                Err(source) => {
                    return Err(TrainError::Loss {
                        iteration: it + 1,
                        source,
                    })
                }
            }
        }
        let inv = 1.0 / cfg.batch_size as f64;
        let mean = total.scaled(inv);
        let component = failure
            .or_else(|| non_finite_component(&mean))
            .or_else(|| (!grads.iter().all(|g| g.is_finite())).then_some("gradient"));
        if let Some(component) = component {
            let checkpoint = match out {
                Some(dir) => {
                    model.set_flat(&last_good)?;
                    let path = dir.join("checkpoint_last_good");
                    save_checkpoint(&model, &path)?;
                    Some(path)
                }
                None => None,
            };
            if let Some((f, path)) = log_file.as_mut() {
                f.flush().map_err(io_err(path))?;
            }
            return Err(TrainError::NonFinite {
                iteration: it + 1,
                component: component.into(),
                checkpoint,
            });
        }
        grads.iter_mut().for_each(|g| *g *= inv);
        if let Some(c) = cfg.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        last_good.copy_from_slice(model.params().flat());
        let lr = cfg.lr_at(it);
        sgd.step(
            model.params_mut().flat_mut(),
            &grads,
            lr,
            cfg.momentum,
            cfg.weight_decay,
        );

        let row = LogRow {
            iteration: it + 1,
            lr,
            loss: mean,
        };
        if let Some((f, path)) = log_file.as_mut() {
            writeln!(f, "{}", log_line(&row)).map_err(io_err(path))?;
        }
        if (it + 1) % 100 == 0 {
            log::info!(
                "iter {} lr {:.5} loss {:.4} (mask {:.4})",
                it + 1,
                lr,
                mean.total,
                mean.l_mask
            );
        }
        log.push(row);
        if let Some(dir) = out {
            if cfg.milestones.contains(&(it + 1)) {
                save_checkpoint(&model, &dir.join(format!("checkpoint_iter{}", it + 1)))?;
            }
        }
    }

    let checkpoint = match out {
        Some(dir) => {
            if let Some((f, path)) = log_file.as_mut() {
                f.flush().map_err(io_err(path))?;
            }
            let path = dir.join("checkpoint");
            save_checkpoint(&model, &path)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome {
        model,
        log,
        checkpoint,
    })
}

/// Builds a model for the dataset and task, seeded with `cfg.seed`, and trains it.
pub fn train(
    model_cfg: &ModelConfig,
    data: &DatasetConfig,
    scenes: &[SceneAnnotation],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    let model = Model::new(cfg.model_config(model_cfg, data), cfg.seed)?;
    train_model(model, scenes, cfg, out)
}

/// Model config of the control arm: one learned mask head shared by every
/// instance, without coordinate channels.
pub fn vanilla_fcn_config(model_cfg: &ModelConfig) -> ModelConfig {
    ModelConfig {
        mask_head_kind: MaskHeadKind::Static,
        coord_mode: CoordMode::None,
        ..model_cfg.clone()
    }
}

pub fn train_vanilla_fcn_baseline(
    model_cfg: &ModelConfig,
    data: &DatasetConfig,
    scenes: &[SceneAnnotation],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    train(&vanilla_fcn_config(model_cfg), data, scenes, cfg, out)
}
