//! Ablation sweeps: train one model per configuration and seed, then evaluate.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::evalbench::{evaluate_model, DatasetEval, EvalError};
use crate::inference::{InferenceConfig, NmsMode};
use crate::model::{CoordMode, MaskHeadKind, ModelConfig};
use crate::synthdata::{DatasetConfig, SceneAnnotation};

use super::{train, TrainConfig, TrainError};

/// One swept setting and its values, e.g. `depth=1,2,3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SweepAxis {
    Depth(Vec<usize>),
    UpsampleFactor(Vec<usize>),
    Coords(Vec<CoordMode>),
    Nms(Vec<NmsMode>),
    Head(Vec<MaskHeadKind>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Depth(_) => "depth",
            SweepAxis::UpsampleFactor(_) => "upsample_factor",
            SweepAxis::Coords(_) => "coords",
            SweepAxis::Nms(_) => "nms",
            SweepAxis::Head(_) => "head",
        }
    }

    fn len(&self) -> usize {
        match self {
            SweepAxis::Depth(v) | SweepAxis::UpsampleFactor(v) => v.len(),
            SweepAxis::Coords(v) => v.len(),
            SweepAxis::Nms(v) => v.len(),
            SweepAxis::Head(v) => v.len(),
        }
    }

    /// Applies value `i` and returns its label.
    fn apply(&self, i: usize, model: &mut ModelConfig, inference: &mut InferenceConfig) -> String {
        let value = match self {
            SweepAxis::Depth(v) => {
                model.mask_head_depth = v[i];
                v[i].to_string()
            }
            SweepAxis::UpsampleFactor(v) => {
                model.upsample_factor = v[i];
                v[i].to_string()
            }
            SweepAxis::Coords(v) => {
                model.coord_mode = v[i];
                serde_json::to_value(v[i])
                    .expect("enum serializes")
                    .as_str()
                    .unwrap_or_default()
                    .to_string()
            }
            SweepAxis::Nms(v) => {
                inference.nms_mode = v[i];
                serde_json::to_value(v[i])
                    .expect("enum serializes")
                    .as_str()
                    .unwrap_or_default()
                    .to_string()
            }
            SweepAxis::Head(v) => {
                model.mask_head_kind = v[i];
                if v[i] == MaskHeadKind::Static {
                    model.coord_mode = CoordMode::None;
                }
                format!("{:?}", v[i]).to_lowercase()
            }
        };
        format!("{}={}", self.name(), value)
    }

    fn affects_training(&self) -> bool {
        !matches!(self, SweepAxis::Nms(_))
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, values) = s
            .split_once('=')
            .ok_or_else(|| format!("axis `{s}` is not name=v1,v2"))?;
        let items: Vec<&str> = values
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .collect();
        if items.is_empty() {
            return Err(format!("axis `{name}` has no values"));
        }
        let nums = || {
            items
                .iter()
                .map(|v| {
                    v.parse::<usize>()
                        .map_err(|e| format!("{name}: `{v}`: {e}"))
                })
                .collect::<Result<Vec<_>, _>>()
        };
        let parse_enum = |v: &&str| -> Result<serde_json::Value, String> {
            Ok(serde_json::Value::String(v.to_string()))
        };
        match name.trim() {
            "depth" => Ok(SweepAxis::Depth(nums()?)),
            "upsample_factor" | "factor" => Ok(SweepAxis::UpsampleFactor(nums()?)),
            "coords" => items
                .iter()
                .map(|v| {
                    serde_json::from_value(parse_enum(v)?)
                        .map_err(|_| format!("coords: unknown mode `{v}`"))
                })
                .collect::<Result<_, _>>()
                .map(SweepAxis::Coords),
            "nms" => items
                .iter()
                .map(|v| {
                    serde_json::from_value(parse_enum(v)?)
                        .map_err(|_| format!("nms: unknown mode `{v}`"))
                })
                .collect::<Result<_, _>>()
                .map(SweepAxis::Nms),
            "head" => items
                .iter()
                .map(|v| match *v {
                    "dynamic" => Ok(MaskHeadKind::Dynamic),
                    "static" => Ok(MaskHeadKind::Static),
                    _ => Err(format!("head: unknown kind `{v}`")),
                })
                .collect::<Result<_, _>>()
                .map(SweepAxis::Head),
            other => Err(format!(
                "unknown sweep axis `{other}` (depth, upsample_factor, coords, nms, head)"
            )),
        }
    }
}

/// Everything shared by the runs of a sweep.
#[derive(Debug, Clone)]
pub struct SweepSetup<'a> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub data: DatasetConfig,
    pub train_scenes: &'a [SceneAnnotation],
    pub val_scenes: &'a [SceneAnnotation],
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Space-separated `axis=value` labels.
    pub config: String,
    pub seed: u64,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Share of identical-appearance pairs with mutual mask IoU below 0.5.
    pub pairs_distinguished: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub evals: Vec<DatasetEval>,
}

#[derive(Debug, thiserror::Error)]
pub enum SweepError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Trains every combination of the training axes for every seed and
/// evaluates each trained model under every combination of the inference axes.
pub fn run_sweep(setup: &SweepSetup<'_>, axes: &[SweepAxis]) -> Result<SweepResult, SweepError> {
    let (train_axes, eval_axes): (Vec<&SweepAxis>, Vec<&SweepAxis>) =
        axes.iter().partition(|a| a.affects_training());
    let combos = |axes: &[&SweepAxis]| -> Vec<Vec<usize>> {
        axes.iter().fold(vec![vec![]], |acc, a| {
            acc.into_iter()
                .flat_map(|c| (0..a.len()).map(move |i| [c.clone(), vec![i]].concat()))
                .collect()
        })
    };
    let mut rows = Vec::new();
    let mut evals = Vec::new();
    for tc in combos(&train_axes) {
        let mut model_cfg = setup.model.clone();
        let mut scratch = setup.inference.clone();
        let train_labels: Vec<String> = train_axes
            .iter()
            .zip(&tc)
            .map(|(a, &i)| a.apply(i, &mut model_cfg, &mut scratch))
            .collect();
        for &seed in &setup.seeds {
            let tcfg = TrainConfig {
                seed,
                ..setup.train.clone()
            };
            log::info!("sweep: training {} seed {seed}", train_labels.join(" "));
            let outcome = train(&model_cfg, &setup.data, setup.train_scenes, &tcfg, None)?;
            let final_loss = outcome.log.last().map_or(f64::NAN, |r| r.loss.total);
            for ec in combos(&eval_axes) {
                let mut inf = setup.inference.clone();
                let mut unused = model_cfg.clone();
                let mut labels = train_labels.clone();
                labels.extend(
                    eval_axes
                        .iter()
                        .zip(&ec)
                        .map(|(a, &i)| a.apply(i, &mut unused, &mut inf)),
                );
                let eval = evaluate_model(&outcome.model, setup.val_scenes, &inf)?;
                rows.push(SweepRow {
                    config: labels.join(" "),
                    seed,
                    ap: eval.ap.ap,
                    ap50: eval.ap.ap50,
                    ap75: eval.ap.ap75,
                    pairs_distinguished: eval.pairs_below(0.5),
                    final_loss,
                });
                evals.push(eval);
            }
        }
    }
    Ok(SweepResult { rows, evals })
}

/// Median of `values`; NaN when empty.
pub(crate) fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Writes one row per run, then a median-over-seeds summary to `<stem>_summary.csv`.
pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<(), TrainError> {
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| TrainError::Io { path: p, source }
    };
    let mut f = std::fs::File::create(path).map_err(io(path))?;
    writeln!(f, "config,seed,AP,AP50,AP75,pairs_distinguished,final_loss").map_err(io(path))?;
    for r in rows {
        writeln!(
            f,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.config, r.seed, r.ap, r.ap50, r.ap75, r.pairs_distinguished, r.final_loss
        )
        .map_err(io(path))?;
    }
    let summary = path.with_file_name(format!(
        "{}_summary.csv",
        path.file_stem().and_then(|s| s.to_str()).unwrap_or("sweep")
    ));
    let mut f = std::fs::File::create(&summary).map_err(io(&summary))?;
    writeln!(
        f,
        "config,seeds,median_AP,median_AP50,median_AP75,median_pairs_distinguished"
    )
    .map_err(io(&summary))?;
    let mut configs: Vec<&str> = Vec::new();
    for r in rows {
        if !configs.contains(&r.config.as_str()) {
            configs.push(&r.config);
        }
    }
    for c in configs {
        let sel: Vec<&SweepRow> = rows.iter().filter(|r| r.config == c).collect();
        let m = |f: fn(&SweepRow) -> f64| median(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
        writeln!(
            f,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            c,
            sel.len(),
            m(|r| r.ap),
            m(|r| r.ap50),
            m(|r| r.ap75),
            m(|r| r.pairs_distinguished)
        )
        .map_err(io(&summary))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate_dataset;

    #[test]
    fn parses_axes() {
        assert_eq!(
            "depth=1,2,3".parse::<SweepAxis>().unwrap(),
            SweepAxis::Depth(vec![1, 2, 3])
        );
        assert_eq!(
            "coords=none,absolute,relative"
                .parse::<SweepAxis>()
                .unwrap(),
            SweepAxis::Coords(vec![
                CoordMode::None,
                CoordMode::Absolute,
                CoordMode::Relative
            ])
        );
        assert_eq!(
            "nms=box,mask".parse::<SweepAxis>().unwrap(),
            SweepAxis::Nms(vec![NmsMode::Box, NmsMode::Mask])
        );
        assert!("depth=".parse::<SweepAxis>().is_err());
        assert!("width=3".parse::<SweepAxis>().is_err());
        assert!("coords=polar".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn one_row_per_config_and_seed() {
        let data = DatasetConfig {
            num_scenes: 4,
            ..DatasetConfig::default()
        };
        let scenes = generate_dataset(&data);
        let setup = SweepSetup {
            model: ModelConfig::default(),
            train: TrainConfig {
                iterations: 1,
                batch_size: 1,
                milestones: vec![],
                ..TrainConfig::default()
            },
            inference: InferenceConfig::default(),
            data,
            train_scenes: &scenes,
            val_scenes: &scenes[..2],
            seeds: vec![0, 1],
        };
        let axes = [
            "depth=1,2".parse().unwrap(),
            "nms=box,mask".parse().unwrap(),
        ];
        let r = run_sweep(&setup, &axes).unwrap();
        assert_eq!(r.rows.len(), 8);
        assert_eq!(r.rows[0].config, "depth=1 nms=box");
        assert_eq!(r.rows[1].config, "depth=1 nms=mask");
        let dir = tempfile::tempdir().unwrap();
        write_sweep_csv(&r.rows, &dir.path().join("sweep.csv")).unwrap();
        assert_eq!(
            std::fs::read_to_string(dir.path().join("sweep.csv"))
                .unwrap()
                .lines()
                .count(),
            9
        );
        assert_eq!(
            std::fs::read_to_string(dir.path().join("sweep_summary.csv"))
                .unwrap()
                .lines()
                .count(),
            5
        );
    }
}
