//! Run configuration: a flat `section.key = value` map merged from defaults,
//! an optional config file and command-line flags.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// One accepted key with its flag, default and provenance note.
#[derive(Debug, Clone)]
pub struct KeySpec {
    pub key: String,
    pub flag: String,
    pub default: Value,
    pub note: String,
}

/// A named group of keys backed by one serializable default.
#[derive(Debug, Clone)]
pub struct Section {
    pub name: &'static str,
    pub default: Value,
    /// Flags drop the section prefix.
    pub bare_flags: bool,
}

impl Section {
    pub fn new<T: Serialize>(name: &'static str, default: &T, bare_flags: bool) -> Self {
        Self {
            name,
            default: serde_json::to_value(default).expect("defaults serialize"),
            bare_flags,
        }
    }
}

/// Keys whose default is the published setting rather than a desk-scale choice.
const REFERENCE_DEFAULTS: &[(&str, &str)] = &[
    ("model.c_bottom", "reference default"),
    ("model.mask_head_depth", "reference default"),
    ("model.mask_head_width", "reference default"),
    ("model.upsample_factor", "reference default"),
    ("model.coord_mode", "reference default"),
    ("model.bottom_level", "toy default (reference: P3)"),
    ("model.tower_depth", "toy default (reference: 4)"),
    ("model.fpn_channels", "toy default (reference: 256)"),
    ("model.head_channels", "toy default (reference: 256)"),
    ("train.base_lr", "toy default (reference: 0.01)"),
    ("train.iterations", "toy default (reference: 90000)"),
    ("train.batch_size", "toy default (reference: 16)"),
    ("train.milestones", "toy default (reference: 60000,80000)"),
    ("train.momentum", "reference default"),
    ("train.weight_decay", "reference default"),
    ("train.lr_drop", "reference default"),
    ("train.loss.lambda", "reference default"),
    (
        "train.loss.focal_alpha",
        "reference default (detector convention)",
    ),
    (
        "train.loss.focal_gamma",
        "reference default (detector convention)",
    ),
    (
        "train.targets.center_radius",
        "reference default (detector convention)",
    ),
    ("train.targets.positive_cap", "reference default"),
    ("inference.score_threshold", "detector convention"),
    ("inference.pre_nms_top_k", "detector convention"),
    ("inference.box_iou", "reference default"),
    ("inference.max_detections", "reference default"),
    ("inference.merge.score_min", "reference default"),
    ("inference.merge.overlap_discard", "reference default"),
];

/// Extra flag spellings.
const ALIASES: &[(&str, &str)] = &[("data.rng_seed", "seed")];

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                flatten(&format!("{prefix}.{k}"), v, out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

pub fn schema(sections: &[Section]) -> Vec<KeySpec> {
    let mut keys = Vec::new();
    for s in sections {
        let mut flat = Vec::new();
        flatten(s.name, &s.default, &mut flat);
        for (key, default) in flat {
            let local = if s.bare_flags {
                &key[s.name.len() + 1..]
            } else {
                key.as_str()
            };
            let flag = local.replace(['.', '_'], "-");
            let note = REFERENCE_DEFAULTS
                .iter()
                .find(|(k, _)| *k == key)
                .map_or_else(
                    || match s.name {
                        "paths" => "path".to_string(),
                        "run" => "run option".to_string(),
                        "train" | "inference" => "implementation default".to_string(),
                        _ => "toy default".to_string(),
                    },
                    |(_, n)| n.to_string(),
                );
            keys.push(KeySpec {
                key,
                flag,
                default,
                note,
            });
        }
    }
    keys
}

pub fn aliases(key: &str) -> Vec<&'static str> {
    ALIASES
        .iter()
        .filter(|(k, _)| *k == key)
        .map(|(_, a)| *a)
        .collect()
}

/// Renders a JSON default the way it is typed on the command line.
pub fn display_value(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        Value::Array(a) => a.iter().map(display_value).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

/// Parses `raw` with the type of `default`.
pub fn parse_value(key: &str, raw: &str, default: &Value) -> Result<Value, CliError> {
    let bad = |what: &str| CliError::Usage(format!("{key}: `{raw}` is not {what}"));
    let raw = raw.trim();
    if matches!(raw, "none" | "null") && !matches!(default, Value::String(_) | Value::Array(_)) {
        return Ok(Value::Null);
    }
    Ok(match default {
        Value::Bool(_) => match raw {
            "true" | "1" | "yes" => Value::Bool(true),
            "false" | "0" | "no" => Value::Bool(false),
            _ => return Err(bad("a boolean")),
        },
        Value::Number(n) if n.is_u64() || n.is_i64() => {
            Value::from(raw.parse::<i64>().map_err(|_| bad("an integer"))?)
        }
        Value::Number(_) => {
            let x: f64 = raw.parse().map_err(|_| bad("a number"))?;
            serde_json::Number::from_f64(x)
                .map(Value::Number)
                .ok_or_else(|| bad("a finite number"))?
        }
        Value::String(_) => Value::String(raw.to_string()),
        Value::Array(items) => {
            let elem = items.first().cloned().unwrap_or(Value::Null);
            let parts: Vec<&str> = raw
                .split(',')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .collect();
            Value::Array(
                parts
                    .iter()
                    .map(|p| parse_value(key, p, &elem))
                    .collect::<Result<_, _>>()?,
            )
        }
        Value::Null => serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string())),
        Value::Object(_) => return Err(bad("a scalar")),
    })
}

/// Reads a TOML file (nested tables become dotted keys) or the JSON echo
/// written by a previous run.
pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(&text) {
        let values = obj
            .get("values")
            .and_then(Value::as_object)
            .ok_or_else(|| {
                CliError::Usage(format!(
                    "{}: JSON config needs a `values` object",
                    path.display()
                ))
            })?;
        return Ok(values
            .iter()
            .map(|(k, v)| (k.clone(), display_value(v)))
            .collect());
    }
    let table: toml::Table =
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let json = serde_json::to_value(table)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut flat = Vec::new();
    if let Value::Object(m) = json {
        for (k, v) in &m {
            flatten(k, v, &mut flat);
        }
    }
    Ok(flat
        .into_iter()
        .map(|(k, v)| (k, display_value(&v)))
        .collect())
}

/// Merged, validated values for one subcommand.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub subcommand: String,
    pub values: BTreeMap<String, Value>,
    /// Keys set by the file or a flag rather than defaulted.
    pub explicit: Vec<String>,
}

impl RunConfig {
    pub fn build(
        subcommand: &str,
        schema: &[KeySpec],
        file: &[(String, String)],
        flags: &[(String, String)],
    ) -> Result<Self, CliError> {
        let mut values: BTreeMap<String, Value> = schema
            .iter()
            .map(|k| (k.key.clone(), k.default.clone()))
            .collect();
        let mut explicit = Vec::new();
        for (key, raw) in file.iter().chain(flags) {
            let spec = schema.iter().find(|k| &k.key == key).ok_or_else(|| {
                CliError::Usage(format!(
                    "unknown key `{key}` for `{subcommand}`; see `condinst {subcommand} --help`"
                ))
            })?;
            values.insert(key.clone(), parse_value(key, raw, &spec.default)?);
            if !explicit.contains(key) {
                explicit.push(key.clone());
            }
        }
        Ok(Self {
            subcommand: subcommand.into(),
            values,
            explicit,
        })
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.iter().any(|k| k == key)
    }

    /// Rebuilds the nested object of `section` and deserializes it.
    pub fn section<T: DeserializeOwned>(&self, section: &str) -> Result<T, CliError> {
        let mut root = Map::new();
        let prefix = format!("{section}.");
        for (key, v) in &self.values {
            let Some(rest) = key.strip_prefix(&prefix) else {
                continue;
            };
            let parts: Vec<&str> = rest.split('.').collect();
            let mut node = &mut root;
            for p in &parts[..parts.len() - 1] {
                node = node
                    .entry(p.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("nested sections are objects");
            }
            node.insert(parts[parts.len() - 1].to_string(), v.clone());
        }
        serde_json::from_value(Value::Object(root))
            .map_err(|e| CliError::Usage(format!("{section}: {e}")))
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).and_then(Value::as_str).unwrap_or("")
    }

    pub fn bool(&self, key: &str) -> bool {
        self.values
            .get(key)
            .and_then(Value::as_bool)
            .unwrap_or(false)
    }

    /// Writes `run_config.json` into `dir`.
    pub fn write_echo(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        let echo = serde_json::json!({
            "subcommand": self.subcommand,
            "values": self.values,
            "format": "flat section.key map; pass this file back with --config to repeat the run",
        });
        let path = dir.join("run_config.json");
        std::fs::write(
            &path,
            serde_json::to_string_pretty(&echo).expect("echo serializes"),
        )
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}
