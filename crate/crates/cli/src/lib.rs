//! Command-line driver for data generation, training, inference, evaluation,
//! benchmarking, rendering and ablation sweeps.

pub mod config;
pub mod render;

mod commands;

use std::ffi::OsString;

use clap::{Arg, ArgAction, Command};
use condinst::evalbench::EvalError;
use condinst::inference::InferenceError;
use condinst::model::{CheckpointError, ModelError};
use condinst::synthdata::DatasetError;
use condinst::training::{SweepError, TrainError};

use config::{aliases, display_value, read_config_file, schema, KeySpec, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } | TrainError::Loss { .. } => {
                CliError::Numeric(e.to_string())
            }
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::Model(m) => m.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SweepError> for CliError {
    fn from(e: SweepError) -> Self {
        match e {
            SweepError::Train(t) => t.into(),
            SweepError::Eval(v) => v.into(),
        }
    }
}

/// Key that takes repeated `--axis` flags, joined with `;`.
const AXIS_KEY: &str = "run.axis";

fn build_command() -> Command {
    let mut root = Command::new("condinst")
        .about("Dynamic-filter instance and panoptic segmentation on synthetic scenes")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .after_help(
            "Exit codes: 0 success, 1 usage or config error, 2 data or I/O error, 3 numerical failure.\n\
             CONDINST_THREADS sets the worker thread count; RUST_LOG sets the log level.",
        );
    for spec in commands::specs() {
        let mut cmd = Command::new(spec.name).about(spec.about).arg(
            Arg::new("config").long("config").value_name("FILE").help(
                "TOML file of section.key values, or a run_config.json echo; flags override it",
            ),
        );
        for k in schema(&spec.sections) {
            cmd = cmd.arg(flag_arg(&k));
        }
        root = root.subcommand(cmd);
    }
    root
}

fn flag_arg(k: &KeySpec) -> Arg {
    let mut arg = Arg::new(k.key.clone())
        .long(k.flag.clone())
        .value_name("V")
        .help(format!(
            "[default: {}] {}",
            display_value(&k.default),
            k.note
        ));
    if k.key == AXIS_KEY {
        arg = arg.action(ArgAction::Append).value_name("NAME=V1,V2");
    }
    for a in aliases(&k.key) {
        arg = arg.visible_alias(a);
    }
    arg
}

/// Parses `args` (program name first), runs the subcommand and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match build_command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    EXIT_OK
                }
                _ => EXIT_USAGE,
            };
        }
    };
    let Some((name, sub)) = matches.subcommand() else {
        return EXIT_USAGE;
    };
    let result = (|| {
        let spec = commands::specs()
            .into_iter()
            .find(|s| s.name == name)
            .expect("registered subcommand");
        let keys = schema(&spec.sections);
        let file = match sub.get_one::<String>("config") {
            Some(p) => read_config_file(std::path::Path::new(p))?,
            None => Vec::new(),
        };
        let mut flags = Vec::new();
        for k in &keys {
            if let Some(vals) = sub.get_many::<String>(&k.key) {
                let vals: Vec<&str> = vals.map(String::as_str).collect();
                flags.push((k.key.clone(), vals.join(";")));
            }
        }
        let rc = RunConfig::build(name, &keys, &file, &flags)?;
        configure_threads()?;
        (spec.run)(&rc)
    })();
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("CONDINST_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Usage(format!(
            "CONDINST_THREADS=`{raw}` is not a positive integer"
        ))
    })?;
    // A pool built earlier in the same process keeps its size.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}
