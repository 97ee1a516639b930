//! Command-line front end: `thsg gen-data|train|eval|project`.
//!
//! Exit codes: 0 success, 1 internal error, 2 config or usage error,
//! 3 data error or model/data mismatch, 4 non-finite loss during training.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::checkpoint;
use crate::config::TrainConfig;
use crate::dataset::{
    generate_gaussian_mixture, load_features, split_by_class, write_features, DataFormat, FeatureDataset,
};
use crate::error::Error;
use crate::networks::ModelBundle;
use crate::projection::{pca_2d, write_projection_csv};
use crate::trainer::{embed_dataset, evaluate_bundle, train, usable_ks};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NON_FINITE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "thsg", version, about = "Triplet metric learning with two-stage hard-sample generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Binary,
}

impl From<FormatArg> for DataFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => DataFormat::Csv,
            FormatArg::Binary => DataFormat::Binary,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitPart {
    All,
    Train,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic Gaussian-mixture dataset.
    GenData {
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 1.0)]
        center_scale: f64,
        #[arg(long, default_value_t = 0.3)]
        noise_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to csv for a `.csv` path, binary otherwise.
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
    },
    /// Train on the training classes and report metrics on the held-out ones.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `seed` from the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides any config key, e.g. `--set epochs=5`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print retrieval and clustering metrics for a checkpoint.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 4, 8])]
        ks: Vec<usize>,
        /// Evaluate only one side of a class split.
        #[arg(long, value_enum, default_value_t = SplitPart::All)]
        split: SplitPart,
        #[arg(long, default_value_t = 0.5)]
        train_fraction: f64,
        /// Seed of the class split (the training seed reproduces its split).
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the two leading principal components of the embeddings.
    Project {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Error with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Parse { .. } | Error::ParseLine { .. } | Error::Mismatch(_) | Error::Io(_) => EXIT_DATA,
        Error::NonFinite { .. } => EXIT_NON_FINITE,
        _ => EXIT_INTERNAL,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self { code: exit_code(&e), message: e.to_string() }
    }
}

/// Attaches a path to an error and, unless it is a config error, marks it
/// as a data error.
fn data_err(path: &Path) -> impl Fn(Error) -> CliError + '_ {
    move |e| {
        let code = match exit_code(&e) {
            EXIT_CONFIG => EXIT_CONFIG,
            _ => EXIT_DATA,
        };
        CliError::new(code, format!("{}: {e}", path.display()))
    }
}

fn load_data(path: &Path) -> Result<FeatureDataset, CliError> {
    load_features(path, DataFormat::from_path(path)).map_err(data_err(path))
}

fn load_model(path: &Path) -> Result<ModelBundle<f64>, CliError> {
    checkpoint::load(path).map_err(data_err(path))
}

fn check_widths(bundle: &ModelBundle<f64>, data: &FeatureDataset) -> Result<(), CliError> {
    if bundle.feature.input_dim() != data.dim() {
        return Err(CliError::new(
            EXIT_DATA,
            format!("model expects {} input features, data has {}", bundle.feature.input_dim(), data.dim()),
        ));
    }
    Ok(())
}

fn load_config(path: &Path, seed: Option<u64>, overrides: &[String]) -> Result<TrainConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::new(EXIT_CONFIG, format!("{}: {e}", path.display())))?;
    let mut cfg =
        TrainConfig::parse(&text).map_err(|e| CliError::new(EXIT_CONFIG, format!("{}: {e}", path.display())))?;
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::new(EXIT_CONFIG, format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run_gen_data<W: Write>(cmd: &Command, out: &mut W) -> Result<(), CliError> {
    let Command::GenData { classes, per_class, dim, center_scale, noise_scale, seed, out: path, format } = cmd else {
        unreachable!("run_gen_data called with another command")
    };
    let ds = generate_gaussian_mixture(*classes, *per_class, *dim, *center_scale, *noise_scale, *seed)
        .map_err(|e| CliError::new(EXIT_CONFIG, e.to_string()))?;
    let format = format.map(DataFormat::from).unwrap_or_else(|| DataFormat::from_path(path));
    write_features(&ds, path, format).map_err(data_err(path))?;
    writeln!(
        out,
        "wrote {} samples x {} features, {} classes to {}",
        ds.len(),
        ds.dim(),
        ds.class_count(),
        path.display()
    )
    .map_err(|e| CliError::new(EXIT_INTERNAL, e.to_string()))
}

pub fn run_train<W: Write>(
    config: &Path,
    data: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    overrides: &[String],
    out: &mut W,
) -> Result<(), CliError> {
    let cfg = load_config(config, seed, overrides)?;
    let ds = load_data(data)?;
    let (train_ds, eval_ds) = if cfg.train_fraction < 1.0 {
        let (a, b) = split_by_class(&ds, cfg.train_fraction, cfg.seed).map_err(data_err(data))?;
        (a, Some(b))
    } else {
        (ds, None)
    };
    if train_ds.class_count() < cfg.classes_per_batch {
        return Err(CliError::new(
            EXIT_DATA,
            format!("training split has {} classes, batches need {}", train_ds.class_count(), cfg.classes_per_batch),
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| CliError::new(EXIT_INTERNAL, format!("{}: {e}", out_dir.display())))?;
    fs::write(out_dir.join("config.txt"), cfg.to_string()).map_err(|e| CliError::new(EXIT_INTERNAL, e.to_string()))?;
    let eval_target = eval_ds.as_ref().unwrap_or(&train_ds);
    let outcome = train(&train_ds, Some(eval_target), &cfg, Some(out_dir))?;
    let report = &outcome.reports.last().expect("final report").1;
    fs::write(out_dir.join("metrics.txt"), report.to_string())
        .map_err(|e| CliError::new(EXIT_INTERNAL, e.to_string()))?;
    write!(out, "{report}").map_err(|e| CliError::new(EXIT_INTERNAL, e.to_string()))
}

#[allow(clippy::too_many_arguments)]
pub fn run_eval<W: Write>(
    model: &Path,
    data: &Path,
    ks: &[usize],
    split: SplitPart,
    train_fraction: f64,
    split_seed: u64,
    seed: u64,
    out: &mut W,
) -> Result<(), CliError> {
    let bundle = load_model(model)?;
    let ds = load_data(data)?;
    check_widths(&bundle, &ds)?;
    let ds = match split {
        SplitPart::All => ds,
        SplitPart::Train | SplitPart::Test => {
            let (a, b) = split_by_class(&ds, train_fraction, split_seed).map_err(data_err(data))?;
            if split == SplitPart::Train {
                a
            } else {
                b
            }
        }
    };
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() {
        ks = usable_ks(ds.len());
    }
    let report = evaluate_bundle(&bundle, &ds, &ks, seed).map_err(|e| CliError::new(EXIT_CONFIG, e.to_string()))?;
    write!(out, "{report}").map_err(|e| CliError::new(EXIT_INTERNAL, e.to_string()))
}

pub fn run_project<W: Write>(model: &Path, data: &Path, out_csv: &Path, out: &mut W) -> Result<(), CliError> {
    let bundle = load_model(model)?;
    let ds = load_data(data)?;
    check_widths(&bundle, &ds)?;
    let emb = embed_dataset(&bundle, &ds)?;
    let points = pca_2d(&emb.embeddings)?;
    let mut file = std::io::BufWriter::new(
        fs::File::create(out_csv).map_err(|e| CliError::new(EXIT_INTERNAL, format!("{}: {e}", out_csv.display())))?,
    );
    write_projection_csv(&points, &emb.labels, &mut file)?;
    file.flush().map_err(|e| CliError::new(EXIT_INTERNAL, e.to_string()))?;
    writeln!(out, "wrote {} points to {}", points.rows(), out_csv.display())
        .map_err(|e| CliError::new(EXIT_INTERNAL, e.to_string()))
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T, W, E>(args: I, out: &mut W, err: &mut E) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
    W: Write,
    E: Write,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let result = match &cli.command {
        c @ Command::GenData { .. } => run_gen_data(c, out),
        Command::Train { config, data, out: dir, seed, overrides } => {
            run_train(config, data, dir, *seed, overrides, out)
        }
        Command::Eval { model, data, ks, split, train_fraction, split_seed, seed } => {
            run_eval(model, data, ks, *split, *train_fraction, *split_seed, *seed, out)
        }
        Command::Project { model, data, out: path } => run_project(model, data, path, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}
