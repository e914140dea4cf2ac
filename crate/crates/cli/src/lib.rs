//! Command-line front end: synthetic data generation, training runs,
//! evaluation, single-pair inference and run comparison tables.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

mod eval;
mod report;
mod synth;
mod train;

pub use eval::{cmd_eval, cmd_infer, error_band_color, EvalArgs, InferArgs, ERROR_BANDS};
pub use report::{cmd_report, ReportArgs};
pub use synth::{cmd_synth, SynthArgs, SynthJob, SynthSplit};
pub use train::{cmd_train, TrainArgs, TrainFile};

pub const RUN_DIR_ENV: &str = "DUALSTEREO_RUN_DIR";
pub const DEVICE_ENV: &str = "DUALSTEREO_DEVICE";

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }
}

impl From<dualstereo::Error> for Failure {
    fn from(e: dualstereo::Error) -> Self {
        use dualstereo::Error as E;
        match e {
            E::Config(_) => Failure::Config(e.to_string()),
            E::NonFinite(_) => Failure::Numeric(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

pub type CmdResult<T> = std::result::Result<T, Failure>;

pub(crate) fn io_failure(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "dualstereo", version, about = "Dual-branch semi-supervised stereo disparity estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic stereo dataset with exact disparity.
    Synth(SynthArgs),
    /// Train both branches: warm-up, then semi-supervised stage.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labeled manifest.
    Eval(EvalArgs),
    /// Predict disparity and confidence for one image pair.
    Infer(InferArgs),
    /// Compare evaluated runs in a table sorted by MAE.
    Report(ReportArgs),
    /// Write a commented configuration template.
    Template(TemplateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TemplateKind {
    Train,
    Synth,
}

#[derive(Debug, clap::Args)]
pub struct TemplateArgs {
    #[arg(long, value_enum, default_value = "train")]
    pub kind: TemplateKind,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

pub fn run(cli: Cli) -> CmdResult<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a).map(drop),
        Command::Train(a) => cmd_train(&a).map(drop),
        Command::Eval(a) => cmd_eval(&a).map(drop),
        Command::Infer(a) => cmd_infer(&a).map(drop),
        Command::Report(a) => cmd_report(&a).map(drop),
        Command::Template(a) => cmd_template(&a),
    }
}

/// Written to every output directory before any computation.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: Option<u64>,
    pub timestamp: String,
    pub code_version: String,
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, output_dir: &Path, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            output_dir: output_dir.to_path_buf(),
            seed,
            timestamp: chrono::Utc::now().to_rfc3339(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn write(&self) -> CmdResult<()> {
        write_json(&self.output_dir.join("manifest.json"), self)
    }
}

/// Creates `dir`, refusing to touch a non-empty existing directory unless `force`.
pub fn prepare_output_dir(dir: &Path, force: bool) -> CmdResult<()> {
    if dir.exists() {
        let empty = dir.is_dir() && fs::read_dir(dir).map_err(io_failure(dir))?.next().is_none();
        if !empty {
            if !force {
                return Err(Failure::Config(format!(
                    "{} already exists; pass --force to overwrite it",
                    dir.display()
                )));
            }
            if dir.is_dir() {
                fs::remove_dir_all(dir).map_err(io_failure(dir))?;
            } else {
                fs::remove_file(dir).map_err(io_failure(dir))?;
            }
        }
    }
    fs::create_dir_all(dir).map_err(io_failure(dir))
}

/// `cpu` is the only backend; `flag` wins over the environment.
pub fn resolve_device(flag: Option<&str>, config: Option<&str>) -> CmdResult<String> {
    let env = std::env::var(DEVICE_ENV).ok();
    let device = flag.map(str::to_string).or(env).or(config.map(str::to_string)).unwrap_or_else(|| "cpu".into());
    if device.eq_ignore_ascii_case("cpu") {
        Ok("cpu".into())
    } else {
        Err(Failure::Config(format!("device {device:?} is not available; only cpu is supported")))
    }
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CmdResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Data(e.to_string()))?;
    fs::write(path, text + "\n").map_err(io_failure(path))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CmdResult<T> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

/// Resolves `p` against the directory holding the config file.
pub(crate) fn relative_to(config: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config.parent().unwrap_or(Path::new("")).join(p)
    }
}

pub fn cmd_template(args: &TemplateArgs) -> CmdResult<()> {
    if args.out.exists() && !args.force {
        return Err(Failure::Config(format!("{} already exists; pass --force to overwrite it", args.out.display())));
    }
    let value = match args.kind {
        TemplateKind::Train => train::template(),
        TemplateKind::Synth => synth::template(),
    };
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_failure(parent))?;
    }
    write_json(&args.out, &value)
}
