//! `gsr`: the pipeline driver.
//!
//! Exit codes: 0 success, 1 user/config error, 2 data error, 3 internal or
//! numerical error. Every log line carries the master seed so interleaved
//! runs stay attributable.

mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use gsr_core::error::{Error, ErrorClass, Result};
use gsr_core::models::{FeatureMode, ModelFamily};

use commands::Ctx;
use config::{load_config, Overrides};

#[derive(Parser)]
#[command(
    name = "gsr",
    version,
    about = "GSR-only hypoglycemia classification pipeline"
)]
struct Cli {
    /// TOML config file; omitted keys take documented defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (default: $GSR_OUT_DIR, then ./gsr-out).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Comma-separated model families: lr,knn,rf,gbdt,mlp,cnn,lstm.
    #[arg(long, global = true, value_delimiter = ',', value_name = "LIST")]
    models: Option<Vec<String>>,

    /// Restrict the feature-mode axis.
    #[arg(long, global = true, value_enum, value_name = "MODE")]
    feature_mode: Option<FeatureModeArg>,

    /// Use the synthetic cohort instead of input files.
    #[arg(long, global = true)]
    synthetic: bool,

    /// Recompute cached intermediates.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FeatureModeArg {
    Sequence,
    Static,
    Both,
}

impl FeatureModeArg {
    fn modes(self) -> Vec<FeatureMode> {
        match self {
            FeatureModeArg::Sequence => vec![FeatureMode::Sequence],
            FeatureModeArg::Static => vec![FeatureMode::Static],
            FeatureModeArg::Both => vec![FeatureMode::Sequence, FeatureMode::Static],
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort and write per-subject CSVs.
    Synth,
    /// Parse raw subject files into the canonical CSV layout.
    Ingest {
        /// Subject files (.csv or .xml); overrides `inputs` in the config.
        inputs: Vec<PathBuf>,
    },
    /// Run the DSP chain and dump standardized series.
    Preprocess,
    /// Train every requested model/mode cell and save the binaries.
    Train,
    /// Run the full experiment matrix and write report artifacts.
    Evaluate,
    /// Evaluate restricted to --models and/or --feature-mode.
    Ablate,
    /// Re-render markdown/CSV views from an existing report.json.
    Report {
        /// Path to report.json (default: <out>/report.json).
        path: Option<PathBuf>,
    },
}

fn parse_models(list: &[String]) -> Result<Vec<ModelFamily>> {
    list.iter().map(|k| ModelFamily::from_key(k.trim())).collect()
}

fn init_logging(seed: u64) {
    let mut builder =
        env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    builder
        .format(move |buf, record| {
            writeln!(buf, "[{} seed={}] {}", record.level(), seed, record.args())
        })
        .try_init()
        .ok();
}

fn execute(cli: Cli) -> Result<()> {
    let positional_inputs = match &cli.command {
        Command::Ingest { inputs } => inputs.clone(),
        _ => Vec::new(),
    };
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        models: cli.models.as_deref().map(parse_models).transpose()?,
        modes: cli.feature_mode.map(FeatureModeArg::modes),
        synthetic: cli.synthetic,
        inputs: positional_inputs,
    };
    let cfg = load_config(cli.config.as_deref(), &overrides)?;
    init_logging(cfg.seed);

    if matches!(cli.command, Command::Ablate)
        && overrides.models.is_none()
        && overrides.modes.is_none()
    {
        return Err(Error::Config(
            "ablate needs --models and/or --feature-mode to restrict the matrix".into(),
        ));
    }

    let ctx = Ctx {
        out: cfg.resolved_out_dir(),
        cfg,
        force: cli.force,
    };
    std::fs::create_dir_all(&ctx.out).map_err(|e| {
        Error::Config(format!(
            "output directory {} is not writable: {e}",
            ctx.out.display()
        ))
    })?;
    commands::echo_resolved_config(&ctx)?;

    match cli.command {
        Command::Synth => commands::cmd_synth(&ctx),
        Command::Ingest { .. } => commands::cmd_ingest(&ctx),
        Command::Preprocess => commands::cmd_preprocess(&ctx),
        Command::Train => commands::cmd_train(&ctx),
        Command::Evaluate | Command::Ablate => commands::cmd_evaluate(&ctx),
        Command::Report { path } => commands::cmd_report(&ctx, path.as_deref()),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            std::process::exit(code);
        }
    };
    match execute(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e.class() {
                ErrorClass::User => 1,
                ErrorClass::Data => 2,
                ErrorClass::Internal => 3,
            };
            std::process::exit(code);
        }
    }
}
