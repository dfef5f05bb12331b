mod annotate;
mod report;
mod run;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use loopid_core::config::ExperimentConfig;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Exit status when a human annotation window closes with tasks outstanding.
const EXIT_TIMEOUT: u8 = 3;

#[derive(Parser)]
#[command(
    name = "loopid",
    version,
    about = "Human-in-the-loop species identification on synthetic camera-trap data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its event split.
    Datagen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "loopid-out")]
        out: PathBuf,
        /// Include follow-up collections up to this period.
        #[arg(long, default_value_t = 2)]
        periods: u32,
    },
    /// Run periods 1..N end to end.
    Run(run::RunArgs),
    /// Label outstanding tasks with the simulated oracle.
    Annotate(annotate::AnnotateArgs),
    /// Render a period report.
    Report {
        /// A report.json, a period directory, or a run directory.
        path: PathBuf,
        /// Period to show when `path` is a run directory (default: the latest).
        #[arg(long)]
        period: Option<u32>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Serve the API and console assets for an existing run directory.
    Serve(run::ServeArgs),
    /// Print the effective configuration as JSON.
    Config {
        #[arg(long, conflicts_with = "quick")]
        config: Option<PathBuf>,
        /// The small smoke-test profile instead of the defaults.
        #[arg(long)]
        quick: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

pub(crate) fn load_config(path: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

/// `LOOPID_OUT` takes precedence over `--out`.
pub(crate) fn out_dir(flag: PathBuf) -> PathBuf {
    match std::env::var_os("LOOPID_OUT") {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => flag,
    }
}

fn datagen(config: Option<PathBuf>, out: PathBuf, periods: u32) -> anyhow::Result<()> {
    let cfg = load_config(config.as_deref())?;
    let out = out_dir(out);
    let data = loopid_core::pipeline::prepare_data(&cfg, periods)?;
    let files = loopid_core::datagen::write_manifest(&data.manifest, &out)?;
    let split = serde_json::to_string_pretty(&data.split)? + "\n";
    std::fs::write(out.join("split.json"), split)?;
    println!(
        "wrote {} samples in {} categories to {} ({})",
        data.manifest.samples.len(),
        data.manifest.categories.len(),
        out.display(),
        files.samples.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Datagen { config, out, periods } => datagen(config, out, periods),
        Command::Run(args) => run::run(args),
        Command::Annotate(args) => annotate::annotate(args),
        Command::Report { path, period, format } => report::report(&path, period, format),
        Command::Serve(args) => run::serve(args),
        Command::Config { config, quick } => {
            let cfg = if quick {
                Ok(ExperimentConfig::quick())
            } else {
                load_config(config.as_deref())
            };
            cfg.map(|c| print!("{}", c.to_json()))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let timed_out = matches!(
                e.downcast_ref::<loopid_core::pipeline::PipelineError>(),
                Some(loopid_core::pipeline::PipelineError::AnnotationTimeout { .. })
            );
            ExitCode::from(if timed_out { EXIT_TIMEOUT } else { 1 })
        }
    }
}
