//! `mvpa-mets`: runs the pipeline stages against one configuration file.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, Level, LevelFilter, Log, Metadata, Record};
use mvpa_mets::config::RunConfig;
use mvpa_mets::pipeline::{Stage, Workspace};
use mvpa_mets::Error;

#[derive(Parser)]
#[command(name = "mvpa-mets", version, about = "Usual MVPA and metabolic syndrome risk factor models")]
struct Cli {
    /// TOML or JSON run configuration; defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Only warnings and errors on standard error.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Write a synthetic cohort to the configured input paths.
    Simulate,
    /// Derive daily MVPA and build the cohorts.
    Ingest,
    /// Weekend adjustment, survey weights and the variance function.
    Preprocess,
    /// Fit the measurement error model.
    FitMem,
    /// Usual-MVPA draws for the risk factor cohort.
    EstimateUsual,
    /// Fit the risk factor model.
    FitRfm,
    /// DIC scan over the number of mixture components.
    SelectH,
    /// Exceedance and R-or-more curves over the MVPA grid.
    Predict,
    /// Standardized residuals.
    Residuals,
    /// Summary tables and figure-data index.
    Report,
    /// Every stage from ingest to report.
    Run,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::Simulate => Stage::Simulate,
            Command::Ingest => Stage::Ingest,
            Command::Preprocess => Stage::Preprocess,
            Command::FitMem => Stage::FitMem,
            Command::EstimateUsual => Stage::EstimateUsual,
            Command::FitRfm => Stage::FitRfm,
            Command::SelectH => Stage::SelectH,
            Command::Predict => Stage::Predict,
            Command::Residuals => Stage::Residuals,
            Command::Report => Stage::Report,
            Command::Run => return None,
        })
    }
}

/// One JSON object per line on standard error.
struct JsonLogger {
    level: LevelFilter,
}

impl Log for JsonLogger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= self.level
    }

    fn log(&self, record: &Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let line = serde_json::json!({
            "level": record.level().as_str().to_ascii_lowercase(),
            "target": record.target(),
            "message": record.args().to_string(),
        });
        let _ = writeln!(std::io::stderr().lock(), "{line}");
    }

    fn flush(&self) {
        let _ = std::io::stderr().flush();
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::from_toml("", Path::new("."))?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.output_dir {
        cfg.paths.output_dir = dir.clone();
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<(), Error> {
    let ws = Workspace::new(load_config(cli)?)?;
    match cli.command.stage() {
        Some(stage) => ws.run(stage).map(|_| ()),
        None => ws.run_all().map(|_| ()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { Level::Warn } else { Level::Info };
    let logger: &'static JsonLogger = Box::leak(Box::new(JsonLogger {
        level: level.to_level_filter(),
    }));
    if log::set_logger(logger).is_ok() {
        log::set_max_level(level.to_level_filter());
    }
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
