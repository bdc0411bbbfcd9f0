//! Command-line driver for the tinytune pipeline. The binary is a thin
//! wrapper over [`run`]; the pieces are public so tests and fuzz targets can
//! reach the configuration parser.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod run;

use std::ffi::OsString;
use std::path::Path;

use clap::error::ErrorKind;
use clap::Parser;

use crate::args::Cli;
use crate::config::RunConfig;
use crate::error::{usage, CliResult, EXIT_OK, EXIT_USAGE};

/// Resolves the configuration for a parsed command line: defaults, then the
/// config file, then flags. A resumed run takes its stored configuration.
pub fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut overrides = cli.keys.overrides();
    overrides.extend(cli.global.set.iter().cloned());
    if let Some(dir) = &cli.global.resume {
        if cli.global.config.is_some() || !overrides.is_empty() {
            return Err(usage("--resume takes its configuration from the run directory; drop other config flags"));
        }
        return run::open(dir, cli.command.name());
    }
    let base = match &cli.global.config {
        Some(path) => RunConfig::parse(&path.display().to_string(), &run::read(path)?)?,
        None => RunConfig::default(),
    };
    base.with_overrides(&overrides)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return EXIT_OK;
            }
            let rendered = e.render().to_string();
            let msg = match e.kind() {
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand | ErrorKind::MissingSubcommand => {
                    "a subcommand is required; see --help".to_string()
                }
                _ => rendered.lines().next().unwrap_or_default().trim_start_matches("error: ").to_string(),
            };
            eprintln!("{}", usage(msg).line());
            return EXIT_USAGE;
        }
    };
    let outcome = resolve(&cli).and_then(|cfg| commands::execute(&cli.command, cfg, cli.global.resume.as_deref()));
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}

/// Whether `dir` holds a run created by this tool.
pub fn is_run_dir(dir: &Path) -> bool {
    dir.join(run::RUN_INFO).is_file() && dir.join(run::RUN_CONFIG).is_file()
}
