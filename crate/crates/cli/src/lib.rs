//! Command-line front end and HTTP inference service for title-forge.

pub mod commands;
pub mod service;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;

pub use commands::Cli;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Environment variable holding the log filter, e.g. `info` or `title_forge=debug`.
pub const LOG_ENV: &str = "TITLE_FORGE_LOG";

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp_millis().try_init();
}

/// Parses `argv` and runs the selected subcommand, returning the process
/// exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match commands::execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}
