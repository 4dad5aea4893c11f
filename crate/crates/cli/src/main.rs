mod args;
mod commands;
mod overlay;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// Failures of a command, mapped to the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] myops::Error),
    #[error("invalid arguments: {0}")]
    Usage(String),
    #[error("cannot write image {path}: {source}")]
    Image {
        path: std::path::PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl CliError {
    /// 2 configuration, 3 data, 4 non-finite loss.
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(myops::Error::NumericFailure { .. }) => 4,
            CliError::Core(e) if e.is_data_error() => 3,
            CliError::Core(_) | CliError::Usage(_) => 2,
            CliError::Image { .. } => 3,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Phantom(a) => commands::phantom(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Ensemble(a) => commands::ensemble(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
