//! Command-line driver: training, scoring, evaluation, plot export and
//! synthetic data generation.

pub mod args;
pub mod commands;
pub mod output;

use std::io::{self, Write};

use tcn_core::TcnError;

pub use args::{Cli, Command, Emit};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] TcnError),
    #[error("output failed: {0}")]
    Output(#[from] io::Error),
    #[error("cannot encode report: {0}")]
    Encode(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => match e.root() {
                TcnError::Diverged { .. } | TcnError::NonFiniteGradient { .. } => EXIT_DIVERGED,
                TcnError::InvalidConfig(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            },
            CliError::Output(_) | CliError::Encode(_) => EXIT_DATA,
        }
    }
}

/// Runs one parsed command, writing its report to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Train(a) => commands::cmd_train(a, out).map(drop),
        Command::Classify(a) => match &a.out {
            Some(p) => {
                let mut file = commands::open_output(Some(p))?;
                commands::cmd_classify(a, &mut file)?;
                file.flush()?;
                Ok(())
            }
            None => commands::cmd_classify(a, out).map(drop),
        },
        Command::Evaluate(a) => commands::cmd_evaluate(a, out).map(drop),
        Command::ExportPlot(a) => match &a.out {
            Some(p) => {
                let mut file = commands::open_output(Some(p))?;
                commands::cmd_export_plot(a, &mut file)?;
                file.flush()?;
                Ok(())
            }
            None => commands::cmd_export_plot(a, out).map(drop),
        },
        Command::Synth(a) => commands::cmd_synth(a, out),
    }
}
