//! Command implementations behind the `tdst` binary.

pub mod ablate;
pub mod cli;
pub mod config;
pub mod data_dir;
pub mod error;
pub mod eval;
pub mod gen;
pub mod gradcheck;
pub mod infer;
pub mod manifest;
pub mod train;

use std::io::{self, Write};

pub use cli::{Cli, Command};
pub use error::{CliError, CliResult, ErrorKind};

/// Runs one command against the process's stdin and stdout.
pub fn run(cli: &Cli) -> CliResult<()> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let result = match &cli.command {
        Command::Gen(a) => gen::run(a, &mut out),
        Command::Train(a) => train::run(a, &mut out),
        Command::Eval(a) => eval::run(a, &mut out),
        Command::Infer(a) => infer::run(a, &mut io::stdin().lock(), &mut out),
        Command::Gradcheck(a) => gradcheck::run(a, &mut out),
        Command::Ablate(a) => ablate::run(a, &mut out),
    };
    out.flush()?;
    result
}
