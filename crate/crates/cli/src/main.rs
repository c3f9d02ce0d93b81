mod args;
mod commands;
mod error;

use std::io::Write;
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Train(a) => commands::train(a),
        Command::Enhance(a) => commands::enhance(a),
        Command::Decompose(a) => commands::decompose(a),
        Command::Eval(a) => commands::eval(a),
        Command::Synth(a) => commands::synth(a),
        Command::Init(a) => commands::init(a),
        Command::Serve(a) => commands::serve(a),
    };
    let _ = std::io::stdout().flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
