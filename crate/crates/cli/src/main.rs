use std::process::ExitCode;

use clap::Parser;
use maskdiff_cli::commands::{run, Cli};
use maskdiff_core::Error;

fn exit_code(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Usage(_) => (2, "usage"),
        Error::Config(_) => (3, "config"),
        Error::Parse { .. } => (3, "parse"),
        Error::Numeric { .. } => (4, "numeric"),
        Error::State(_) => (4, "state"),
        Error::Io(_) => (5, "io"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = exit_code(&e);
            let msg = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!("error code={code} kind={kind}: {msg}");
            ExitCode::from(code)
        }
    }
}
