use std::process::ExitCode;

use anomaly_attribution::app::{run, Cli};
use clap::Parser;

fn main() -> ExitCode {
    let code = run(Cli::parse());
    ExitCode::from(code as u8)
}
