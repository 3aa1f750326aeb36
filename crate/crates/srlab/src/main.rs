use std::process::ExitCode;

use srlab::{error_json, run_argv, RunError};

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    match run_argv(&argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(RunError::Usage(e)) if !e.use_stderr() => {
            let _ = e.print();
            ExitCode::SUCCESS
        }
        Err(RunError::Usage(e)) => {
            let msg = e.render().to_string();
            eprintln!("{}", error_json("usage", msg.trim_end()));
            ExitCode::from(2)
        }
        Err(RunError::Failed(e)) => {
            eprintln!("{}", error_json(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
