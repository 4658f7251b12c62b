use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(mechbench_cli::run(std::env::args_os()))
}
