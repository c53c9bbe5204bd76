use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(inferix::cli::run(std::env::args_os()))
}
