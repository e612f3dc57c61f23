use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(mofu::cli::run(std::env::args_os()))
}
