use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(ham::cli::run(std::env::args_os()))
}
