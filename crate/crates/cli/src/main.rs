use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(cmm_cli::app::run(std::env::args_os()))
}
