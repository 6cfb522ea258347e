use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(rainsense_cli::run(std::env::args_os()) as u8)
}
