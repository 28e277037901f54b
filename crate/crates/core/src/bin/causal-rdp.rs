use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(causal_rdp::cli::run_from(std::env::args_os()) as u8)
}
