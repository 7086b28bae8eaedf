use std::process::ExitCode;

fn main() -> ExitCode {
    stylecore_cli::cli::main_with(std::env::args())
}
