use std::process::ExitCode;

fn main() -> ExitCode {
    s2o_cli::cli::main_with(std::env::args_os())
}
