use std::process::ExitCode;

fn main() -> ExitCode {
    architts::cli::main_with_args(std::env::args_os())
}
