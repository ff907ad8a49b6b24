use std::process::ExitCode;

fn main() -> ExitCode {
    cbf_minnorm::cli::main_with_args(std::env::args_os())
}
