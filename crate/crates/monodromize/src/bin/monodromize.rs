use std::process::ExitCode;

fn main() -> ExitCode {
    monodromize::cli::main_with_args(std::env::args_os())
}
