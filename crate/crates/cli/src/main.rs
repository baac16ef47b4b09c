use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(crossview_cli::main_with(std::env::args_os()))
}
