use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(tealeaf_cli::dispatch(std::env::args_os()))
}
