use std::process::ExitCode;

fn main() -> ExitCode {
    ensobs::cli::run()
}
