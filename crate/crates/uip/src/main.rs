use std::process::ExitCode;

fn main() -> ExitCode {
    uip::cli::run()
}
