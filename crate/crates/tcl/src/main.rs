use std::process::ExitCode;

fn main() -> ExitCode {
    tcl::cli::run()
}
