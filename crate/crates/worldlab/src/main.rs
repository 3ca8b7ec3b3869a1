use std::process::ExitCode;

fn main() -> ExitCode {
    worldlab::cli::main()
}
