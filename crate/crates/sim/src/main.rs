use std::process::ExitCode;

fn main() -> ExitCode {
    formest::cli::main()
}
