use std::process::ExitCode;

fn main() -> ExitCode {
    exitnet::cli::main()
}
