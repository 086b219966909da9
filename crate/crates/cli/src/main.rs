use std::io;
use std::process::ExitCode;

fn main() -> ExitCode {
    let code = kvmerge_cli::main_with(std::env::args_os(), &mut io::stdout().lock(), &mut io::stderr().lock());
    ExitCode::from(code)
}
