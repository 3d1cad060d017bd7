use std::io;
use std::process::ExitCode;

fn main() -> ExitCode {
    let code = patchcam::cli::run(std::env::args_os(), &mut io::stdout(), &mut io::stderr());
    ExitCode::from(code)
}
