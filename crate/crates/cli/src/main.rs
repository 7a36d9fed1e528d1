use std::io::{self, Write};
use std::process::ExitCode;

fn main() -> ExitCode {
    // unlocked handles: worker threads log to stderr while a command runs
    let mut out = io::stdout();
    let mut err = io::stderr();
    let status = sigforge_cli::run(std::env::args_os(), &mut out, &mut err);
    let _ = out.flush();
    ExitCode::from(status as u8)
}
