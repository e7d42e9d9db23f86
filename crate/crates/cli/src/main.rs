use std::process::ExitCode;

fn main() -> ExitCode {
    match kflow_cli::run(std::env::args_os().collect()) {
        Err(e) => {
            // help and version go to stdout with status 0, usage errors exit 2
            let _ = e.print();
            ExitCode::from(e.exit_code() as u8)
        }
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Ok(Ok(())) => ExitCode::SUCCESS,
    }
}
