use clap::Parser;

fn main() -> std::process::ExitCode {
    match irnet_cli::run(irnet_cli::Cli::parse()) {
        Ok(summary) => {
            print!("{summary}");
            std::process::ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
