use clap::Parser;

use gapscope::cli::{run, Cli, StageOutcome};

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(StageOutcome::Ran { seconds }) => {
            eprintln!("{} finished in {seconds:.1}s", cli.command.stage());
        }
        Ok(StageOutcome::UpToDate) => {
            eprintln!("{} is already complete for this config (use --force to rerun)", cli.command.stage());
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
