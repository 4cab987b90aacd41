use clap::Parser;
use dspo_cli::cli::Cli;
use dspo_cli::run::StageOutcome;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.execute() {
        Ok(Some(StageOutcome::UpToDate)) => println!("up to date (use --force to re-run)"),
        Ok(Some(StageOutcome::Completed)) => println!("done"),
        Ok(None) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
