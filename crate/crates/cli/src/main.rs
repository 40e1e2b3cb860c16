use clap::Parser;

use protoreg_cli::cli::Cli;
use protoreg_cli::commands::run;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code);
    }
}
