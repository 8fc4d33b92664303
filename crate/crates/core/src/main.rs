use clap::Parser;

use calfat::cli::{configure_threads, execute, Cli, EXIT_INPUT};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        std::process::exit(EXIT_INPUT);
    }
    std::process::exit(execute(&cli));
}
