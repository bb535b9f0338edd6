use clap::Parser;

use acwgan::cli::{self, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let code = match cli::run(Cli::parse()) {
        Ok(()) => cli::EXIT_OK,
        Err(e) => {
            log::error!("{e}");
            cli::exit_code(&e)
        }
    };
    std::process::exit(code);
}
