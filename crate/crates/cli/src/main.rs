use clap::Parser;
use dynodisco::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DYNODISCO_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    std::process::exit(run(&cli));
}
