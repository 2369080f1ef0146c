use clap::Parser;

fn main() {
    std::process::exit(hebatch::cli::run(hebatch::cli::Cli::parse()));
}
