use clap::Parser;

fn main() {
    let cli = stopcal::cli::Cli::parse();
    std::process::exit(stopcal::cli::run(&cli));
}
