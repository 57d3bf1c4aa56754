use clap::Parser;

fn main() {
    let cli = hkam::cli::Cli::parse();
    std::process::exit(hkam::cli::run(&cli));
}
