use clap::Parser;

fn main() {
    let cli = chromaconv::cli::Cli::parse();
    std::process::exit(chromaconv::cli::run(cli));
}
