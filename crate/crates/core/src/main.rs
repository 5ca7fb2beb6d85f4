use clap::Parser;

fn main() {
    let cli = cellopt::cli::Cli::parse();
    std::process::exit(cellopt::cli::execute(cli));
}
