use clap::Parser;

fn main() {
    let cli = oi_safety::cli::Cli::parse();
    std::process::exit(oi_safety::cli::main_with(cli));
}
