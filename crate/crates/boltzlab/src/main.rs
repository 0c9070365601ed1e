use clap::Parser;

fn main() {
    let args = boltzlab::cli::Cli::parse();
    std::process::exit(boltzlab::cli::main_with(args));
}
