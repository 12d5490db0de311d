use clap::Parser;

fn main() {
    let cli = ivcomp::cli::Cli::parse();
    if let Err(message) = ivcomp::cli::run(cli) {
        eprintln!("ivcomp: {message}");
        std::process::exit(1);
    }
}
