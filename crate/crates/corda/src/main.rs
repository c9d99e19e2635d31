use clap::Parser;

fn main() {
    let cli = corda::cli::Cli::parse();
    if let Err(e) = corda::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
