use clap::Parser;

fn main() {
    let cli = qsm_cli::cli::Cli::parse();
    if let Err(e) = qsm_cli::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code);
    }
}
