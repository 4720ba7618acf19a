use clap::Parser;

fn main() {
    let cli = hetdiff_cli::Cli::parse();
    if let Err(e) = hetdiff_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
