use clap::Parser;

fn main() {
    let cli = specrecon_cli::Cli::parse();
    if let Err(e) = specrecon_cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
