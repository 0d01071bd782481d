use clap::Parser;

fn main() {
    let cli = gflow::Cli::parse();
    if let Err(e) = gflow::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
