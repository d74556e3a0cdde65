use clap::Parser;
use vadet_cli::{run, Cli, CliError};

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {}", CliError::Config(e.to_string()));
            std::process::exit(2);
        }
    }
    let argv: Vec<String> = std::env::args().skip(1).collect();
    if let Err(e) = run(&cli, &argv) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
