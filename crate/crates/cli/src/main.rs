use clap::Parser;

fn main() {
    let cli = dorm_cli::Cli::parse();
    if let Err(e) = dorm_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(dorm_cli::exit_code(&e));
    }
}
