use clap::Parser;

fn main() {
    let cli = gflowmask::Cli::parse();
    if let Err(e) = gflowmask::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
