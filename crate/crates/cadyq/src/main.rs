use clap::Parser;

fn main() {
    let cli = cadyq::cli::Cli::parse();
    match cadyq::cli::run(cli) {
        Ok(line) => println!("{line}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
