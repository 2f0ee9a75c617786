use std::process::exit;

use clap::Parser;
use dpush_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(lines) => {
            for line in lines {
                println!("{line}");
            }
        }
        Err(e) => {
            eprintln!("{}", e.line());
            exit(e.exit_code());
        }
    }
}
