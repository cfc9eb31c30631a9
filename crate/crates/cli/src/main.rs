// SPDX-License-Identifier: Apache-2.0

use clap::Parser;
use pct_cli::cli::Cli;

fn main() {
    let args = match pct_cli::config::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(pct_cli::exit_code(&e));
        }
    };
    let cli = Cli::parse_from(args);
    if let Err(e) = pct_cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(pct_cli::exit_code(&e));
    }
}
