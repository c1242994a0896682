#![no_main]
//! Command-line parsing: NUL-separated argument vectors.

use libfuzzer_sys::fuzz_target;
use tdrs_cli::{resolve_config, Cli, Command};

use clap::Parser;

fuzz_target!(|data: &[u8]| {
    let args: Vec<String> = std::iter::once("tdrs".to_string())
        .chain(data.split(|b| *b == 0).map(|a| String::from_utf8_lossy(a).into_owned()))
        .collect();
    let Ok(cli) = Cli::try_parse_from(&args) else {
        return;
    };
    match &cli.command {
        Command::Run(a) | Command::Compare(a) if a.config.is_none() => {
            let _ = resolve_config(a);
        }
        _ => {}
    }
});
