use std::io::Write;

use clap::Parser;

use ncspin::cli::{exit_code, run, write_error, Cli};

fn main() {
    let cli = Cli::parse();
    let global = cli.global.clone();
    match run(cli) {
        Ok(summary) => {
            let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
            // A closed pipe downstream is not a failure of the run.
            let _ = writeln!(std::io::stdout(), "{text}");
        }
        Err(err) => {
            let mut doc = err.to_json();
            if let Some(path) = write_error(&global, &err) {
                doc["error"]["report"] = serde_json::json!(path.display().to_string());
            }
            eprintln!("{}", serde_json::to_string_pretty(&doc).expect("error serializes"));
            std::process::exit(exit_code(&err));
        }
    }
}
