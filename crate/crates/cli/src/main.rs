mod artifacts;
mod commands;
mod manifest;

use clap::error::ErrorKind;
use clap::Parser;

fn main() {
    let cli = match commands::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            std::process::exit(0);
        }
        Err(e) => {
            // Usage problems are validation errors: exit 1 with a
            // machine-readable record on stderr.
            eprintln!(
                "{}",
                serde_json::json!({"error": e.to_string().trim(), "code": 1})
            );
            std::process::exit(1);
        }
    };
    match commands::run(cli) {
        Ok(()) => {}
        Err(err) => {
            let record = serde_json::json!({"error": err.message, "code": err.code});
            eprintln!("{record}");
            if let Some(dir) = err.out_dir {
                let _ = std::fs::write(
                    dir.join("error.json"),
                    serde_json::to_string_pretty(&record).unwrap_or_default(),
                );
            }
            std::process::exit(err.code);
        }
    }
}
