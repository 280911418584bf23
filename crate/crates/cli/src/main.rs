mod args;
mod commands;
mod manifest;

use args::{AccountCommand, BoundCommand, Cli, Command, Format};
use clap::Parser;
use commands::{Failure, Output};
use std::io::Write;
use std::process::ExitCode;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(commands::EXIT_USAGE as u8);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: could not start the thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let result = match &cli.command {
        Command::Account(AccountCommand::Offline(a)) => commands::account_offline(a),
        Command::Account(AccountCommand::Online(a)) => commands::account_online(a, cli.format, &mut out),
        Command::Verify(a) => commands::verify_cmd(a),
        Command::Bound(BoundCommand::SecondMoment(a)) => commands::bound_cmd(a),
        Command::Oracle(c) => commands::oracle_cmd(c),
    };
    match result {
        Ok(output) => emit(&mut out, &cli, output),
        Err(Failure { code, message }) => {
            eprintln!("error: {message}");
            ExitCode::from(code as u8)
        }
    }
}

fn emit(out: &mut impl Write, cli: &Cli, output: Output) -> ExitCode {
    let streaming = matches!(cli.command, Command::Account(AccountCommand::Online(_)));
    let written = match (cli.format, output.csv) {
        (Format::Csv, Some((header, rows))) => {
            let mut w = csv::Writer::from_writer(out);
            let mut r = w.write_record(&header).map_err(|e| e.to_string());
            for row in rows {
                r = r.and_then(|_| w.write_record(&row).map_err(|e| e.to_string()));
            }
            r.and_then(|_| w.flush().map_err(|e| e.to_string()))
        }
        // online rows were already streamed
        (Format::Csv, None) if streaming => Ok(()),
        (Format::Csv, None) => {
            eprintln!("error: csv output is available for the account commands only");
            return ExitCode::from(commands::EXIT_USAGE as u8);
        }
        (Format::Json, _) => {
            let text = if streaming {
                serde_json::to_string(&output.manifest)
            } else {
                serde_json::to_string_pretty(&output.manifest)
            };
            writeln!(out, "{}", text.expect("manifest serializes")).map_err(|e| e.to_string())
        }
    };
    if let Err(e) = written {
        eprintln!("error: output error: {e}");
        return ExitCode::from(1);
    }
    ExitCode::from(output.code as u8)
}
