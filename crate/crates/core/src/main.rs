use bp_tandem::cli::{resolve_spec, run, write_outputs, Cli, CliError};
use clap::Parser;
use std::process::ExitCode;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, overrides) = cli.command.split();
    match resolve_spec(command, overrides).and_then(|spec| {
        let record = run(&spec)?;
        write_outputs(&record).map(|files| (record, files))
    }) {
        Ok((record, files)) => {
            for f in files {
                println!("wrote {}", f.display());
            }
            println!("{} rows in {:.2}s", record.rows.len(), record.provenance.wall_time_secs);
            ExitCode::SUCCESS
        }
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> ExitCode {
    eprintln!("{e}");
    eprintln!("{}", e.to_json());
    ExitCode::from(e.exit_code())
}
