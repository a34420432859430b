//! Library surface of the `modguard` CLI, kept separate from the binary so
//! integration tests can drive commands in-process.

pub mod args;
pub mod backend_spec;
pub mod commands;
pub mod report;

use clap::Parser;

/// Exit codes: 0 success, 1 fatal configuration/usage error, 2 when a scan
/// completed but some images errored.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match args::Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successful exits, anything else is a
            // usage error.
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let result = match &cli.command {
        args::Command::Scan(scan) => commands::cmd_scan(scan),
        args::Command::Eval(eval) => commands::cmd_eval(eval),
        args::Command::TrainToy(train) => commands::cmd_train_toy(train),
        args::Command::Bench(bench) => commands::cmd_bench(bench),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
