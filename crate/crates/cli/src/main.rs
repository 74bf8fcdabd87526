//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

mod cli_args;
mod commands;
mod config;
mod imgout;

use clap::error::ErrorKind;
use clap::Parser;

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

use cli_args::{Cli, Cmd};

fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            };
        }
    };
    let result = match &cli.cmd {
        Cmd::Train(args) => commands::cmd_train(args),
        Cmd::Probe(args) => commands::cmd_probe(args),
        Cmd::Knn(args) => commands::cmd_knn(args),
        Cmd::Sweep(args) => commands::cmd_sweep(args),
        Cmd::WarpDemo(args) => commands::cmd_warp_demo(args),
        Cmd::ExportPlots(args) => commands::cmd_export_plots(args),
        Cmd::InspectCkpt(args) => commands::cmd_inspect(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn main() {
    std::process::exit(run(std::env::args_os()));
}
