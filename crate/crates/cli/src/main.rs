//! `ckd`: the pipeline as subcommands over files in one output directory.

mod args;
mod commands;
mod exit;
mod run;

use std::process::ExitCode;

use clap::Parser;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CKD_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = args::Cli::parse();
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit::code_for(&e);
            log::error!("{e:#}");
            ExitCode::from(code)
        }
    }
}
