use std::process::ExitCode;

use clap::Parser;

use homa_core::harness::CountingAlloc;
use homa_cli::{run, Cli};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok((out, outcome)) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            println!("wrote {} ({})", out.display(), outcome.outputs.join(", "));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
