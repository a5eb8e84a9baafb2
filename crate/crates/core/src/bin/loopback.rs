//! Loopback adapter for protocol tests. Answers every request with the
//! per-channel means of each image.

use std::io::{self, BufReader, BufWriter};
use std::process::ExitCode;

use clap::Parser;
use stabletta::providers::loopback::{serve, LoopbackConfig, LoopbackExit};
use stabletta::providers::wire::Hello;

#[derive(Parser)]
#[command(name = "stabletta-loopback")]
struct Args {
    #[arg(long, default_value_t = 3)]
    classes: u32,
    #[arg(long, default_value_t = 3)]
    channels: u32,
    #[arg(long, default_value_t = 8)]
    height: u32,
    #[arg(long, default_value_t = 8)]
    width: u32,
    /// Exit with status 3 instead of answering after this many batches.
    #[arg(long)]
    die_after: Option<usize>,
    /// Send a malformed response after this many batches.
    #[arg(long)]
    garbage_after: Option<usize>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let cfg = LoopbackConfig {
        hello: Hello {
            num_classes: args.classes,
            channels: args.channels,
            height: args.height,
            width: args.width,
        },
        die_after: args.die_after,
        garbage_after: args.garbage_after,
    };
    let mut input = BufReader::new(io::stdin().lock());
    let mut output = BufWriter::new(io::stdout().lock());
    match serve(&mut input, &mut output, &cfg) {
        Ok(LoopbackExit::Shutdown | LoopbackExit::Eof) => ExitCode::SUCCESS,
        Ok(LoopbackExit::Died { answered }) => {
            eprintln!("loopback: exiting after {answered} batches");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("loopback: {e}");
            ExitCode::from(2)
        }
    }
}
