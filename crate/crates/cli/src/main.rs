// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mindpatch_cli::{run, Command, Options};

/// Environment variable holding the worker thread count.
const THREADS_VAR: &str = "MINDPATCH_THREADS";

#[derive(Parser)]
#[command(
    name = "mindpatch",
    version,
    about = "Mental-state steering laboratory for small transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (created if absent, locked while running).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides `trace.layers`, e.g. `0,2,4`.
    #[arg(long, global = true, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Generate and split the synthetic dialogue corpus.
    GenCorpus,
    /// Pretrain the language model (generates the corpus if needed).
    Pretrain,
    /// Layer sweep of patched question answering on the val and eval splits.
    Trace,
    /// Train encoder adapters through the frozen decoder; re-trace.
    Steer,
    /// Generate task responses with and without steering and score them.
    Generate,
    /// Linear probes and usable information per layer and mental state.
    Probe,
}

fn threads() -> Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{THREADS_VAR} must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let fail = |code: u8, msg: String| {
        eprintln!("mindpatch: {msg}");
        ExitCode::from(code)
    };
    if let Err(e) = threads() {
        return fail(2, format!("config error: {e}"));
    }
    let (Some(config), Some(out)) = (cli.config, cli.out) else {
        return fail(2, "config error: both --config and --out are required".into());
    };
    let command = match cli.command {
        Cmd::GenCorpus => Command::GenCorpus,
        Cmd::Pretrain => Command::Pretrain,
        Cmd::Trace => Command::Trace,
        Cmd::Steer => Command::Steer,
        Cmd::Generate => Command::Generate,
        Cmd::Probe => Command::Probe,
    };
    let opts = Options {
        config,
        out,
        seed: cli.seed,
        layers: cli.layers,
    };
    match run(command, &opts) {
        Ok(m) => {
            println!(
                "{}: wrote {} artifacts to {}",
                m.command,
                m.outputs.len(),
                opts.out.display()
            );
            for n in &m.notes {
                println!("  {n}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.exit_code() as u8, e.to_string()),
    }
}
