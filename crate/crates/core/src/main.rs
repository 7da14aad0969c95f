use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use lamelab::cli::{exit, run_command, Command, RunConfig};

#[derive(Parser)]
#[command(name = "lamelab", version, about = "Elastic inclusion experiments")]
struct Args {
    #[command(subcommand)]
    command: Cmd,
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set n=12` or `--set materials.eta0=0`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory; overrides `output` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Forward solve on the uniform mesh of Ω.
    Forward,
    /// DtN maps of the configured inclusions and their distance.
    Dtn,
    /// Fundamental-matrix probes on the shell.
    Greens,
    /// Lower-bound sweep and term decomposition.
    Bounds,
    /// Stability family and logarithmic fit.
    Stability,
    /// Invariant checks.
    Verify,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Forward => Command::Forward,
            Cmd::Dtn => Command::Dtn,
            Cmd::Greens => Command::Greens,
            Cmd::Bounds => Command::Bounds,
            Cmd::Stability => Command::Stability,
            Cmd::Verify => Command::Verify,
        }
    }
}

fn load(args: &Args) -> anyhow::Result<RunConfig> {
    let base = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&args.sets)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.output = Some(o.clone());
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Some(t) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(exit::CONFIG as u8);
        }
    }
    let cfg = match load(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(exit::CONFIG as u8);
        }
    };
    let command = Command::from(args.command);
    let out = cfg
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("lamelab-{}", command.name())));
    let outcome = run_command(command, cfg, &out);
    if let Some(m) = &outcome.message {
        eprintln!("{m}");
    }
    ExitCode::from(outcome.code as u8)
}
