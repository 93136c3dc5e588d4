use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use netcollapse_cli::{cmd_asymptotics, cmd_classify, cmd_simulate, cmd_verify, parse_config, VerifyOptions};

#[derive(Parser)]
#[command(name = "netcollapse", version, about = "Model collapse on interaction graphs of learners")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Partition the graph and label each node collapses/bounded/frozen.
    Classify(Common),
    /// Monte Carlo risk ratios of interactive versus natural-data fits.
    Simulate(Common),
    /// Asymptotic trace-ratio series with lower and upper bounds.
    Asymptotics(Common),
    /// Compare empirical and asymptotic covariances; audit the linear recursion.
    Verify(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides output.dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed (overrides experiment.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for Monte Carlo trials.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let (Command::Classify(common) | Command::Simulate(common) | Command::Asymptotics(common) | Command::Verify(common)) =
        &cli.command;
    let text = std::fs::read_to_string(&common.config)
        .with_context(|| format!("reading {}", common.config.display()))?;
    let mut cfg = parse_config(&text).with_context(|| format!("in {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg.experiment.seed = seed;
    }
    if common.threads == Some(0) {
        anyhow::bail!("--threads must be at least 1");
    }
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    let path = match cli.command {
        Command::Classify(_) => {
            let path = cmd_classify(&cfg, &out)?;
            print!("{}", std::fs::read_to_string(&path)?);
            path
        }
        Command::Simulate(_) => cmd_simulate(&cfg, &out, common.threads)?,
        Command::Asymptotics(_) => cmd_asymptotics(&cfg, &out)?,
        Command::Verify(_) => cmd_verify(&cfg, &out, common.threads, VerifyOptions::default())?,
    };
    eprintln!("wrote {}", path.display());
    Ok(())
}
