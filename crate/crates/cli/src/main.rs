use cesaa_cli::{
    checkpoint_path, cmd_ablate, cmd_evaluate, cmd_gen_data, cmd_inspect_routing, cmd_sweep_k,
    cmd_train, CliError, RunConfig,
};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "cesaa",
    version,
    about = "Multi-domain CTR experiments with sparse expert selection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides train.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for records, datasets and checkpoints.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Parallel trainings for ablate and sweep-k.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Overrides train.variant (e.g. CESAA, CESAAas, MMOE, DNN).
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Config override `key=value`, e.g. `--set train.alpha=0.1`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as train.csv / test.csv.
    GenData,
    /// Train one model, record per-epoch metrics and save a checkpoint.
    Train,
    /// Evaluate a checkpoint on the configured test data.
    Evaluate {
        /// Defaults to <out>/model.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train every configured variant and seed.
    Ablate,
    /// Train the configured variant for each k in sweep.ks.
    SweepK,
    /// Print per-domain expert routing frequencies of a checkpoint.
    InspectRouting {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let c = &cli.common;
    let mut overrides = c.overrides.clone();
    if let Some(seed) = c.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    if let Some(v) = &c.variant {
        overrides.push(format!("train.variant={v:?}"));
    }
    let cfg = RunConfig::resolve(c.config.as_deref(), &overrides)?;
    let out = &c.out;
    let records = match &cli.command {
        Command::GenData => cmd_gen_data(&cfg, out)?,
        Command::Train => cmd_train(&cfg, out)?,
        Command::Evaluate { checkpoint } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| checkpoint_path(out));
            cmd_evaluate(&cfg, &ckpt, out)?
        }
        Command::Ablate => cmd_ablate(&cfg, out, c.jobs)?,
        Command::SweepK => cmd_sweep_k(&cfg, out, c.jobs)?,
        Command::InspectRouting { checkpoint } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| checkpoint_path(out));
            let (records, table) = cmd_inspect_routing(&cfg, &ckpt, out)?;
            print!("{table}");
            records
        }
    };
    for r in records.iter().filter(|r| r["kind"] != "config") {
        println!("{r}");
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
