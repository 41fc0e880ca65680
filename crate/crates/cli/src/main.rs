use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mutualseg_cli::{dispatch, parse_config, split_override, CliError, Command};

#[derive(Parser)]
#[command(name = "mutualseg", version, about = "Cross-modality segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write phantom train/test datasets under data_root.
    Synth(Common),
    /// Train (or resume from --checkpoint) on data_root.
    Train(Common),
    /// Evaluate a checkpoint on the data_root test split.
    Eval(Common),
    /// Train and evaluate the ablation variants for each seed.
    Ablate(Common),
    /// Train with increasing assistant-set sizes for each seed.
    Sweep(Common),
    /// Regenerate tables and plots in out_dir from logged results.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    data_root: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    precision: Option<String>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (command, c) = match cli.command {
        Cmd::Synth(c) => (Command::Synth, c),
        Cmd::Train(c) => (Command::Train, c),
        Cmd::Eval(c) => (Command::Eval, c),
        Cmd::Ablate(c) => (Command::Ablate, c),
        Cmd::Sweep(c) => (Command::Sweep, c),
        Cmd::Report(c) => (Command::Report, c),
    };
    let text = match &c.config {
        Some(p) => Some(
            std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?,
        ),
        None => None,
    };
    let mut overrides = c.set.iter().map(|s| split_override(s)).collect::<Result<Vec<_>, _>>()?;
    for (key, v) in [
        ("data_root", c.data_root),
        ("out_dir", c.out_dir),
        ("checkpoint", c.checkpoint),
        ("seed", c.seed),
        ("seeds", c.seeds),
        ("epochs", c.epochs),
        ("mode", c.mode),
        ("precision", c.precision),
    ] {
        if let Some(v) = v {
            overrides.push((key.to_string(), v));
        }
    }
    let cfg = parse_config(command, text.as_deref(), &overrides)?;
    dispatch(&cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
