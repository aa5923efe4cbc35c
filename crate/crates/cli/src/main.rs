mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use specdec::drafters::Variant;

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "specdec", about = "Speculative decoding laboratory", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; defaults apply to absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set model.layers=4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Debug, Clone, Args)]
struct DrafterSelect {
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    n: Option<usize>,
    /// Use raw final-layer taps instead of layer self-attention.
    #[arg(long)]
    no_lsa: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the target model on the synthetic corpus.
    TrainTarget,
    /// Distill one drafter, or every configured drafter.
    Distill(DrafterSelect),
    /// Decode one prompt with speculation and with plain decoding.
    Generate {
        #[command(flatten)]
        select: DrafterSelect,
        /// Comma-separated token ids; defaults to the first held-out prompt.
        #[arg(long)]
        prompt: Option<String>,
    },
    /// Single-device episodes for every configured drafter.
    Bench,
    /// Client-server sessions over a simulated network.
    Simulate {
        #[command(flatten)]
        select: DrafterSelect,
        #[arg(long)]
        profile: Option<String>,
        #[arg(long)]
        disconnect_after: Option<usize>,
    },
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let is_config = e
            .chain()
            .any(|c| matches!(c.downcast_ref::<specdec::Error>(), Some(specdec::Error::Config(_))));
        if is_config {
            Failure::Config(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

fn load_config(common: &Common, command: &Command) -> anyhow::Result<RunConfig> {
    let mut overrides = Vec::new();
    for raw in &common.overrides {
        let (k, v) = raw
            .split_once('=')
            .ok_or_else(|| anyhow::anyhow!("override {raw:?} is not KEY=VALUE"))?;
        overrides.push((k.trim().to_string(), v.to_string()));
    }
    if let Some(s) = common.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(o) = &common.out {
        overrides.push(("out_dir".into(), serde_json::to_string(o)?));
    }
    if let Command::Simulate {
        profile,
        disconnect_after,
        ..
    } = command
    {
        if let Some(p) = profile {
            overrides.push(("network.profile".into(), serde_json::to_string(p)?));
        }
        if let Some(b) = disconnect_after {
            overrides.push(("network.disconnect_after".into(), b.to_string()));
        }
    }
    RunConfig::load(common.config.as_deref(), &overrides)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli.common, &cli.command).map_err(Failure::Config)?;
    let select = |s: &DrafterSelect| pipeline::select_drafters(&cfg, s.variant, s.n, s.no_lsa);
    match &cli.command {
        Command::TrainTarget => pipeline::train_target(&cfg)?,
        Command::Distill(s) => {
            let specs = select(s).map_err(Failure::Config)?;
            pipeline::distill(&cfg, &specs)?
        }
        Command::Generate { select: s, prompt } => {
            let specs = select(s).map_err(Failure::Config)?;
            let prompt = prompt
                .as_deref()
                .map(pipeline::parse_prompt)
                .transpose()
                .map_err(Failure::Config)?;
            pipeline::generate(&cfg, &specs[0], prompt)?
        }
        Command::Bench => pipeline::bench(&cfg)?,
        Command::Simulate { select: s, .. } => {
            let specs = select(s).map_err(Failure::Config)?;
            pipeline::simulate(&cfg, &specs)?
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SPECDEC_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
