use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use latent_plan_cli::commands::{eval_cmd, gen_data, generate_cmd, train, verify_cmd};
use latent_plan_cli::{exit_code, RunConfig};

#[derive(Parser)]
#[command(name = "latent-plan", about = "Latent-plan audio token generation on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat TOML run config; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// constant, gradual, disjoint or custom.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the world and write train/test splits.
    GenData(Common),
    /// Train on the configured dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Generate from a text prompt.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
    },
    /// Evaluate checkpoints on a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// name=checkpoint pairs compared in a normalised-score table.
        #[arg(long, num_args = 1..)]
        strategies: Vec<String>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run the property suites.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Debug: inject a gradient fault to check the suite catches it.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(s) = &c.schedule {
        cfg.schedule = s.clone();
    }
    if let Some(e) = c.epochs {
        cfg.epochs = e;
    }
    if let Some(k) = c.top_k {
        cfg.top_k = k;
    }
    Ok(cfg)
}

fn out_dir(c: &Common, default: &str) -> PathBuf {
    c.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData(c) => {
            let cfg = resolve(&c)?;
            let out = c.out.clone().unwrap_or_else(|| cfg.data_dir.clone());
            gen_data(&cfg, &out).map(|_| ())
        }
        Cmd::Train { common, checkpoint } => {
            let cfg = resolve(&common)?;
            train(&cfg, &out_dir(&common, "run"), checkpoint.as_deref())
        }
        Cmd::Generate { common, checkpoint, prompt } => {
            let cfg = resolve(&common)?;
            generate_cmd(&cfg, &checkpoint, &prompt, &out_dir(&common, "gen"))
        }
        Cmd::Eval { common, checkpoint, strategies, split } => {
            let cfg = resolve(&common)?;
            eval_cmd(&cfg, checkpoint.as_deref(), &strategies, &split, &out_dir(&common, "eval"))
        }
        Cmd::Verify { common, inject_fault } => {
            resolve(&common)?;
            verify_cmd(inject_fault)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // Help and version requests are not errors; bad usage is a config error.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
