use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rankunc::backends::BackendConfig;
use rankunc::commands::{
    cmd_adapt, cmd_evaluate, cmd_fetch_logits, cmd_quantify, cmd_simulate, CommandError, Overrides, RunConfig,
};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "rankunc", version, about = "Uncertainty quantification for LLM-based rankers")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Backend config as inline JSON or a path to a JSON file.
    #[arg(long, global = true)]
    backend: Option<String>,
    /// Metric cutoffs, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    #[arg(long, global = true)]
    mc_samples: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Quantify and decompose uncertainty for every instance.
    Quantify,
    /// Correlate stored reports with NDCG.
    Evaluate,
    /// Run quantify and evaluate on a generated synthetic population.
    Simulate,
    /// Uncertainty-aware prompt adaptation study.
    Adapt,
    /// Prefetch backend scores into the logit store.
    FetchLogits,
}

fn parse_backend(arg: &str) -> Result<BackendConfig, CommandError> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        std::fs::read_to_string(Path::new(arg)).map_err(|source| CommandError::Io {
            path: arg.to_string(),
            source,
        })?
    };
    serde_json::from_str(&text).map_err(|e| CommandError::Config(format!("--backend: {e}")))
}

fn run(cli: &Cli) -> Result<(), CommandError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CommandError::Config("--config is required".into()))?;
    let overrides = Overrides {
        seed: cli.seed,
        jobs: cli.jobs,
        output_dir: cli.output_dir.clone(),
        backend: cli.backend.as_deref().map(parse_backend).transpose()?,
        ks: cli.k.clone(),
        mc_samples: cli.mc_samples,
    };
    let cfg = RunConfig::load(path)?.apply(&overrides);
    match cli.command {
        Command::Quantify => {
            let out = cmd_quantify(&cfg)?;
            tracing::info!(users = out.lines.len(), failed = out.failures.len(), "quantify finished");
        }
        Command::Evaluate => {
            for s in cmd_evaluate(&cfg)? {
                tracing::info!(measure = %s.measure, k = s.k, tau = s.tau_at_k, c = s.c_at_k, "summary");
            }
        }
        Command::Simulate => {
            for s in cmd_simulate(&cfg)?.summaries {
                tracing::info!(measure = %s.measure, k = s.k, tau = s.tau_at_k, c = s.c_at_k, "summary");
            }
        }
        Command::Adapt => {
            let study = cmd_adapt(&cfg)?;
            tracing::info!(
                triggered = study.n_triggered,
                ndcg_before = study.before.ndcg,
                ndcg_after = study.after.ndcg,
                "adapt finished"
            );
        }
        Command::FetchLogits => {
            let out = cmd_fetch_logits(&cfg)?;
            tracing::info!(prompts = out.prompts, written = out.written, failed = out.failed, "fetch finished");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .json()
        .with_writer(std::io::stderr)
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            tracing::error!(error = %e, "command failed");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
