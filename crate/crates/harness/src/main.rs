use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lld_harness::suites::{run_ablation, run_mitigation, run_overlap, run_survey};
use lld_harness::validate::run_validation;
use lld_harness::{ExperimentConfig, HarnessError, Result};

/// Likelihood-displacement experiments on a softmax policy with free context embeddings.
#[derive(Parser)]
#[command(name = "lldlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// GRPO against positive-only updates per question, sorted by GRPO change.
    Survey(Overrides),
    /// GRPO, random token attenuation and selected token attenuation.
    Mitigate(Overrides),
    /// Top-K overlap of the embedding-score ranking with the likelihood-change ranking.
    Overlap(Overrides),
    /// Threshold and attenuation grids.
    Ablate(Overrides),
    /// Identity checks on random small instances.
    Validate(Overrides),
    /// Print the effective configuration with documentation.
    DumpConfig(Overrides),
}

#[derive(Args)]
struct Overrides {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated top-K cut-offs.
    #[arg(long)]
    k: Option<String>,
    /// Comma-separated threshold scales; a single value also sets `beta`.
    #[arg(long, allow_hyphen_values = true)]
    beta: Option<String>,
    /// Attenuation policy: number, p, 1-p or balanced. Also restricts the ablation grid.
    #[arg(long)]
    eta: Option<String>,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(k) = &self.k {
            cfg.set("k", k)?;
        }
        if let Some(beta) = &self.beta {
            cfg.set("beta_grid", beta)?;
            if cfg.beta_grid.len() == 1 {
                cfg.update.beta = cfg.beta_grid[0];
            }
        }
        if let Some(eta) = &self.eta {
            cfg.set("eta", eta)?;
            cfg.eta_grid = vec![cfg.update.eta];
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(command: Command) -> Result<String> {
    let done = |dir: PathBuf| format!("wrote {}", dir.display());
    match command {
        Command::Survey(o) => run_survey(&o.resolve()?).map(|r| done(r.dir)),
        Command::Mitigate(o) => {
            let cfg = o.resolve()?;
            if o.beta.as_deref().is_some_and(|b| b.contains(',')) {
                return Err(HarnessError::Config("mitigate takes a single --beta value".into()));
            }
            run_mitigation(&cfg).map(|r| done(r.dir))
        }
        Command::Overlap(o) => run_overlap(&o.resolve()?).map(|r| done(r.dir)),
        Command::Ablate(o) => run_ablation(&o.resolve()?).map(|r| done(r.dir)),
        Command::Validate(o) => run_validation(&o.resolve()?).map(|r| done(r.dir)),
        Command::DumpConfig(o) => Ok(o.resolve()?.documented().trim_end().to_string()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(message) => {
            println!("{message}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error category={} code={}: {e}", e.category(), e.exit_code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
