use std::path::PathBuf;
use std::process::ExitCode;

use blc::commands::{cmd_bench, cmd_evaluate, cmd_generate, cmd_sweep, cmd_train, exit_code};
use blc::config::RunConfig;
use blc::error::{Error, Result};
use clap::{Args, Parser, Subcommand};

/// Nym-based private matrix factorization recommender.
#[derive(Parser)]
#[command(name = "blc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic clustered ratings set.
    Generate(Common),
    /// Fit a model and save it with its traces.
    Train(Common),
    /// Score a saved model and report privacy measures.
    Evaluate(Common),
    /// Train and score over a grid of settings and seeds.
    Sweep(Common),
    /// Time the aggregation, factorization and nym-choice phases.
    Bench(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set nyms=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    threads: Option<usize>,
    /// Output root; results go to `<out>/<run-id>/`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
    /// Saved model directory (evaluate).
    #[arg(long)]
    model_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg = cfg.with_overrides(&self.set)?;
        cfg.threads = self.threads.or(cfg.threads);
        cfg.out = self.out.clone().or(cfg.out);
        cfg.run_id = self.run_id.clone().or(cfg.run_id);
        cfg.model_dir = self.model_dir.clone().or(cfg.model_dir);
        cfg.seed = self.seed.or(cfg.seed);
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::Generate(c)
        | Command::Train(c)
        | Command::Evaluate(c)
        | Command::Sweep(c)
        | Command::Bench(c) => c,
    };
    let cfg = common.config()?;
    cfg.validate()?;
    if let Some(t) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Generate(_) => {
            let dir = cmd_generate(&cfg)?;
            println!("wrote {}", dir.display());
        }
        Command::Train(_) => {
            let (dir, s) = cmd_train(&cfg)?;
            let rmse = s.test_rmse.map_or("n/a".to_string(), |r| format!("{r:.6}"));
            println!(
                "{}: {} users, {} items, {} ratings, {} nyms, test rmse {rmse}",
                s.algo.as_str(),
                s.n_users,
                s.n_items,
                s.n_ratings,
                s.nyms
            );
            println!("wrote {}", dir.display());
        }
        Command::Evaluate(_) => {
            let (dir, r) = cmd_evaluate(&cfg)?;
            println!("rmse ({}) {:.6}", r.evaluated_on, r.rmse);
            if let Some(l) = r.rmse_local {
                println!("rmse local {l:.6}");
            }
            if let Some(p) = r.p_g {
                println!("guessing probability {p:.6}");
            }
            println!("wrote {}", dir.display());
        }
        Command::Sweep(_) => {
            let (dir, rows) = cmd_sweep(&cfg)?;
            println!("{} runs", rows.len());
            println!("wrote {}", dir.display());
        }
        Command::Bench(_) => {
            let dir = cmd_bench(&cfg)?;
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
