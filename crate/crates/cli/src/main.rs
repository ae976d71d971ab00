//! `purify-at`: run purification experiments, score datasets, evaluate
//! checkpoints and rebuild reports.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use purify_at::harness::{
    compare_report, eval_checkpoint, literature_from_toml, load_run_records, render_table, run_experiment,
    score_experiment, summary_csv, ExperimentConfig, Overrides, DEFAULT_LITERATURE,
};
use purify_at::{Error, Result};

#[derive(Parser)]
#[command(name = "purify-at", version, about = "Hard-training-sample purification for adversarial training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone, Default)]
struct Common {
    /// Run a single seed instead of the config's list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Swap in the synthetic desk-scale benchmark and a small model.
    #[arg(long)]
    desk_scale: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compute offline k-fold scores only.
    Score {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Clean and robust accuracy of a checkpoint on the config's test set.
    Eval {
        checkpoint: PathBuf,
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Rebuild the summary and the literature comparison from a finished run.
    Report {
        dir: PathBuf,
        /// Literature file replacing the built-in one.
        #[arg(long)]
        literature: Option<PathBuf>,
    },
}

fn load(config: &PathBuf, common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config)?;
    cfg.apply(&Overrides {
        seed: common.seed,
        out: common.out.clone(),
        desk_scale: common.desk_scale,
    });
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, common } => {
            let cfg = load(&config, &common)?;
            let out = run_experiment(&cfg)?;
            print!("{}", out.table);
            println!("wrote {}", out.out_dir.display());
        }
        Command::Score { config, common } => {
            let cfg = load(&config, &common)?;
            for (seed, records) in score_experiment(&cfg)? {
                println!("seed {seed}: {} scores", records.len());
            }
        }
        Command::Eval {
            checkpoint,
            config,
            common,
        } => {
            let cfg = load(&config, &common)?;
            let seed = cfg.seeds[0];
            let r = eval_checkpoint(&checkpoint, &cfg, seed)?;
            let robust = r.robust_acc.map(|v| format!("{v:.2}")).unwrap_or_default();
            println!("clean_acc={:.2} robust_acc={robust}", r.clean_acc);
        }
        Command::Report { dir, literature } => {
            let text = match literature {
                Some(p) => fs::read_to_string(&p).map_err(|e| Error::Ingestion { path: p, msg: e.to_string() })?,
                None => DEFAULT_LITERATURE.to_string(),
            };
            let lit = literature_from_toml(&text)?;
            let records = load_run_records(&dir)?;
            if records.is_empty() {
                return Err(Error::EmptyInput(format!("no run reports under {}", dir.display())));
            }
            print!("{}", render_table(&records));
            println!();
            print!("{}", compare_report(&records, &lit).render());
            fs::write(dir.join("comparison.txt"), compare_report(&records, &lit).render())?;
            fs::write(dir.join("summary.rebuilt.csv"), summary_csv(&records, false))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
