use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ssm_pfn::commands::{cmd_bench, cmd_evaluate, cmd_order_sensitivity, cmd_predict, cmd_train_with};
use ssm_pfn::config::RunConfig;
use ssm_pfn::model::BackboneKind;
use ssm_pfn::{Error, Result};

/// Prior-data fitted networks for tabular classification.
#[derive(Parser)]
#[command(name = "ssm-pfn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (`key = value` lines under `[section]` headers).
    #[arg(long)]
    config: Option<PathBuf>,
    /// attention, unidirectional (mamba) or bidirectional (hydra).
    #[arg(long)]
    backbone: Option<BackboneKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Name of the label column in dataset CSVs.
    #[arg(long)]
    label_column: Option<String>,
    /// Context permutations; a comma-separated list sweeps several values.
    #[arg(long, value_delimiter = ',')]
    r: Vec<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train a model on the synthetic prior.
    Train {
        #[command(flatten)]
        common: Common,
        /// Where to write the checkpoint (default: <out-dir>/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint on CSV datasets over repeated random splits.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset CSV; repeatable. Replaces the configured list.
        #[arg(long = "dataset")]
        datasets: Vec<PathBuf>,
        /// Second checkpoint to compare against with the Wilcoxon test.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Tabulate prediction disagreement across context orderings against r.
    OrderSensitivity {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint; a freshly initialised model when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "dataset")]
        datasets: Vec<PathBuf>,
    },
    /// Time forward passes against sequence length.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated sequence lengths.
        #[arg(long, value_delimiter = ',')]
        rows: Vec<usize>,
    },
    /// Predict class probabilities for query rows.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Labelled context CSV.
        #[arg(long)]
        context: PathBuf,
        /// Query CSV with the same feature columns.
        #[arg(long)]
        queries: PathBuf,
    },
}

impl Common {
    fn resolve(&self, r_is_sweep: bool) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(kind) = self.backbone {
            cfg.set_backbone(kind);
            cfg.bench.backbones = vec![kind];
        }
        if let Some(seed) = self.seed {
            cfg.apply_seed(seed);
        }
        if let Some(dir) = &self.out_dir {
            cfg.out_dir = dir.clone();
        }
        if let Some(col) = &self.label_column {
            cfg.data.label_column = col.clone();
        }
        match self.r.as_slice() {
            [] => {}
            [r] if !r_is_sweep => cfg.rcp.r = *r,
            rs => {
                cfg.rcp.r_values = rs.to_vec();
                cfg.rcp.r = rs[0];
                cfg.rcp.sweep = rs.len() > 1;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { common, checkpoint } => {
            let mut cfg = common.resolve(false)?;
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            let out = cmd_train_with(&cfg, |p| {
                if let Some(acc) = p.val_accuracy {
                    eprintln!("step {:>6}  loss {:.4}  val_accuracy {:.4}", p.step, p.loss, acc);
                }
            })?;
            println!("checkpoint {}", out.checkpoint.display());
            println!("loss curve {}", out.curve.display());
            if let Some(acc) = out.report.best_val_accuracy {
                println!("best validation accuracy {acc:.4} at step {}", out.report.best_step);
            }
        }
        Command::Evaluate { common, checkpoint, datasets, compare } => {
            let mut cfg = common.resolve(false)?;
            if !datasets.is_empty() {
                cfg.data.datasets = datasets;
            }
            if compare.is_some() {
                cfg.data.compare_checkpoint = compare;
            }
            let out = cmd_evaluate(&cfg, checkpoint.as_deref())?;
            for s in &out.skipped {
                eprintln!("skipped {}: {}", s.dataset, s.reason);
            }
            for r in &out.reports {
                println!(
                    "{} r={} accuracy {:.4} ± {:.4}  auc_ovo {:.4} ± {:.4}",
                    r.dataset, r.r, r.mean_accuracy, r.se_accuracy, r.mean_auc_ovo, r.se_auc_ovo
                );
            }
            for c in &out.comparisons {
                println!("{} r={} wilcoxon p = {:.4}", c.dataset, c.r, c.result.p_value);
            }
            println!("results in {}", cfg.out_dir.display());
        }
        Command::OrderSensitivity { common, checkpoint, datasets } => {
            let mut cfg = common.resolve(true)?;
            if !datasets.is_empty() {
                cfg.data.datasets = datasets;
            }
            for table in cmd_order_sensitivity(&cfg, checkpoint.as_deref())? {
                for row in &table.rows {
                    println!(
                        "{} r={} kl {:.3e} [{:.3e}, {:.3e}] accuracy {:.4}",
                        table.name, row.r, row.mean_kl, row.ci95_low, row.ci95_high, row.mean_accuracy
                    );
                }
                println!("table {}", table.path.display());
            }
        }
        Command::Bench { common, rows } => {
            let mut cfg = common.resolve(false)?;
            if !rows.is_empty() {
                cfg.bench.rows = rows;
            }
            let (result, path) = cmd_bench(&cfg, |c| {
                eprintln!("{:<14} rows {:>6}  {:.4e} s  {}", c.backbone, c.rows, c.mean_s, c.status);
            })?;
            for &kind in &cfg.bench.backbones {
                if let Some(s) = result.slope(kind) {
                    println!("{kind} log-log slope {s:.3}");
                }
            }
            println!("timings {}", path.display());
        }
        Command::Predict { common, checkpoint, context, queries } => {
            let cfg = common.resolve(false)?;
            let (preds, path) = cmd_predict(&cfg, checkpoint.as_deref(), &context, &queries)?;
            println!("{} predictions written to {}", preds.len(), path.display());
        }
    }
    Ok(())
}

fn report(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}
