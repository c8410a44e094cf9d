use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use picie_cli::commands::{self, EvalArgs, NnArgs};
use picie_cli::config::parse_partitions;
use picie_cli::{exit_code, resolve, ConfigError, RunConfig, EXIT_USAGE};
use picie_core::eval::DEFAULT_NN_STRIDE;

/// Unsupervised semantic segmentation by pixel clustering.
#[derive(Parser)]
#[command(name = "picie", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file (TOML, dotted keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable. Applied after the file and PICIE_* variables.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    /// Resolves the configuration, falling back to the snapshot stored with
    /// `checkpoint` when no file is given.
    fn resolve(&self, checkpoint: Option<&Path>) -> Result<RunConfig> {
        let file = self.config.clone().or_else(|| checkpoint.and_then(commands::snapshot_for));
        Ok(resolve(file.as_deref(), std::env::vars(), &self.sets)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train and write a run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory; overrides `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint and write metrics JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Class subsets reported separately, e.g. `stuff:0-14 things:15-26`.
        #[arg(long, num_args = 1..)]
        partitions: Vec<String>,
        /// Add photometric and geometric test-time conditions.
        #[arg(long)]
        robustness: bool,
        /// Write majority-vote renderings of every image here.
        #[arg(long)]
        render: Option<PathBuf>,
        /// Metrics file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one clustering pass and print cluster statistics.
    Cluster {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Extract features with this checkpoint instead of a fresh network.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Where pseudo-label files go; defaults to `<out_dir>/pseudolabels`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render majority-vote segmentations of selected images.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, num_args = 1.., required = true)]
        ids: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Nearest pixels to a query pixel in feature space.
    Nn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        id: String,
        /// Feature-grid coordinate `row,col`.
        #[arg(long, value_parser = parse_coord)]
        coord: (usize, usize),
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_NN_STRIDE)]
        stride: usize,
        #[arg(long)]
        json: bool,
        /// Write an image crop around every neighbor here.
        #[arg(long)]
        crops: Option<PathBuf>,
    },
}

fn parse_coord(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected row,col")?;
    Ok((
        a.trim().parse().map_err(|_| format!("bad row `{a}`"))?,
        b.trim().parse().map_err(|_| format!("bad column `{b}`"))?,
    ))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, out } => {
            let mut cfg = cfg.resolve(None)?;
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            commands::guard_run_dir(&cfg)?;
            let dir = commands::cmd_train(&cfg)?;
            println!("{}", dir.display());
        }
        Command::Eval { checkpoint, cfg, partitions, robustness, render, out } => {
            let mut cfg = cfg.resolve(Some(&checkpoint))?;
            if !partitions.is_empty() {
                cfg.eval.partitions = parse_partitions(partitions.iter().map(String::as_str))?;
            }
            cfg.eval.robustness |= robustness;
            commands::cmd_eval(&cfg, &EvalArgs { checkpoint, render, out })?;
        }
        Command::Cluster { cfg, checkpoint, out } => {
            let cfg = cfg.resolve(checkpoint.as_deref())?;
            let out = out.unwrap_or_else(|| cfg.out_dir.join("pseudolabels"));
            let stats = commands::cmd_cluster(&cfg, checkpoint.as_deref(), &out)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::Visualize { checkpoint, cfg, ids, out } => {
            let cfg = cfg.resolve(Some(&checkpoint))?;
            for p in commands::cmd_visualize(&cfg, &checkpoint, &ids, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Nn { checkpoint, cfg, id, coord, k, stride, json, crops } => {
            if k == 0 {
                return Err(ConfigError("--k must be at least 1".into()).into());
            }
            let cfg = cfg.resolve(Some(&checkpoint))?;
            let list = commands::cmd_nn(&cfg, &checkpoint, &NnArgs { id, coord, k, stride, crops })?;
            if json {
                println!("{}", serde_json::to_string_pretty(&list)?);
            } else {
                for (rank, n) in list.neighbors.iter().enumerate() {
                    println!("{}\t{}\t{}\t{}\t{:.6}", rank + 1, n.image_id, n.coord.0, n.coord.1, n.distance);
                }
                if list.truncated {
                    eprintln!("only {} candidates available", list.neighbors.len());
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
