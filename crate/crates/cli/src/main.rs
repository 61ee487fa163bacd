use std::path::PathBuf;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use intercnn_cli::commands;
use intercnn_cli::service::{serve, AppState, ModelBundle, ServiceConfig};
use intercnn_core::dataio::DatasetFormat;
use intercnn_core::evaluation::ExperimentConfig;
use intercnn_core::grid::Shape;

#[derive(Parser)]
#[command(name = "intercnn", version, about = "Train, evaluate and serve interactive segmentation editing networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML, or JSON by extension).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every training, robot and simulation seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint directory (autocnn.ckpt, intercnn.ckpt, uinet.ckpt).
    #[arg(long, env = "INTERCNN_CHECKPOINT", default_value = "runs/default")]
    checkpoint: PathBuf,
    /// Load PNG pairs or NIfTI volumes from this directory instead of synthetic data.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "png_pairs")]
    format: DatasetFormat,
}

impl Common {
    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = commands::load_config(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        if let Some(root) = &self.data {
            cfg.data = commands::data_directory(root.clone(), self.format);
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as PNG image/label pairs.
    MakeSynthetic {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train autoCNN and write autocnn.ckpt.
    TrainAuto {
        #[command(flatten)]
        common: Common,
    },
    /// Train interCNN on top of autocnn.ckpt, or the from-scratch baseline.
    TrainInter {
        #[command(flatten)]
        common: Common,
        /// Training interactions per batch; overrides the config.
        #[arg(long)]
        k: Option<usize>,
        /// Train the baseline that sees only image and scribbles (uinet.ckpt).
        #[arg(long)]
        scratch: bool,
    },
    /// Simulate editing on the test group and write CSV and SVG reports.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "runs/default/eval")]
        out: PathBuf,
    },
    /// Run the full pipeline for every K in the config.
    KSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "runs/k_sweep")]
        out: PathBuf,
    },
    /// Replay robot editing on one image/label PNG pair.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        label: PathBuf,
        /// Number of robot interactions; overrides the config.
        #[arg(long)]
        interactions: Option<usize>,
        /// Write the label map after every interaction as PNG here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time single interCNN updates; untrained weights when the checkpoint
    /// directory has no intercnn.ckpt.
    Latency {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 320)]
        size: usize,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Serve the editing API.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "INTERCNN_BIND", default_value = "127.0.0.1:8080")]
        bind: String,
        /// Idle session lifetime in seconds.
        #[arg(long, env = "INTERCNN_SESSION_TTL", value_parser = commands::parse_duration_secs)]
        session_ttl: Option<Duration>,
        /// Persist sessions as JSON files in this directory.
        #[arg(long, env = "INTERCNN_SESSION_DIR")]
        session_dir: Option<PathBuf>,
    },
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    match Cli::parse().command {
        Command::MakeSynthetic { common, out } => {
            let n = commands::make_synthetic(&common.config()?, &out)?;
            println!("wrote {n} patients to {}", out.display());
        }
        Command::TrainAuto { common } => {
            let cfg = common.config()?;
            let checkpoint = common.checkpoint;
            let trained = commands::train_auto(&cfg, &checkpoint)?;
            println!(
                "autoCNN: {} steps, best validation Dice {:.4}",
                trained.record.optimizer_steps,
                trained.record.best_dice().unwrap_or(f64::NAN)
            );
            println!("test Dice {:.4}", commands::auto_test_dice(&cfg, &checkpoint)?);
        }
        Command::TrainInter { common, k, scratch } => {
            let checkpoint = &common.checkpoint;
            let mut cfg = common.config()?;
            if let Some(k) = k {
                cfg.inter.k_interactions = k;
            }
            let trained = commands::train_inter(&cfg, checkpoint, scratch)?;
            println!(
                "{}: {} steps, best validation Dice {:.4}",
                if scratch { "from-scratch" } else { "interCNN" },
                trained.record.optimizer_steps,
                trained.record.best_dice().unwrap_or(f64::NAN)
            );
        }
        Command::Evaluate { common, out } => {
            let curve = commands::evaluate(&common.config()?, &common.checkpoint, &out)?;
            for (i, d) in curve {
                println!("interaction {i:>2}  Dice {d:.4}");
            }
            println!("reports in {}", out.display());
        }
        Command::KSweep { common, out } => {
            let auto = commands::k_sweep(&common.config()?, &out, &common.checkpoint)?;
            println!("autoCNN test Dice {auto:.4}; reports in {}", out.display());
        }
        Command::Simulate {
            common,
            image,
            label,
            interactions,
            out,
        } => {
            let mut cfg = common.config()?;
            if let Some(n) = interactions {
                cfg.simulation.n_interactions = n;
            }
            let trace = commands::simulate(&cfg, &common.checkpoint, &image, &label)?;
            for (i, scores) in trace.curve.per_iteration.iter().enumerate() {
                let mean = scores.iter().sum::<f64>() / scores.len() as f64;
                println!("interaction {i:>2}  Dice {mean:.4}");
            }
            if let Some(out) = out {
                commands::write_masks(&trace.masks, &out)?;
                println!("masks in {}", out.display());
            }
        }
        Command::Latency { common, size, trials } => {
            let checkpoint = common.checkpoint.join(intercnn_cli::service::INTER_CHECKPOINT);
            let r = commands::latency(
                checkpoint.exists().then_some(common.checkpoint.as_path()),
                &common.config()?,
                Shape::new(size, size),
                trials,
                common.seed.unwrap_or(0),
            )?;
            println!(
                "{trials} updates at {size}x{size}: mean {:.1} ms, std {:.1}, min {:.1}, max {:.1}",
                r.mean_ms, r.std_ms, r.min_ms, r.max_ms
            );
        }
        Command::Serve {
            common,
            bind,
            session_ttl,
            session_dir,
        } => {
            let checkpoint = common.checkpoint;
            let models = match ModelBundle::load(&checkpoint) {
                Ok(m) => Some(m),
                Err(e) => {
                    tracing::error!("no model loaded from {}: {e:#}", checkpoint.display());
                    None
                }
            };
            let state = AppState::new(
                models,
                ServiceConfig {
                    session_ttl,
                    persist_dir: session_dir,
                },
            )?;
            tokio::runtime::Runtime::new()
                .context("starting runtime")?
                .block_on(serve(state, &bind))?;
        }
    }
    Ok(())
}
