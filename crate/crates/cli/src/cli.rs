use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use vidseg_core::checkpoint;
use vidseg_core::data::{generate_dataset, read_dataset, read_manifest, write_dataset, DatasetRecipe};
use vidseg_core::eval::{evaluate_dataset, EvalConfig, Protocol, SemivosPrompt};
use vidseg_core::train::{train, TrainConfig};

use crate::service::{self, AppState, IDLE_TIMEOUT};

/// Exit status for failures caused by bad input (flags, configs, prompts).
pub const EXIT_VALIDATION: u8 = 2;
/// Exit status for everything else that goes wrong at run time.
pub const EXIT_RUNTIME: u8 = 1;

#[derive(Debug, Parser)]
#[command(name = "vidseg", version, about = "Promptable video segmentation with selective memory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of clips with per-object masks.
    GenData {
        /// JSON dataset recipe; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed for the whole dataset.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write metrics and checkpoints.
    Train {
        /// JSON training config; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for metrics.ndjson and checkpoints.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint with a simulated user.
    Eval {
        /// Interaction protocol.
        #[arg(long, value_enum)]
        mode: Mode,
        /// Checkpoint file.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Clicks per interaction.
        #[arg(long, default_value_t = 3)]
        clicks: usize,
        /// Maximum paused frames (online mode).
        #[arg(long, default_value_t = 3)]
        frames: usize,
        /// Number of passes (offline mode).
        #[arg(long, default_value_t = 3)]
        passes: usize,
        /// Frame-0 prompt for semi-supervised mode.
        #[arg(long, value_enum, default_value_t = SemiPrompt::ThreeClick)]
        prompt: SemiPrompt,
        /// Write the JSON report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the session API over HTTP.
    Serve {
        /// Checkpoint file.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Listening port (overridden by VIDSEG_PORT when set).
        #[arg(long, env = "VIDSEG_PORT", default_value_t = 8080)]
        port: u16,
        /// Listening address.
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        /// Dataset directory whose clips sessions may reference by id.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Online,
    Offline,
    Semivos,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SemiPrompt {
    ThreeClick,
    Box,
    GtMask,
}

impl From<SemiPrompt> for SemivosPrompt {
    fn from(p: SemiPrompt) -> Self {
        match p {
            SemiPrompt::ThreeClick => SemivosPrompt::ThreeClick,
            SemiPrompt::Box => SemivosPrompt::Box,
            SemiPrompt::GtMask => SemivosPrompt::GtMask,
        }
    }
}

/// Maps an error chain to the documented exit status.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err.chain().any(|e| {
        e.downcast_ref::<vidseg_core::Error>().is_some_and(|c| c.is_validation()) || e.is::<serde_json::Error>()
    });
    if validation {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

fn read_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { config, seed, out } => {
            let recipe: DatasetRecipe = read_json(config.as_deref())?;
            let samples = generate_dataset(&recipe, seed)?;
            let manifest = write_dataset(&samples, &out)?;
            tracing::info!(clips = samples.len(), manifest = %manifest.display(), "dataset written");
        }
        Command::Train { config, data, out } => {
            let cfg: TrainConfig = read_json(config.as_deref())?;
            cfg.validate()?;
            let dataset = read_dataset(&data)?;
            let outcome = train(&cfg, &dataset, Some(&out))?;
            if let Some(last) = outcome.metrics.last() {
                tracing::info!(steps = outcome.metrics.len(), loss = last.total, "training finished");
            }
        }
        Command::Eval {
            mode,
            checkpoint: ckpt,
            data,
            clicks,
            frames,
            passes,
            prompt,
            out,
        } => {
            let cfg = EvalConfig {
                n_click: clicks,
                n_frame: frames,
                n_pass: passes,
                ..EvalConfig::default()
            };
            cfg.validate()?;
            let protocol = match mode {
                Mode::Online => Protocol::Online,
                Mode::Offline => Protocol::Offline,
                Mode::Semivos => Protocol::Semivos(prompt.into()),
            };
            let model = checkpoint::load(&ckpt)?;
            let manifest = read_manifest(&data)?;
            let samples = read_dataset(&data)?;
            let named: Vec<_> = manifest.clips.into_iter().map(|e| e.id).zip(samples).collect();
            let report = evaluate_dataset(Arc::new(model), &named, protocol, &cfg)?;
            let text = serde_json::to_string_pretty(&report)?;
            match out {
                Some(path) => std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
                None => println!("{text}"),
            }
            tracing::info!(scored = report.scored, jf = report.mean_jf, "evaluation finished");
        }
        Command::Serve {
            checkpoint: ckpt,
            port,
            host,
            data,
        } => {
            let model = checkpoint::load(&ckpt)?;
            let state = AppState::new(Arc::new(model), data, IDLE_TIMEOUT);
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async {
                let listener = tokio::net::TcpListener::bind(SocketAddr::new(host, port)).await?;
                tracing::info!(addr = %listener.local_addr()?, "serving");
                tokio::spawn(service::evict_periodically(state.clone(), Duration::from_secs(60)));
                axum::serve(listener, service::router(state)).await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}
