//! Operator entry points: scene generation, training, inference, evaluation.
//!
//! Exit codes: 0 success, 1 runtime failure (NaN losses, render errors),
//! 2 usage or configuration errors.

mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "rigsplat", about = "Feed-forward Gaussian splatting for surround-view rigs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic surround-view scene with ground-truth depth and
    /// ego poses.
    Generate {
        /// Generator config JSON; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        cameras: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        timesteps: Option<usize>,
    },
    /// Train the full model on a scene.
    Train {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training config JSON; flags below override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Two-stage training: localization first, then the Gaussian
        /// network with depth/pose frozen.
        #[arg(long)]
        no_joint: bool,
        /// Give the Gaussian network its own image encoder instead of the
        /// depth network's features.
        #[arg(long)]
        no_feature_share: bool,
        /// Temporal-only photometric supervision (drops spatial and
        /// spatial-temporal contexts).
        #[arg(long)]
        mono_depth: bool,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Comma-separated timesteps excluded as training-sample centers.
        #[arg(long, value_delimiter = ',')]
        holdout: Vec<i64>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Synthesize novel surround views from a trained checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// sf: render each frame from its predecessor; mf: render each
        /// interior frame from its two neighbors.
        #[arg(long, value_parser = ["sf", "mf"], default_value = "sf")]
        mode: String,
        /// Ego-motion source: the pose network or recorded poses.
        #[arg(long, value_parser = ["from-pose-net", "from-file"], default_value = "from-pose-net")]
        ego: String,
        /// Also export the primitive cloud per target frame.
        #[arg(long)]
        export_cloud: bool,
    },
    /// Compare rendered frames against a reference scene and emit a CSV
    /// metric report.
    Eval {
        /// Directory of rendered frames (`<t>/<camera>.png`).
        #[arg(long)]
        rendered: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    // Optional thread-count selection for the rayon pool.
    if let Ok(threads) = std::env::var("RIGSPLAT_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            #[cfg(feature = "parallel")]
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
            #[cfg(not(feature = "parallel"))]
            let _ = n;
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { config, out, seed, cameras, width, height, timesteps } => {
            commands::generate(config, out, seed, cameras, width, height, timesteps)
        }
        Command::Train {
            scene,
            out,
            config,
            steps,
            seed,
            lr,
            batch_size,
            no_joint,
            no_feature_share,
            mono_depth,
            resume,
            holdout,
            checkpoint_every,
        } => commands::train(commands::TrainArgs {
            scene,
            out,
            config,
            steps,
            seed,
            lr,
            batch_size,
            no_joint,
            no_feature_share,
            mono_depth,
            resume,
            holdout,
            checkpoint_every,
        }),
        Command::Infer { checkpoint, scene, out, mode, ego, export_cloud } => {
            commands::infer(checkpoint, scene, out, &mode, &ego, export_cloud)
        }
        Command::Eval { rendered, scene, out } => commands::eval(rendered, scene, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.message);
            ExitCode::from(e.code)
        }
    }
}
