use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nextchannel_cli::Pipeline;
use nextchannel_core::config::RunConfig;
use nextchannel_core::{Error, Result};
use serde_json::json;

/// Segmentation-free phenotyping of multiplex images.
///
/// Every command prints a JSON summary on stdout. Failures print
/// `{"error": {"kind": ..., "message": ...}}` on stderr and exit with 1.
#[derive(Parser)]
#[command(name = "nextchannel", version)]
struct Cli {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads. Runs are byte-reproducible with 1.
    #[arg(long, global = true, env = "NEXTCHANNEL_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Synth,
    /// Cut cell-centred patches.
    Extract,
    /// Contrastive training of the encoder.
    Train {
        /// Continue from the last checkpoint.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        epochs: Option<usize>,
        /// Stop after this many epochs, keeping the schedule.
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long)]
        peak_lr: Option<f64>,
    },
    /// Embeddings and channel contributions for every patch.
    Embed {
        /// Centre crop fed to the encoder.
        #[arg(long)]
        crop: Option<usize>,
    },
    /// Cluster the embeddings, or one cluster again with --subcluster.
    Cluster {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        min_cluster_size: Option<usize>,
        #[arg(long)]
        subcluster: Option<i64>,
    },
    /// Apply a label map to the clusters.
    Phenotype {
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Mean-intensity baseline on segmentation masks.
    Baseline {
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Figures and tables.
    Report,
    /// Perturb single channels and verify no other group responds.
    CheckDisentanglement {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1.0)]
        magnitude: f32,
        /// Use freshly initialized encoders instead of the trained weights.
        #[arg(long)]
        untrained: bool,
    },
    /// All stages in order.
    Run,
    /// Print the resolved configuration.
    Config,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.paths.out = out.clone();
    }
    match &cli.command {
        Command::Train { epochs, stop_after, peak_lr, .. } => {
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if stop_after.is_some() {
                cfg.train.stop_after = *stop_after;
            }
            if let Some(lr) = peak_lr {
                cfg.train.peak_lr = *lr;
            }
        }
        Command::Embed { crop: Some(c) } => cfg.embed.crop = Some(*c),
        Command::Cluster { k, min_cluster_size, .. } => {
            if let Some(k) = k {
                cfg.cluster.k = *k;
            }
            if let Some(m) = min_cluster_size {
                cfg.cluster.min_cluster_size = *m;
            }
        }
        _ => {}
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::config("workers", "must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config("workers", e.to_string()))?;
    }
    let cfg = load_config(&cli)?;
    if let Command::Config = cli.command {
        cfg.validate()?;
        print!("{}", cfg.to_toml()?);
        return Ok(serde_json::Value::Null);
    }
    let p = Pipeline::new(cfg)?;
    match cli.command {
        Command::Synth => p.synth(),
        Command::Extract => p.extract(),
        Command::Train { resume, .. } => p.train(resume),
        Command::Embed { .. } => p.embed(),
        Command::Cluster { subcluster: Some(id), .. } => p.subcluster(id),
        Command::Cluster { .. } => p.cluster(),
        Command::Phenotype { labels } => p.phenotype(labels.as_deref()),
        Command::Baseline { labels } => p.baseline(labels.as_deref()),
        Command::Report => p.report(),
        Command::CheckDisentanglement { trials, magnitude, untrained } => p.check_disentanglement(trials, magnitude, untrained),
        Command::Run => p.run_all(),
        Command::Config => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(serde_json::Value::Null) => ExitCode::SUCCESS,
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({"error": {"kind": e.kind(), "message": e.to_string()}}));
            ExitCode::FAILURE
        }
    }
}
