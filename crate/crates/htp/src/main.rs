use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use htp::commands;
use htp::config::PipelineConfig;
use htp::error::{HtpError, Result};

#[derive(Debug, Parser)]
#[command(name = "htp", version, about = "Synthetic road-network trajectories: tokenize, learn, generate, evaluate")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; overrides the config.
    #[arg(long, global = true)]
    dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Build the lattice road network.
    SynthCity,
    /// Simulate trajectories and split them into train and test.
    SynthData {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Fit normalization statistics and compute relative labels.
    MakeLabels,
    /// Train the pattern autoencoder.
    TrainRqvae {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Encode every trajectory and write the vocabulary.
    Tokenize,
    /// Write question/answer records.
    ExportSft,
    /// Train the pattern language model.
    TrainLm {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Generate trajectories for held-out conditions.
    Generate {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        max_tokens: Option<usize>,
        /// Sample without the token grammar.
        #[arg(long)]
        unconstrained: bool,
    },
    /// Encode and decode the test set; report mean displacement.
    Reconstruct,
    /// Compute the distribution metrics.
    Evaluate {
        /// Real trajectories (default: the test split).
        #[arg(long)]
        real: Option<PathBuf>,
        /// Generated set (default: generated.jsonl).
        #[arg(long)]
        gen: Option<PathBuf>,
        /// Read `--gen` as a trajectory file rather than generation records.
        #[arg(long)]
        gen_trajectories: bool,
    },
    /// Write plot data.
    Plot {
        #[arg(long)]
        svg: bool,
    },
    /// Finite-difference check of every hand-written backward pass.
    Gradcheck,
    /// Every stage in order.
    RunAll,
}

fn config(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(d) = &g.dir {
        cfg.paths.dir = d.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = config(&cli.global)?;
    match cli.cmd {
        Cmd::SynthCity => commands::synth_city(&cfg),
        Cmd::SynthData { count } => {
            if let Some(c) = count {
                cfg.sim.count = c;
            }
            commands::synth_data(&cfg)
        }
        Cmd::MakeLabels => commands::make_labels(&cfg),
        Cmd::TrainRqvae { epochs, batch_size, lr } => {
            let t = &mut cfg.rqvae.train;
            t.epochs = epochs.unwrap_or(t.epochs);
            t.batch_size = batch_size.unwrap_or(t.batch_size);
            t.lr = lr.unwrap_or(t.lr);
            commands::train_rqvae(&cfg)
        }
        Cmd::Tokenize => commands::tokenize(&cfg),
        Cmd::ExportSft => commands::export_sft(&cfg),
        Cmd::TrainLm { epochs, lr } => {
            let t = &mut cfg.lm.train;
            t.epochs = epochs.unwrap_or(t.epochs);
            t.lr = lr.unwrap_or(t.lr);
            commands::train_lm(&cfg)
        }
        Cmd::Generate {
            count,
            temperature,
            top_k,
            max_tokens,
            unconstrained,
        } => {
            let g = &mut cfg.lm.generate;
            g.temperature = temperature.unwrap_or(g.temperature);
            g.top_k = top_k.unwrap_or(g.top_k);
            g.max_tokens = max_tokens.unwrap_or(g.max_tokens);
            g.constrained &= !unconstrained;
            if !(g.temperature >= 0.0) || !g.temperature.is_finite() {
                return Err(HtpError::Usage("--temperature must be a finite value >= 0".into()));
            }
            commands::generate(&cfg, count)
        }
        Cmd::Reconstruct => commands::reconstruct(&cfg),
        Cmd::Evaluate {
            real,
            gen,
            gen_trajectories,
        } => commands::evaluate(&cfg, real.as_deref(), gen.as_deref(), gen_trajectories),
        Cmd::Plot { svg } => commands::plot(&cfg, svg),
        Cmd::Gradcheck => commands::gradcheck(cfg.seed),
        Cmd::RunAll => commands::run_all(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
