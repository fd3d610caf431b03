use std::path::PathBuf;
use std::process::ExitCode;

use bolaco_cli::{
    run_calibrate, run_compress, run_eval, run_posttrain, run_report, run_search, run_sweep, run_synth, CliResult,
    PipelineConfig, EXIT_CONFIG,
};
use bolaco_core::search::SchemeName;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

/// Low-rank compression of a small LLaMA-shaped model with per-group ranks
/// chosen by Bayesian optimization.
///
/// Flags override the JSON file given with --config; unset flags keep the
/// file's value or the default.
#[derive(Debug, Parser)]
#[command(name = "bolaco", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic base model plus sampled corpus.txt and heldout.txt.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Sequences in each sampled corpus.
        #[arg(long)]
        corpus_sequences: Option<usize>,
    },
    /// Capture per-layer output covariances pooled over calibration groups.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        stats: Stats,
        /// Number of equal calibration groups (must divide the sequence count).
        #[arg(long)]
        groups: Option<usize>,
    },
    /// Perplexity as each category alone is compressed at several ratios.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        stats: Stats,
        /// Comma-separated compression ratios.
        #[arg(long, value_delimiter = ',')]
        sweep_ratios: Option<Vec<f64>>,
        #[arg(long)]
        sweep_path: Option<PathBuf>,
    },
    /// Select a validation set and search for the best allocation.
    Search {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        stats: Stats,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Apply an allocation and write the compressed checkpoint.
    Compress {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        stats: Stats,
        #[arg(long)]
        allocation_path: Option<PathBuf>,
        #[arg(long)]
        compressed_path: Option<PathBuf>,
    },
    /// Train diagonal adapters on the factored layers.
    Posttrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        compressed_path: Option<PathBuf>,
        #[arg(long)]
        posttrained_path: Option<PathBuf>,
        /// Adapter rank per layer.
        #[arg(long)]
        r_prime: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Token positions per layer used for training.
        #[arg(long)]
        max_tokens: Option<usize>,
    },
    /// Perplexity of a checkpoint, plus reverse KL against --model.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; defaults to --model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write report.csv: parameters, ranks, perplexities and sweep curves.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        compressed_path: Option<PathBuf>,
        #[arg(long)]
        posttrained_path: Option<PathBuf>,
        #[arg(long)]
        sweep_path: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// JSON pipeline configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base model checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Text file; its bytes are the tokens.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Tokens per sequence.
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Debug, Args)]
struct Stats {
    /// Covariance directory; defaults to <output-dir>/stats.
    #[arg(long)]
    stats_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SearchArgs {
    /// 5x1, 5x4 or custom.
    #[arg(long)]
    scheme: Option<SchemeName>,
    /// JSON group list for the custom scheme.
    #[arg(long)]
    groups_path: Option<PathBuf>,
    /// Target overall compression ratio.
    #[arg(long)]
    rho: Option<f64>,
    /// Total evaluations (default 50, or 20 with --warm-start).
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    init_points: Option<usize>,
    #[arg(long)]
    candidates_per_step: Option<usize>,
    /// Weight of the reverse-KL term; 0 searches on perplexity alone.
    #[arg(long)]
    beta_rkl: Option<f64>,
    /// Probe allocations used to pick the validation set.
    #[arg(long)]
    n_probe: Option<usize>,
    /// Validation sequences kept.
    #[arg(long)]
    top_k: Option<usize>,
    /// Allocation evaluated first.
    #[arg(long)]
    warm_start: Option<PathBuf>,
    #[arg(long)]
    allocation_path: Option<PathBuf>,
}

fn set<T>(field: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *field = v;
    }
}

fn set_opt<T>(field: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *field = value;
    }
}

impl Common {
    fn config(self) -> CliResult<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        set_opt(&mut cfg.model_path, self.model);
        set_opt(&mut cfg.data_path, self.data);
        set(&mut cfg.output_dir, self.output_dir);
        set(&mut cfg.seed, self.seed);
        set(&mut cfg.window, self.window);
        Ok(cfg)
    }
}

fn run(command: Command) -> CliResult<String> {
    match command {
        Command::Synth { common, corpus_sequences } => {
            let mut cfg = common.config()?;
            set(&mut cfg.corpus_sequences, corpus_sequences);
            run_synth(&cfg)
        }
        Command::Calibrate { common, stats, groups } => {
            let mut cfg = common.config()?;
            set_opt(&mut cfg.stats_dir, stats.stats_dir);
            set(&mut cfg.groups, groups);
            run_calibrate(&cfg)
        }
        Command::Sweep { common, stats, sweep_ratios, sweep_path } => {
            let mut cfg = common.config()?;
            set_opt(&mut cfg.stats_dir, stats.stats_dir);
            set(&mut cfg.sweep_ratios, sweep_ratios);
            set_opt(&mut cfg.sweep_path, sweep_path);
            run_sweep(&cfg)
        }
        Command::Search { common, stats, search } => {
            let mut cfg = common.config()?;
            set_opt(&mut cfg.stats_dir, stats.stats_dir);
            set(&mut cfg.scheme, search.scheme);
            set_opt(&mut cfg.groups_path, search.groups_path);
            set(&mut cfg.rho, search.rho);
            set_opt(&mut cfg.epochs, search.epochs);
            set(&mut cfg.init_points, search.init_points);
            set(&mut cfg.candidates_per_step, search.candidates_per_step);
            set(&mut cfg.beta_rkl, search.beta_rkl);
            set(&mut cfg.n_probe, search.n_probe);
            set(&mut cfg.top_k, search.top_k);
            set_opt(&mut cfg.warm_start, search.warm_start);
            set_opt(&mut cfg.allocation_path, search.allocation_path);
            run_search(&cfg)
        }
        Command::Compress { common, stats, allocation_path, compressed_path } => {
            let mut cfg = common.config()?;
            set_opt(&mut cfg.stats_dir, stats.stats_dir);
            set_opt(&mut cfg.allocation_path, allocation_path);
            set_opt(&mut cfg.compressed_path, compressed_path);
            run_compress(&cfg)
        }
        Command::Posttrain { common, compressed_path, posttrained_path, r_prime, steps, lr, max_tokens } => {
            let mut cfg = common.config()?;
            set_opt(&mut cfg.compressed_path, compressed_path);
            set_opt(&mut cfg.posttrained_path, posttrained_path);
            set(&mut cfg.r_prime, r_prime);
            set(&mut cfg.steps, steps);
            set(&mut cfg.lr, lr);
            set(&mut cfg.max_tokens, max_tokens);
            run_posttrain(&cfg)
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.config()?;
            run_eval(&cfg, checkpoint.as_deref())
        }
        Command::Report { common, compressed_path, posttrained_path, sweep_path } => {
            let mut cfg = common.config()?;
            set_opt(&mut cfg.compressed_path, compressed_path);
            set_opt(&mut cfg.posttrained_path, posttrained_path);
            set_opt(&mut cfg.sweep_path, sweep_path);
            run_report(&cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    match run(cli.command) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
