use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use uniret_cli::commands::{
    run_curate, run_eval, run_gen, run_project, run_train, CurateOptions, EvalOptions,
    GenOptions, ProjectOptions, TrainOptions,
};
use uniret_cli::config::PipelineConfig;
use uniret_cli::pipeline::{render_table, run_pipeline};

const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (manifest format v1, checkpoint format v1)"
);

/// Cross-modal retrieval toolkit: synthetic data generation, ensemble
/// curation, angular-margin training, and Rank-k/mAP evaluation.
#[derive(Parser)]
#[command(name = "uniret", version, long_version = LONG_VERSION)]
struct Cli {
    /// Worker threads for similarity kernels (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset with planted ground truth.
    Gen(GenArgs),
    /// Filter a dataset by ensemble top-K retrieval consensus.
    Curate(CurateArgs),
    /// Train encoders and the identity classifier on a (curated) dataset.
    Train(TrainArgs),
    /// Score a test set and report Rank-k / mAP, optionally with NNN.
    Eval(EvalArgs),
    /// Project embeddings onto their top-2 principal components.
    Project(ProjectArgs),
    /// Run gen -> curate -> train -> eval from one config file.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Generator spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory (defaults to $UNIRET_OUT_DIR).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Also emit this many frozen expert embedding files.
    #[arg(long, default_value_t = 0)]
    emit_experts: usize,
    /// Corruption sigma for non-oracle experts.
    #[arg(long, default_value_t = 0.5)]
    expert_sigma: f64,
    /// Make expert 0 an oracle over the planted identities.
    #[arg(long, default_value_t = true)]
    oracle_first: bool,
}

#[derive(Args)]
struct CurateArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Expert embedding manifest; repeat per expert.
    #[arg(long)]
    expert: Vec<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out_mask: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// JSON file supplying defaults for any of the flags above.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Curation mask; omit to train on the full dataset.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Trainer config (JSON); defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Metrics history CSV (default: checkpoint path with .metrics.csv).
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Apply nearest-neighbor score normalization.
    #[arg(long)]
    nnn: bool,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    kappa: Option<usize>,
    /// Reference query set for the bias: "self" or a manifest path.
    #[arg(long)]
    reference: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also dump the f32 score matrices next to the report.
    #[arg(long)]
    dump_scores: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    /// Pipeline config (JSON); defaults to the standard benchmark.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides config and $UNIRET_OUT_DIR).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override the global seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn default_out_dir() -> Option<PathBuf> {
    std::env::var_os("UNIRET_OUT_DIR").map(PathBuf::from)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("warning: could not set thread count: {e}");
        }
    }
    let result = match cli.command {
        Command::Gen(args) => {
            let out_dir = args.out_dir.or_else(default_out_dir);
            match out_dir {
                Some(out_dir) => run_gen(&GenOptions {
                    spec: args.spec,
                    out_dir,
                    emit_experts: args.emit_experts,
                    expert_sigma: args.expert_sigma,
                    oracle_first: args.oracle_first,
                }),
                None => Err(uniret_core::Error::InvalidConfig(
                    "gen needs --out-dir or UNIRET_OUT_DIR".into(),
                )),
            }
        }
        Command::Curate(args) => run_curate(&CurateOptions {
            dataset: args.dataset,
            experts: args.expert,
            k: args.k,
            out_mask: args.out_mask,
            report: args.report,
            config: args.config,
        }),
        Command::Train(args) => run_train(&TrainOptions {
            dataset: args.dataset,
            mask: args.mask,
            config: args.config,
            out: args.out,
            metrics_out: args.metrics_out,
        }),
        Command::Eval(args) => run_eval(&EvalOptions {
            checkpoint: args.checkpoint,
            test: args.test,
            nnn: args.nnn,
            alpha: args.alpha,
            kappa: args.kappa,
            reference: args.reference,
            out: args.out,
            dump_scores: args.dump_scores,
            config: args.config,
        }),
        Command::Project(args) => run_project(&ProjectOptions {
            checkpoint: args.checkpoint,
            dataset: args.dataset,
            out: args.out,
        }),
        Command::Pipeline(args) => return run_pipeline_command(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run_pipeline_command(args: PipelineArgs) -> ExitCode {
    let mut config = match &args.config {
        Some(path) => match PipelineConfig::from_file(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: cannot read pipeline config: {e}");
                return ExitCode::FAILURE;
            }
        },
        None => PipelineConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let out_dir = args
        .out_dir
        .or_else(|| config.out_dir.clone())
        .or_else(default_out_dir);
    let Some(out_dir) = out_dir else {
        eprintln!("error: pipeline needs --out-dir, config out_dir, or UNIRET_OUT_DIR");
        return ExitCode::FAILURE;
    };
    match run_pipeline(&config, &out_dir) {
        Ok(outcome) => {
            for (stage, status) in &outcome.report.stages {
                println!("pipeline: {stage}: {status}");
            }
            if let Some(eval) = &outcome.report.eval {
                print!("{}", render_table(eval));
            }
            println!("pipeline: report written to {}", out_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
