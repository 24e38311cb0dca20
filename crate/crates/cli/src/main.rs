use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use evgraph::datagen::{load_dataset_dir, write_dataset, Dataset};
use evgraph::diagnostics::GradCheckSpec;
use evgraph::graph::GraphKind;
use evgraph::model::Checkpoint;
use evgraph_cli::ablate::{render_table, run_ablation, write_ablation};
use evgraph_cli::{
    cmd_gradcheck, cmd_predict, cmd_train, cmd_uncertainty, ensure_dir, gradcheck_failures, load_data, predicted_classes,
    test_accuracy, CliError, CliResult, RunConfig, CONFIG_HELP, PREDICTIONS_FILE, UNCERTAINTY_FILE,
};

const THREADS_VAR: &str = "EVGRAPH_THREADS";

#[derive(Parser)]
#[command(
    name = "evgraph",
    version,
    about = "Graph convolutional networks on learned population graphs, with Monte-Carlo edge-dropout uncertainty",
    after_help = CONFIG_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoint.json and history.csv
    #[command(after_help = CONFIG_HELP)]
    Train(TrainArgs),
    /// Eval-mode class probabilities; writes predictions.csv
    #[command(after_help = CONFIG_HELP)]
    Predict(PredictArgs),
    /// Monte-Carlo edge-dropout report; writes uncertainty.csv
    #[command(after_help = CONFIG_HELP)]
    Uncertainty(UncertaintyArgs),
    /// Compare graph constructions over seeds; writes ablation_runs.csv and ablation_summary.csv
    #[command(after_help = CONFIG_HELP)]
    Ablate(AblateArgs),
    /// Check analytic gradients of every parameter group against finite differences
    #[command(after_help = CONFIG_HELP)]
    Gradcheck(GradcheckArgs),
    /// Write the synthetic population as features.csv, metadata.csv and labels.csv
    #[command(after_help = CONFIG_HELP)]
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (JSON)
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides train.seed
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Overrides the configured graph construction: adaptive, random or affinity
    #[arg(long, value_name = "KIND")]
    graph: Option<GraphKind>,
}

/// Where the subjects come from: a config (file or synthetic data) or a
/// directory of CSVs.
#[derive(Args)]
#[group(required = true, multiple = false)]
struct DataSource {
    /// Run configuration whose data section (or synthetic population) is used
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Directory with features.csv, metadata.csv and labels.csv
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint written by `train`
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: DataSource,
    /// Output directory
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct UncertaintyArgs {
    /// Checkpoint written by `train`
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: DataSource,
    /// Monte-Carlo passes [default: train.t_mc of the config, else 128]
    #[arg(long, value_name = "INT", value_parser = clap::value_parser!(u64).range(1..))]
    t_passes: Option<u64>,
    /// Seed of the edge-dropout draws [default: the checkpoint's training seed]
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Run configuration (JSON); the ablate section sets the grid
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Runs a single seed instead of ablate.seeds
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Runs a single graph construction (adaptive, random or affinity) instead of ablate.graphs
    #[arg(long, value_name = "KIND")]
    graph: Option<GraphKind>,
    /// Overrides train.t_mc
    #[arg(long, value_name = "INT", value_parser = clap::value_parser!(u64).range(1..))]
    t_passes: Option<u64>,
    /// Output directory
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Chebyshev orders to check, comma separated
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    orders: Vec<usize>,
    /// Subjects in the test population
    #[arg(long, default_value_t = 6, value_parser = clap::value_parser!(u64).range(2..=10))]
    subjects: u64,
    /// Imaging feature columns
    #[arg(long, default_value_t = 4)]
    input_dim: usize,
    /// Metadata columns
    #[arg(long, default_value_t = 3)]
    metadata_dim: usize,
    /// Graph convolution layers
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 3)]
    hidden_width: usize,
    /// Encoder output width
    #[arg(long, default_value_t = 5)]
    latent_dim: usize,
    #[arg(long, default_value_t = 6)]
    predictor_hidden: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, value_name = "INT", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    /// Run configuration whose synthetic section is used [default: built-in defaults]
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides synthetic.seed
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, value_name = "DIR", default_value = "data")]
    out: PathBuf,
}

fn load_source(source: &DataSource) -> CliResult<(Dataset, Option<RunConfig>)> {
    match (&source.config, &source.data) {
        (Some(path), _) => {
            let config = RunConfig::load(path)?;
            Ok((load_data(&config)?, Some(config)))
        }
        (None, Some(dir)) => Ok((load_dataset_dir(dir)?, None)),
        (None, None) => Err(CliError::usage("either --config or --data is required")),
    }
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.4}"))
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Train(args) => {
            let mut config = RunConfig::load(&args.config)?;
            if let Some(seed) = args.seed {
                config.train.seed = seed;
            }
            if let Some(graph) = args.graph {
                config.graph = graph;
            }
            let outcome = cmd_train(&config, &args.out)?;
            println!(
                "trained {} epochs on the {} graph; final val_accuracy={}",
                outcome.history.len(),
                config.graph.as_str(),
                fmt_opt(outcome.final_val_accuracy())
            );
            println!("wrote {}", args.out.display());
        }
        Command::Predict(args) => {
            let checkpoint = load_checkpoint(&args.checkpoint)?;
            let (dataset, _) = load_source(&args.source)?;
            let probs = cmd_predict(&checkpoint, &dataset, &args.out)?;
            let acc = test_accuracy(&dataset, &predicted_classes(&probs))?;
            println!("test_accuracy={}", fmt_opt(acc));
            println!("wrote {}", args.out.join(PREDICTIONS_FILE).display());
        }
        Command::Uncertainty(args) => {
            let checkpoint = load_checkpoint(&args.checkpoint)?;
            let (dataset, config) = load_source(&args.source)?;
            let t = args
                .t_passes
                .map(|t| t as usize)
                .or(config.map(|c| c.train.t_mc))
                .unwrap_or(evgraph::train::TrainConfig::default().t_mc);
            let seed = args.seed.unwrap_or(checkpoint.seed);
            let report = cmd_uncertainty(&checkpoint, &dataset, t, seed, &args.out)?;
            let test = dataset.label_mask()?.indices(evgraph::train::Split::Test);
            println!(
                "T={t} mean_entropy_test={} mean_entropy_all={:.4} mced_test_accuracy={}",
                fmt_opt(report.mean_entropy(&test)),
                report.mean_entropy_all(),
                fmt_opt(test_accuracy(&dataset, &report.predictions())?)
            );
            println!("wrote {}", args.out.join(UNCERTAINTY_FILE).display());
        }
        Command::Ablate(args) => {
            let mut config = RunConfig::load(&args.config)?;
            if let Some(seed) = args.seed {
                config.ablate.seeds = vec![seed];
            }
            if let Some(graph) = args.graph {
                config.ablate.graphs = vec![graph];
            }
            if let Some(t) = args.t_passes {
                config.train.t_mc = t as usize;
            }
            let ablation = run_ablation(&config)?;
            ensure_dir(&args.out)?;
            write_ablation(&ablation, &args.out)?;
            print!("{}", render_table(&ablation));
            println!("wrote {}", args.out.display());
        }
        Command::Gradcheck(args) => {
            if args.orders.is_empty() {
                return Err(CliError::usage("--orders needs at least one order"));
            }
            let spec = GradCheckSpec {
                subjects: args.subjects as usize,
                input_dim: args.input_dim,
                metadata_dim: args.metadata_dim,
                order: 0,
                layers: args.layers,
                hidden_width: args.hidden_width,
                latent_dim: args.latent_dim,
                predictor_hidden: args.predictor_hidden,
                classes: args.classes,
                seed: args.seed,
            };
            let reports = cmd_gradcheck(&spec, &args.orders)?;
            for r in &reports {
                for g in &r.groups {
                    println!(
                        "K={} {:<14} max_rel_err={:.3e} max_abs_grad={:.3e}",
                        r.spec.order, g.group, g.max_relative_error, g.max_abs_gradient
                    );
                }
                println!("K={} edge_weight_grad_norm={:.3e}", r.spec.order, r.edge_weight_grad_norm);
            }
            let failures = gradcheck_failures(&reports);
            if !failures.is_empty() {
                return Err(CliError::runtime(
                    "gradcheck",
                    format!("gradient check failed for {}", failures.join(", ")),
                ));
            }
            println!("gradient check passed");
        }
        Command::Synth(args) => {
            let mut config = match &args.config {
                Some(path) => RunConfig::load(path)?,
                None => RunConfig::default(),
            };
            if let Some(seed) = args.seed {
                config.synthetic.seed = seed;
            }
            let dataset = evgraph::datagen::generate_synthetic(&config.synthetic)?;
            ensure_dir(&args.out)?;
            write_dataset(&dataset, &args.out)?;
            println!("wrote {} subjects to {}", dataset.len(), args.out.display());
        }
    }
    Ok(())
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| CliError::usage(format!("{THREADS_VAR} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::runtime("threads", e.to_string()))
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("{}", e.line());
    ExitCode::from(e.exit_code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid usage");
            return fail(&CliError::usage(first.trim_start_matches("error: ")));
        }
    };
    if let Err(e) = configure_threads() {
        return fail(&e);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
