use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod output;
mod settings;

use settings::ConfigArgs;

/// Train and evaluate direct binary embeddings.
#[derive(Debug, Parser)]
#[command(name = "dbe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write a checkpoint, training log and manifest.
    Train(TrainArgs),
    /// Threshold embeddings of an image set into a code file.
    ExportCodes(ExportArgs),
    /// Linear classifier accuracy on code files.
    EvalClassify(ClassifyArgs),
    /// Hamming ranking mAP and precision@k.
    EvalRetrieve(RetrieveArgs),
    /// Overall precision, recall and F1 of top-K label predictions.
    EvalAnnotate(AnnotateArgs),
    /// Activation histogram, saturation fractions and density check.
    AnalyzeActivations(AnalyzeArgs),
    /// Train one model per quantization weight and score its codes.
    LambdaSweep(SweepArgs),
    /// Build a multilabel set of composited digits.
    MakeSynth(SynthArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// IDX image file.
    #[arg(long)]
    images: PathBuf,
    /// Optional labels (IDX or label matrix), copied next to the codes.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ClassifyArgs {
    #[arg(long)]
    train_codes: PathBuf,
    #[arg(long)]
    train_labels: PathBuf,
    #[arg(long)]
    test_codes: PathBuf,
    #[arg(long)]
    test_labels: PathBuf,
    /// Class count for IDX label files.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// L2 strength of the hinge-loss classifier.
    #[arg(long, default_value_t = 1e-4)]
    reg: f64,
    #[arg(long, default_value_t = 50)]
    svm_epochs: usize,
    #[arg(long, default_value_t = 0)]
    svm_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RetrieveArgs {
    #[arg(long)]
    db_codes: PathBuf,
    #[arg(long)]
    db_labels: PathBuf,
    #[arg(long)]
    query_codes: PathBuf,
    #[arg(long)]
    query_labels: PathBuf,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Queries are the database itself; each query skips its own row.
    #[arg(long)]
    exclude_self: bool,
    /// Comma-separated cutoffs for precision@k.
    #[arg(long, value_delimiter = ',', default_value = "100")]
    precision_at: Vec<usize>,
    /// Also dump the top entries of every ranking as TSV.
    #[arg(long)]
    dump_rankings: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AnnotateArgs {
    /// Ground-truth label matrix.
    #[arg(long)]
    labels: PathBuf,
    /// Checkpoint whose logits are ranked.
    #[arg(long, requires = "images", conflicts_with = "predictions")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    /// Precomputed predicted label matrix.
    #[arg(long, required_unless_present = "checkpoint")]
    predictions: Option<PathBuf>,
    /// Labels predicted per sample.
    #[arg(short, long, default_value_t = 3)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    images: PathBuf,
    /// Bins of the density comparison grid.
    #[arg(long, default_value_t = 30)]
    bins: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated quantization weights.
    #[arg(long, value_delimiter = ',', default_value = "0,1e-4,1e-2,1e-1")]
    lambdas: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Source IDX images (28 x 28 digits).
    #[arg(long)]
    images: PathBuf,
    /// Source IDX class labels.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(&a.config, &a.out),
        Command::ExportCodes(a) => commands::export_codes(&a.checkpoint, &a.images, a.labels.as_deref(), &a.out),
        Command::EvalClassify(a) => commands::eval_classify(&a),
        Command::EvalRetrieve(a) => commands::eval_retrieve(&a),
        Command::EvalAnnotate(a) => commands::eval_annotate(&a),
        Command::AnalyzeActivations(a) => commands::analyze(&a.checkpoint, &a.images, a.bins, &a.out),
        Command::LambdaSweep(a) => commands::lambda_sweep(&a.config, &a.lambdas, &a.out),
        Command::MakeSynth(a) => commands::make_synth(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
