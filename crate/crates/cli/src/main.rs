//! Operator surface: dataset preparation, training, recommendation,
//! re-ranking, evaluation and latency benchmarks.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numeric
//! failure.

mod commands;
mod config;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use dacsr_core::catalog::{AttributeFileFormat, CatalogError};
use dacsr_core::distribution::DistributionError;
use dacsr_core::encoder::{EncoderConfig, ModelError};
use dacsr_core::eval::EvalError;
use dacsr_core::ingest::{IngestError, InteractionFileFormat};
use dacsr_core::rerank::RerankError;
use dacsr_core::tensor::TensorError;
use dacsr_core::trainer::{CheckpointError, TrainConfig, TrainError};

use config::{resolve, resolve_opt, ConfigError, FileConfig};

#[derive(Parser)]
#[command(
    name = "dacsr",
    version,
    about = "Calibrated sequential recommendation: prepare data, train, re-rank, evaluate, benchmark"
)]
struct Cli {
    /// Flat dotted-key JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse logs, filter, split leave-one-out, write a dataset directory.
    Prepare(PrepareArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Write top-K recommendation lists from a checkpoint.
    Recommend(RecommendArgs),
    /// Greedy calibrated re-ranking over top-Z candidates.
    Rerank(RerankArgs),
    /// Accuracy/calibration/diversity metrics over a split.
    Evaluate(EvaluateArgs),
    /// Per-sequence latency of end-to-end scoring vs. re-ranking.
    Bench(BenchArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Interaction log (MovieLens ratings.dat or delimited with header).
    #[arg(long)]
    interactions: Option<PathBuf>,
    /// Attribute file (item_id<TAB>labels or MovieLens movies.dat).
    #[arg(long)]
    attributes: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Minimum interactions per user [default: 5].
    #[arg(long)]
    min_user_core: Option<usize>,
    /// Minimum interactions per item [default: 5].
    #[arg(long)]
    min_item_core: Option<usize>,
    /// Maximum history length kept per prefix [default: 200].
    #[arg(long)]
    max_len: Option<usize>,
    /// Keep only interactions with this behavior label [default: keep all].
    #[arg(long)]
    keep_behavior: Option<String>,
    /// Interaction file format: auto|movielens|delimited [default: auto].
    #[arg(long)]
    interaction_format: Option<String>,
    /// Attribute file format: auto|tsv|movielens [default: auto].
    #[arg(long)]
    attribute_format: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Prepared dataset directory (from `prepare`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model kind: sasrec|dacsr [default: dacsr].
    #[arg(long)]
    model: Option<String>,
    /// Objective for sasrec: accuracy|calibration|weighted [default: accuracy].
    #[arg(long)]
    objective: Option<String>,
    /// RNG seed [default: 42].
    #[arg(long)]
    seed: Option<u64>,
    /// Adam learning rate [default: 0.001].
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Mini-batch size [default: 256].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training epochs [default: 100].
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Encoder pre-training epochs [default: 20].
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    /// Early-stopping patience in epochs; 0 disables [default: 10].
    #[arg(long)]
    patience: Option<usize>,
    /// Hidden dimension d [default: 64].
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// Self-attention blocks [default: 2].
    #[arg(long)]
    num_blocks: Option<usize>,
    /// Attention heads [default: 1].
    #[arg(long)]
    num_heads: Option<usize>,
    /// Dropout rate [default: 0.2].
    #[arg(long)]
    dropout: Option<f64>,
    /// Encoder window; defaults to the dataset's max_len.
    #[arg(long)]
    max_len: Option<usize>,
    /// Accuracy/calibration trade-off lambda [default: 0.5].
    #[arg(long)]
    lambda: Option<f64>,
    /// Soft-distribution temperature tau [default: 1].
    #[arg(long)]
    tau: Option<f64>,
    /// Extractor net layers t [default: 2].
    #[arg(long)]
    extractor_layers: Option<usize>,
    /// Calibration target mode: raw|diversity|masked [default: raw].
    #[arg(long)]
    dist_mode: Option<String>,
    /// Temperature for diversity/masked modes [default: 0.5 / 2.0].
    #[arg(long)]
    tau_div: Option<f64>,
    /// Validation selection metric: recall|mrr [default: recall].
    #[arg(long)]
    select_metric: Option<String>,
    /// Cutoff for the selection metric [default: 20].
    #[arg(long)]
    select_k: Option<usize>,
    /// Let the weighted loss back-propagate into both encoders
    /// (ablation; default keeps them detached).
    #[arg(long)]
    no_detach: bool,
}

#[derive(Args)]
struct RecommendArgs {
    /// Prepared dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output TSV of `user<TAB>item1,item2,...`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// List length K [default: 20].
    #[arg(long)]
    k: Option<usize>,
    /// Split to score: test|valid [default: test].
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args)]
struct RerankArgs {
    /// Prepared dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Trained checkpoint used to generate candidates.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// External candidate file `user<TAB>item:score,...` instead of a
    /// checkpoint.
    #[arg(long)]
    candidate_file: Option<PathBuf>,
    /// Output TSV of re-ranked lists.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Method: calirec|calirec-gc [default: calirec].
    #[arg(long)]
    method: Option<String>,
    /// Trade-off lambda (lambda_max for calirec-gc) [default: 0.5].
    #[arg(long)]
    lambda: Option<f64>,
    /// Final list length K [default: 20].
    #[arg(long)]
    k: Option<usize>,
    /// Candidate pool size Z [default: 100].
    #[arg(long)]
    candidates: Option<usize>,
    /// Smoothing alpha inside the greedy objective [default: 0.01].
    #[arg(long)]
    alpha: Option<f64>,
    /// Split providing histories: test|valid [default: test].
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Prepared dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Trained checkpoint to score with.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Pre-computed recommendation lists to evaluate instead.
    #[arg(long)]
    recs: Option<PathBuf>,
    /// Write the JSON report here (table always prints).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated cutoffs [default: 10,20].
    #[arg(long)]
    k: Option<String>,
    /// Smoothing alpha for C_KL [default: 0.01].
    #[arg(long)]
    alpha: Option<f64>,
    /// Worker threads for metric computation [default: 1].
    #[arg(long)]
    threads: Option<usize>,
    /// Split to evaluate: test|valid [default: test].
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    /// Prepared dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Write the latency table as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Timed passes over the sequences (a warm-up pass is excluded)
    /// [default: 5].
    #[arg(long)]
    repetitions: Option<usize>,
    /// Candidate pool size Z for the re-ranking pipeline [default: 100].
    #[arg(long)]
    z: Option<usize>,
    /// Final list length K [default: 20].
    #[arg(long)]
    k: Option<usize>,
    /// Re-ranking lambda [default: 0.5].
    #[arg(long)]
    lambda: Option<f64>,
    /// Smoothing alpha inside the greedy objective [default: 0.01].
    #[arg(long)]
    alpha: Option<f64>,
    /// Cap the number of test sequences measured [default: all].
    #[arg(long)]
    limit: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Prepare(args) => {
            let opts = commands::PrepareOpts {
                interactions: require(
                    resolve_opt(args.interactions, path_key(&file, "prepare.interactions")?),
                    "--interactions",
                )?,
                attributes: require(
                    resolve_opt(args.attributes, path_key(&file, "prepare.attributes")?),
                    "--attributes",
                )?,
                out: require(resolve_opt(args.out, path_key(&file, "prepare.out")?), "--out")?,
                min_user_core: resolve(
                    args.min_user_core,
                    file.get_usize("prepare.min-user-core")?,
                    5,
                ),
                min_item_core: resolve(
                    args.min_item_core,
                    file.get_usize("prepare.min-item-core")?,
                    5,
                ),
                max_len: resolve(args.max_len, file.get_usize("prepare.max-len")?, 200),
                keep_behavior: resolve_opt(
                    args.keep_behavior,
                    file.get_string("prepare.keep-behavior")?,
                ),
                interaction_format: parse_interaction_format(&resolve(
                    args.interaction_format,
                    file.get_string("prepare.interaction-format")?,
                    "auto".into(),
                ))?,
                attribute_format: parse_attribute_format(&resolve(
                    args.attribute_format,
                    file.get_string("prepare.attribute-format")?,
                    "auto".into(),
                ))?,
            };
            commands::prepare(&opts)
        }
        Command::Train(args) => {
            let data = require(resolve_opt(args.data, path_key(&file, "train.data")?), "--data")?;
            let dataset_max_len = crate::data::load_prepared(&data)?.max_len;
            let patience = resolve(args.patience, file.get_usize("train.patience")?, 10);
            let select_name = resolve(
                args.select_metric,
                file.get_string("train.select-metric")?,
                "recall".into(),
            );
            let select_k = resolve(args.select_k, file.get_usize("train.select-k")?, 20);
            let dist_name = resolve(
                args.dist_mode,
                file.get_string("train.dist-mode")?,
                "raw".into(),
            );
            let tau_div = resolve_opt(args.tau_div, file.get_f64("train.tau-div")?);
            let opts = commands::TrainOpts {
                data,
                out: require(resolve_opt(args.out, path_key(&file, "train.out")?), "--out")?,
                model: resolve(args.model, file.get_string("train.model")?, "dacsr".into()),
                encoder: EncoderConfig {
                    hidden_dim: resolve(args.hidden_dim, file.get_usize("train.hidden-dim")?, 64),
                    num_blocks: resolve(args.num_blocks, file.get_usize("train.num-blocks")?, 2),
                    num_heads: resolve(args.num_heads, file.get_usize("train.num-heads")?, 1),
                    dropout_rate: resolve(args.dropout, file.get_f64("train.dropout")?, 0.2),
                    max_len: resolve(
                        args.max_len,
                        file.get_usize("train.max-len")?,
                        dataset_max_len,
                    ),
                },
                lambda: resolve(args.lambda, file.get_f64("train.lambda")?, 0.5),
                tau: resolve(args.tau, file.get_f64("train.tau")?, 1.0),
                extractor_layers: resolve(
                    args.extractor_layers,
                    file.get_usize("train.extractor-layers")?,
                    2,
                ),
                detach_encoders: !args.no_detach
                    && !file.get_bool("train.no-detach")?.unwrap_or(false),
                objective: resolve(
                    args.objective,
                    file.get_string("train.objective")?,
                    "accuracy".into(),
                ),
                train: TrainConfig {
                    learning_rate: resolve(
                        args.learning_rate,
                        file.get_f64("train.learning-rate")?,
                        0.001,
                    ),
                    batch_size: resolve(args.batch_size, file.get_usize("train.batch-size")?, 256),
                    max_epochs: resolve(args.max_epochs, file.get_usize("train.max-epochs")?, 100),
                    pretrain_epochs: resolve(
                        args.pretrain_epochs,
                        file.get_usize("train.pretrain-epochs")?,
                        20,
                    ),
                    patience: if patience == 0 { None } else { Some(patience) },
                    seed: resolve(args.seed, file.get_u64("seed")?, 42),
                    select_metric: commands::parse_select_metric(&select_name, select_k)?,
                    dist_mode: commands::parse_dist_mode(&dist_name, tau_div)?,
                },
            };
            commands::train(&opts)
        }
        Command::Recommend(args) => {
            let opts = commands::RecommendOpts {
                data: require(resolve_opt(args.data, path_key(&file, "recommend.data")?), "--data")?,
                checkpoint: require(
                    resolve_opt(args.checkpoint, path_key(&file, "recommend.checkpoint")?),
                    "--checkpoint",
                )?,
                out: require(resolve_opt(args.out, path_key(&file, "recommend.out")?), "--out")?,
                k: resolve(args.k, file.get_usize("recommend.k")?, 20),
                split: resolve(args.split, file.get_string("recommend.split")?, "test".into()),
            };
            commands::recommend(&opts)
        }
        Command::Rerank(args) => {
            let opts = commands::RerankOpts {
                data: require(resolve_opt(args.data, path_key(&file, "rerank.data")?), "--data")?,
                checkpoint: resolve_opt(args.checkpoint, path_key(&file, "rerank.checkpoint")?),
                candidate_file: resolve_opt(
                    args.candidate_file,
                    path_key(&file, "rerank.candidate-file")?,
                ),
                out: require(resolve_opt(args.out, path_key(&file, "rerank.out")?), "--out")?,
                method: resolve(args.method, file.get_string("rerank.method")?, "calirec".into()),
                lambda: resolve(args.lambda, file.get_f64("rerank.lambda")?, 0.5),
                k: resolve(args.k, file.get_usize("rerank.k")?, 20),
                candidates: resolve(args.candidates, file.get_usize("rerank.candidates")?, 100),
                alpha: resolve(args.alpha, file.get_f64("rerank.alpha")?, 0.01),
                split: resolve(args.split, file.get_string("rerank.split")?, "test".into()),
            };
            commands::rerank(&opts)
        }
        Command::Evaluate(args) => {
            let cutoffs = commands::parse_cutoffs(&resolve(
                args.k,
                file.get_string("evaluate.k")?,
                "10,20".into(),
            ))?;
            let opts = commands::EvaluateOpts {
                data: require(resolve_opt(args.data, path_key(&file, "evaluate.data")?), "--data")?,
                checkpoint: resolve_opt(args.checkpoint, path_key(&file, "evaluate.checkpoint")?),
                recs: resolve_opt(args.recs, path_key(&file, "evaluate.recs")?),
                out: resolve_opt(args.out, path_key(&file, "evaluate.out")?),
                cutoffs,
                alpha: resolve(args.alpha, file.get_f64("evaluate.alpha")?, 0.01),
                threads: resolve(args.threads, file.get_usize("evaluate.threads")?, 1),
                split: resolve(args.split, file.get_string("evaluate.split")?, "test".into()),
            };
            commands::evaluate(&opts)
        }
        Command::Bench(args) => {
            let opts = commands::BenchOpts {
                data: require(resolve_opt(args.data, path_key(&file, "bench.data")?), "--data")?,
                checkpoint: require(
                    resolve_opt(args.checkpoint, path_key(&file, "bench.checkpoint")?),
                    "--checkpoint",
                )?,
                out: resolve_opt(args.out, path_key(&file, "bench.out")?),
                repetitions: resolve(args.repetitions, file.get_usize("bench.repetitions")?, 5),
                z: resolve(args.z, file.get_usize("bench.z")?, 100),
                k: resolve(args.k, file.get_usize("bench.k")?, 20),
                lambda: resolve(args.lambda, file.get_f64("bench.lambda")?, 0.5),
                alpha: resolve(args.alpha, file.get_f64("bench.alpha")?, 0.01),
                limit: resolve_opt(args.limit, file.get_usize("bench.limit")?),
            };
            commands::bench(&opts)
        }
    }
}

fn path_key(file: &FileConfig, key: &str) -> Result<Option<PathBuf>> {
    Ok(file.get_string(key)?.map(PathBuf::from))
}

fn require<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| ConfigError(format!("{flag} is required (flag or config file)")).into())
}

fn parse_interaction_format(name: &str) -> Result<InteractionFileFormat> {
    match name {
        "auto" => Ok(InteractionFileFormat::Auto),
        "movielens" => Ok(InteractionFileFormat::MovieLensRatings),
        "delimited" => Ok(InteractionFileFormat::Delimited),
        other => Err(ConfigError(format!(
            "unknown interaction format {other:?} (auto|movielens|delimited)"
        ))
        .into()),
    }
}

fn parse_attribute_format(name: &str) -> Result<AttributeFileFormat> {
    match name {
        "auto" => Ok(AttributeFileFormat::Auto),
        "tsv" => Ok(AttributeFileFormat::Tsv),
        "movielens" => Ok(AttributeFileFormat::MovieLens),
        other => Err(ConfigError(format!(
            "unknown attribute format {other:?} (auto|tsv|movielens)"
        ))
        .into()),
    }
}

/// Exit-code mapping: 2 config, 3 data, 4 numeric. Transparent wrapper
/// variants delegate to the wrapped error's class explicitly, because
/// `#[error(transparent)]` splices the inner error out of the chain.
fn classify(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return classify_train(e);
        }
        if let Some(e) = cause.downcast_ref::<TensorError>() {
            return classify_tensor(e);
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            return classify_model(e);
        }
        if let Some(e) = cause.downcast_ref::<RerankError>() {
            return classify_rerank(e);
        }
        if let Some(e) = cause.downcast_ref::<DistributionError>() {
            return classify_distribution(e);
        }
        if let Some(e) = cause.downcast_ref::<EvalError>() {
            return classify_eval(e);
        }
        if cause.downcast_ref::<CatalogError>().is_some()
            || cause.downcast_ref::<IngestError>().is_some()
            || cause.downcast_ref::<CheckpointError>().is_some()
            || cause.downcast_ref::<std::io::Error>().is_some()
        {
            return 3;
        }
    }
    3
}

fn classify_train(e: &TrainError) -> u8 {
    match e {
        TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient { .. } => 4,
        TrainError::Model(inner) => classify_model(inner),
        TrainError::Tensor(inner) => classify_tensor(inner),
        TrainError::Distribution(inner) => classify_distribution(inner),
        TrainError::Checkpoint(_) => 3,
        _ => 3,
    }
}

fn classify_model(e: &ModelError) -> u8 {
    match e {
        ModelError::BadConfig(_) | ModelError::BadLambda(_) => 2,
        ModelError::Tensor(inner) => classify_tensor(inner),
        ModelError::Distribution(inner) => classify_distribution(inner),
        _ => 3,
    }
}

fn classify_tensor(e: &TensorError) -> u8 {
    match e {
        TensorError::NonFinite(_) => 4,
        TensorError::NonPositiveTemperature(_) | TensorError::BadDropoutRate(_) => 2,
        _ => 3,
    }
}

fn classify_rerank(e: &RerankError) -> u8 {
    match e {
        RerankError::BadLambda(_) | RerankError::ZeroK | RerankError::KExceedsCandidates { .. } => {
            2
        }
        RerankError::Distribution(inner) => classify_distribution(inner),
        _ => 3,
    }
}

fn classify_distribution(e: &DistributionError) -> u8 {
    match e {
        DistributionError::NonPositiveTemperature(_) | DistributionError::InvalidAlpha(_) => 2,
        DistributionError::NonFiniteScore(_) => 4,
        _ => 3,
    }
}

fn classify_eval(e: &EvalError) -> u8 {
    match e {
        EvalError::TooFewRepetitions(_) | EvalError::IldNeedsTwo(_) => 2,
        EvalError::Distribution(inner) => classify_distribution(inner),
        _ => 3,
    }
}
