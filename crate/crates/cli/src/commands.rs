//! Subcommand implementations.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use dacsr_core::catalog::{build_catalog, load_attribute_records, AttributeFileFormat};
use dacsr_core::dacsr::DacsrConfig;
use dacsr_core::distribution::DistMode;
use dacsr_core::encoder::EncoderConfig;
use dacsr_core::eval::{
    bench_latency, evaluate_corpus, load_rec_lists, rec_lists_to_string, EvalError,
};
use dacsr_core::ingest::{
    behavior_filter, kcore_filter, load_interactions, split_and_augment, DatasetSplit,
    InteractionFileFormat,
};
use dacsr_core::rerank::{
    coverage_lambda, greedy_rerank, load_candidate_file, CandidateList,
};
use dacsr_core::tensor::ParamSet;
use dacsr_core::trainer::{
    restore_model, train_dacsr, train_sasrec, Model, ModelCheckpoint, Objective, ScoreCache,
    SelectMetric, TrainConfig,
};
use dacsr_core::InteractionSequence;

use crate::data::{load_prepared, write_prepared};

pub struct PrepareOpts {
    pub interactions: PathBuf,
    pub attributes: PathBuf,
    pub out: PathBuf,
    pub min_user_core: usize,
    pub min_item_core: usize,
    pub max_len: usize,
    pub keep_behavior: Option<String>,
    pub interaction_format: InteractionFileFormat,
    pub attribute_format: AttributeFileFormat,
}

pub fn prepare(opts: &PrepareOpts) -> Result<()> {
    let records = load_attribute_records(&opts.attributes, opts.attribute_format)?;
    let catalog = build_catalog(&records)?;
    let raw = load_interactions(&opts.interactions, opts.interaction_format)?;
    let filtered = behavior_filter(&raw, opts.keep_behavior.as_deref());
    let cored = kcore_filter(&filtered, opts.min_user_core, opts.min_item_core)?;
    let split = split_and_augment(&cored, opts.max_len, &catalog)?;
    write_prepared(&opts.out, &split)?;
    let s = &split.stats;
    println!("wrote prepared dataset to {}", opts.out.display());
    println!("  users:               {}", s.users);
    println!("  skipped users (<3):  {}", s.skipped_users);
    println!("  items:               {}", s.items);
    println!("  attributes:          {}", s.attributes);
    println!("  interactions:        {}", s.interactions);
    println!("  training pairs:      {}", s.train_pairs);
    println!("  validation cases:    {}", s.validation_cases);
    println!("  test cases:          {}", s.test_cases);
    println!("  mean sequence len:   {:.2}", s.mean_sequence_length);
    println!("  max_len:             {}", s.max_len);
    Ok(())
}

pub struct TrainOpts {
    pub data: PathBuf,
    pub out: PathBuf,
    pub model: String,
    pub encoder: EncoderConfig,
    pub lambda: f64,
    pub tau: f64,
    pub extractor_layers: usize,
    pub detach_encoders: bool,
    pub objective: String,
    pub train: TrainConfig,
}

pub fn train(opts: &TrainOpts) -> Result<()> {
    let dataset = load_prepared(&opts.data)?;
    let (_params, _model, outcome) = match opts.model.as_str() {
        "dacsr" => {
            let config = DacsrConfig {
                encoder: opts.encoder,
                extractor_layers: opts.extractor_layers,
                lambda: opts.lambda,
                tau: opts.tau,
                detach_encoders: opts.detach_encoders,
            };
            train_dacsr(&dataset, config, &opts.train)?
        }
        "sasrec" => {
            let objective = match opts.objective.as_str() {
                "accuracy" => Objective::Accuracy,
                "calibration" => Objective::Calibration,
                "weighted" => Objective::Weighted {
                    lambda: opts.lambda,
                },
                other => bail!(crate::config::ConfigError(format!(
                    "unknown objective {other:?} (accuracy|calibration|weighted)"
                ))),
            };
            train_sasrec(&dataset, opts.encoder, objective, opts.tau, &opts.train)?
        }
        other => bail!(crate::config::ConfigError(format!(
            "unknown model {other:?} (sasrec|dacsr)"
        ))),
    };
    for h in &outcome.history {
        println!(
            "epoch {:>3}  train loss {:.5}  validation {:.5}",
            h.epoch, h.mean_train_loss, h.validation_metric
        );
    }
    outcome.checkpoint.save(&opts.out)?;
    println!(
        "wrote checkpoint {} (best epoch {}, validation {:.5})",
        opts.out.display(),
        outcome.best_epoch,
        outcome.best_metric
    );
    Ok(())
}

fn load_model(path: &Path, dataset: &DatasetSplit) -> Result<(ParamSet<f32>, Model)> {
    let ckpt = ModelCheckpoint::load(path)?;
    Ok(restore_model(&ckpt, &dataset.catalog)?)
}

/// Truncates a history to the model's window before scoring.
fn model_scores(
    model: &Model,
    params: &ParamSet<f32>,
    cache: &ScoreCache<f32>,
    seq: &InteractionSequence,
) -> Result<Vec<f64>> {
    let items = seq.items();
    let start = items.len().saturating_sub(model.max_len());
    let scores = model.infer_scores(params, &items[start..], cache)?;
    Ok(scores.iter().map(|&v| v as f64).collect())
}

pub struct RecommendOpts {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub k: usize,
    pub split: String,
}

fn split_cases<'a>(dataset: &'a DatasetSplit, split: &str) -> Result<&'a [dacsr_core::ingest::SplitPair]> {
    match split {
        "test" => Ok(&dataset.test),
        "valid" | "validation" => Ok(&dataset.validation),
        other => bail!(crate::config::ConfigError(format!(
            "unknown split {other:?} (test|valid)"
        ))),
    }
}

pub fn recommend(opts: &RecommendOpts) -> Result<()> {
    let dataset = load_prepared(&opts.data)?;
    let (params, model) = load_model(&opts.checkpoint, &dataset)?;
    let cache = model.build_score_cache(&params)?;
    let cases = split_cases(&dataset, &opts.split)?;
    let mut lists = Vec::with_capacity(cases.len());
    for pair in cases {
        let scores = model_scores(&model, &params, &cache, &pair.prefix)?;
        let top = CandidateList::from_scores(&scores, opts.k)?;
        lists.push((pair.prefix.user_id().to_string(), top.items().to_vec()));
    }
    fs::write(&opts.out, rec_lists_to_string(&lists, &dataset.catalog)?)
        .with_context(|| format!("writing {}", opts.out.display()))?;
    println!(
        "wrote top-{} lists for {} sequences to {}",
        opts.k,
        lists.len(),
        opts.out.display()
    );
    Ok(())
}

pub struct RerankOpts {
    pub data: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub candidate_file: Option<PathBuf>,
    pub out: PathBuf,
    pub method: String,
    pub lambda: f64,
    pub k: usize,
    pub candidates: usize,
    pub alpha: f64,
    pub split: String,
}

pub fn rerank(opts: &RerankOpts) -> Result<()> {
    let dataset = load_prepared(&opts.data)?;
    let cases = split_cases(&dataset, &opts.split)?;

    // Candidate lists come either from a trained model (top-Z scores) or
    // from an external candidate file keyed by user id.
    let per_user: Vec<(String, CandidateList, &InteractionSequence)> = match (
        &opts.checkpoint,
        &opts.candidate_file,
    ) {
        (Some(ckpt), None) => {
            let (params, model) = load_model(ckpt, &dataset)?;
            let cache = model.build_score_cache(&params)?;
            let mut out = Vec::with_capacity(cases.len());
            for pair in cases {
                let scores = model_scores(&model, &params, &cache, &pair.prefix)?;
                let cands = CandidateList::from_scores(&scores, opts.candidates)?;
                out.push((pair.prefix.user_id().to_string(), cands, &pair.prefix));
            }
            out
        }
        (None, Some(file)) => {
            let by_user: HashMap<&str, &InteractionSequence> = cases
                .iter()
                .map(|p| (p.prefix.user_id(), &p.prefix))
                .collect();
            let mut out = Vec::new();
            for (user, cands) in load_candidate_file(file, &dataset.catalog)? {
                let seq = by_user.get(user.as_str()).ok_or_else(|| {
                    anyhow!("candidate file user {user:?} has no sequence in split {}", opts.split)
                })?;
                out.push((user, cands, *seq));
            }
            out
        }
        _ => bail!(crate::config::ConfigError(
            "rerank needs exactly one of --checkpoint or --candidate-file".into()
        )),
    };

    let mut lists = Vec::with_capacity(per_user.len());
    for (user, cands, seq) in &per_user {
        let p_hist = dacsr_core::distribution::history_distribution(seq, &dataset.catalog)?;
        let lambda = match opts.method.as_str() {
            "calirec" => opts.lambda,
            "calirec-gc" => coverage_lambda(seq, &dataset.catalog, opts.lambda)?,
            other => bail!(crate::config::ConfigError(format!(
                "unknown method {other:?} (calirec|calirec-gc)"
            ))),
        };
        let list = greedy_rerank(cands, &p_hist, lambda, opts.k, &dataset.catalog, opts.alpha)?;
        lists.push((user.clone(), list));
    }
    fs::write(&opts.out, rec_lists_to_string(&lists, &dataset.catalog)?)
        .with_context(|| format!("writing {}", opts.out.display()))?;
    println!(
        "wrote {} re-ranked top-{} lists ({}) to {}",
        lists.len(),
        opts.k,
        opts.method,
        opts.out.display()
    );
    Ok(())
}

pub struct EvaluateOpts {
    pub data: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub recs: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub cutoffs: Vec<usize>,
    pub alpha: f64,
    pub threads: usize,
    pub split: String,
}

pub fn evaluate(opts: &EvaluateOpts) -> Result<()> {
    let dataset = load_prepared(&opts.data)?;
    let cases = split_cases(&dataset, &opts.split)?;
    let max_k = opts.cutoffs.iter().copied().max().unwrap_or(0);
    if max_k == 0 {
        bail!(crate::config::ConfigError("--k needs at least one cutoff".into()));
    }

    let mut report = match (&opts.checkpoint, &opts.recs) {
        (Some(ckpt), None) => {
            let (params, model) = load_model(ckpt, &dataset)?;
            let cache = model.build_score_cache(&params)?;
            evaluate_corpus(
                cases,
                &dataset.catalog,
                &opts.cutoffs,
                opts.alpha,
                opts.threads,
                |seq| {
                    let scores = model_scores(&model, &params, &cache, seq)
                        .map_err(|e| EvalError::Parse {
                            line: 0,
                            reason: e.to_string(),
                        })?;
                    let top = CandidateList::from_scores(&scores, max_k)
                        .map_err(|e| EvalError::Parse {
                            line: 0,
                            reason: e.to_string(),
                        })?;
                    Ok(top.items().to_vec())
                },
            )?
        }
        (None, Some(recs)) => {
            let lists = load_rec_lists(recs, &dataset.catalog)?;
            let by_user: HashMap<String, Vec<usize>> = lists.into_iter().collect();
            let covered: Vec<dacsr_core::ingest::SplitPair> = cases
                .iter()
                .filter(|p| by_user.contains_key(p.prefix.user_id()))
                .cloned()
                .collect();
            if covered.len() < cases.len() {
                println!(
                    "note: recommendation file covers {} of {} sequences",
                    covered.len(),
                    cases.len()
                );
            }
            evaluate_corpus(
                &covered,
                &dataset.catalog,
                &opts.cutoffs,
                opts.alpha,
                opts.threads,
                |seq| {
                    Ok(by_user
                        .get(seq.user_id())
                        .expect("covered cases only")
                        .clone())
                },
            )?
        }
        _ => bail!(crate::config::ConfigError(
            "evaluate needs exactly one of --checkpoint or --recs".into()
        )),
    };

    report.config = serde_json::json!({
        "data": opts.data.display().to_string(),
        "split": opts.split,
        "k": opts.cutoffs,
        "alpha": opts.alpha,
        "threads": opts.threads,
        "source": opts.checkpoint.as_ref().map(|p| p.display().to_string())
            .or_else(|| opts.recs.as_ref().map(|p| p.display().to_string())),
    });
    print!("{}", report.to_table());
    if let Some(out) = &opts.out {
        fs::write(out, report.to_json()).with_context(|| format!("writing {}", out.display()))?;
        println!("wrote report to {}", out.display());
    }
    Ok(())
}

pub struct BenchOpts {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub out: Option<PathBuf>,
    pub repetitions: usize,
    pub z: usize,
    pub k: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub limit: Option<usize>,
}

pub fn bench(opts: &BenchOpts) -> Result<()> {
    let dataset = load_prepared(&opts.data)?;
    let (params, model) = load_model(&opts.checkpoint, &dataset)?;
    let cache = model.build_score_cache(&params)?;
    let mut sequences: Vec<InteractionSequence> = dataset
        .test
        .iter()
        .map(|p| p.prefix.clone())
        .collect();
    if let Some(limit) = opts.limit {
        sequences.truncate(limit);
    }

    // End-to-end model: score everything, take the top K.
    let model_scorer = |seq: &InteractionSequence| -> Vec<usize> {
        let scores = model_scores(&model, &params, &cache, seq).expect("scoring");
        CandidateList::from_scores(&scores, opts.k)
            .expect("top-k")
            .items()
            .to_vec()
    };
    // Post-processing pipeline: same scores, top-Z candidates, greedy
    // calibrated re-ranking down to K.
    let rerank_scorer = |seq: &InteractionSequence| -> Vec<usize> {
        let scores = model_scores(&model, &params, &cache, seq).expect("scoring");
        let cands = CandidateList::from_scores(&scores, opts.z).expect("top-z");
        let p_hist =
            dacsr_core::distribution::history_distribution(seq, &dataset.catalog).expect("history");
        greedy_rerank(
            &cands,
            &p_hist,
            opts.lambda,
            opts.k.min(cands.len()),
            &dataset.catalog,
            opts.alpha,
        )
        .expect("rerank")
    };

    let t_model = bench_latency(model_scorer, &sequences, opts.repetitions)?;
    let t_rerank = bench_latency(rerank_scorer, &sequences, opts.repetitions)?;

    let table = format!(
        "{:<24} {:>16} {:>10}\n{:<24} {:>16.6e} {:>10.2}\n{:<24} {:>16.6e} {:>10.2}\n",
        "scorer",
        "mean s/sequence",
        "ratio",
        "model-top-k",
        t_model,
        1.0,
        "calirec-rerank",
        t_rerank,
        t_rerank / t_model
    );
    print!("{table}");
    println!(
        "({} sequences, {} repetitions, Z={}, K={}, single-threaded)",
        sequences.len(),
        opts.repetitions,
        opts.z,
        opts.k
    );
    if let Some(out) = &opts.out {
        let json = serde_json::json!({
            "sequences": sequences.len(),
            "repetitions": opts.repetitions,
            "z": opts.z,
            "k": opts.k,
            "model_seconds_per_sequence": t_model,
            "rerank_seconds_per_sequence": t_rerank,
            "ratio": t_rerank / t_model,
        });
        fs::write(out, serde_json::to_string_pretty(&json)?)
            .with_context(|| format!("writing {}", out.display()))?;
        println!("wrote latency table to {}", out.display());
    }
    Ok(())
}

/// Shared parser for `--k 10,20` style cutoff lists.
pub fn parse_cutoffs(raw: &str) -> Result<Vec<usize>> {
    let cutoffs: Result<Vec<usize>, _> = raw
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect();
    let cutoffs = cutoffs.map_err(|_| {
        crate::config::ConfigError(format!("bad cutoff list {raw:?}; expected e.g. 10,20"))
    })?;
    if cutoffs.is_empty() || cutoffs.contains(&0) {
        bail!(crate::config::ConfigError(
            "cutoffs must be positive integers".into()
        ));
    }
    Ok(cutoffs)
}

/// Maps `--select-metric`/`--select-k` to the trainer enum.
pub fn parse_select_metric(name: &str, k: usize) -> Result<SelectMetric> {
    match name {
        "recall" => Ok(SelectMetric::Recall(k)),
        "mrr" => Ok(SelectMetric::Mrr(k)),
        other => bail!(crate::config::ConfigError(format!(
            "unknown selection metric {other:?} (recall|mrr)"
        ))),
    }
}

/// Maps `--dist-mode`/`--tau-div` to the distribution mode, applying the
/// per-mode temperature defaults (0.5 for diversity, 2.0 for masked).
pub fn parse_dist_mode(name: &str, tau_div: Option<f64>) -> Result<DistMode> {
    match name {
        "raw" => Ok(DistMode::Raw),
        "diversity" => Ok(DistMode::Diversity {
            tau_div: tau_div.unwrap_or(0.5),
        }),
        "masked" => Ok(DistMode::Masked {
            tau_div: tau_div.unwrap_or(2.0),
        }),
        other => bail!(crate::config::ConfigError(format!(
            "unknown distribution mode {other:?} (raw|diversity|masked)"
        ))),
    }
}
