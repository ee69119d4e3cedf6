//! Optimization loop: Adam updates, pre-training initialization,
//! mini-batch training with per-epoch shuffling, validation-based model
//! selection, and binary checkpoints.
//!
//! Training runs in `f32`, which also makes the 32-bit checkpoint
//! round-trip bitwise lossless. Gradient verification lives in the
//! tensor module and always runs in `f64`.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamError, AdamHyper, AdamState};
pub use checkpoint::{
    CheckpointError, ModelCheckpoint, MomentBlob, OptimizerSnapshot, ParamBlob, FORMAT_VERSION,
    MAGIC,
};

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::ItemCatalog;
use crate::dacsr::{DacsrConfig, DacsrModel};
use crate::distribution::{history_distribution, DistMode, DistributionError};
use crate::encoder::{
    accuracy_loss, attr_matrix_node, calibration_loss_with, dist_node, score_all, EncoderConfig,
    ModelError, SasRecEncoder, SequenceEncoder,
};
use crate::ingest::DatasetSplit;
use crate::tensor::{Graph, NodeId, ParamId, ParamSet, Real, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("non-finite loss at epoch {epoch}, batch {batch}; training aborted")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite gradient in {param:?} at epoch {epoch}, batch {batch}; step aborted")]
    NonFiniteGradient {
        param: String,
        epoch: usize,
        batch: usize,
    },
    #[error("checkpoint was trained over {checkpoint_items} items but the catalog has {catalog_items}")]
    CatalogMismatch {
        checkpoint_items: usize,
        catalog_items: usize,
    },
    #[error("checkpoint carries no usable model description: {0}")]
    BadModelSpec(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
}

/// What a single-encoder model optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "objective", rename_all = "snake_case")]
pub enum Objective {
    Accuracy,
    Calibration,
    Weighted { lambda: f64 },
}

/// A single sequence encoder with a scoring head and one objective.
#[derive(Debug, Clone)]
pub struct EncoderModel {
    pub encoder: SasRecEncoder,
    pub objective: Objective,
    pub tau: f64,
}

impl EncoderModel {
    pub fn new(encoder: SasRecEncoder, objective: Objective, tau: f64) -> Self {
        Self {
            encoder,
            objective,
            tau,
        }
    }

    fn needs_attr_node(&self) -> bool {
        !matches!(self.objective, Objective::Accuracy)
    }

    fn sample_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        prefix: &[usize],
        target: usize,
        target_dist: &[f64],
        attr: Option<NodeId>,
    ) -> Result<NodeId, ModelError> {
        let h = self.encoder.encode(g, params, prefix)?;
        let scores = score_all(g, params, h, self.encoder.item_embeddings())?;
        match self.objective {
            Objective::Accuracy => accuracy_loss(g, scores, target),
            Objective::Calibration => {
                let t = dist_node(g, target_dist)?;
                calibration_loss_with(g, scores, t, attr.expect("attr node"), self.tau)
            }
            Objective::Weighted { lambda } => {
                let t = dist_node(g, target_dist)?;
                crate::dacsr::weighted_loss_on_scores(
                    g,
                    scores,
                    target,
                    t,
                    attr.expect("attr node"),
                    lambda,
                    self.tau,
                )
            }
        }
    }
}

/// Per-model cache of the sequence-independent part of scoring.
pub enum ScoreCache<T> {
    None,
    AggregatedEmbeddings(Tensor<T>),
}

/// The trainable model kinds the loop understands.
#[derive(Debug, Clone)]
pub enum Model {
    Sasrec(EncoderModel),
    Dacsr(DacsrModel),
}

impl Model {
    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Model::Sasrec(m) => m.encoder.param_ids(),
            Model::Dacsr(m) => m.param_ids(),
        }
    }

    pub fn max_len(&self) -> usize {
        match self {
            Model::Sasrec(m) => m.encoder.config().max_len,
            Model::Dacsr(m) => m.accuracy_encoder().config().max_len,
        }
    }

    /// Ranking scores over the full item set, `1 x |I|`.
    pub fn scores<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        seq: &[usize],
    ) -> Result<NodeId, ModelError> {
        match self {
            Model::Sasrec(m) => {
                let h = m.encoder.encode(g, params, seq)?;
                score_all(g, params, h, m.encoder.item_embeddings())
            }
            Model::Dacsr(m) => m.scores(g, params, seq),
        }
    }

    /// Precomputes the sequence-independent part of scoring.
    pub fn build_score_cache<T: Real>(
        &self,
        params: &ParamSet<T>,
    ) -> Result<ScoreCache<T>, ModelError> {
        match self {
            Model::Sasrec(_) => Ok(ScoreCache::None),
            Model::Dacsr(m) => Ok(ScoreCache::AggregatedEmbeddings(
                m.aggregated_embeddings(params)?,
            )),
        }
    }

    pub fn scores_with_cache<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        seq: &[usize],
        cache: &ScoreCache<T>,
    ) -> Result<NodeId, ModelError> {
        match (self, cache) {
            (Model::Dacsr(m), ScoreCache::AggregatedEmbeddings(e_a)) => {
                m.scores_cached(g, params, seq, e_a)
            }
            _ => self.scores(g, params, seq),
        }
    }

    /// Inference fast path: value-identical to [`Self::scores_with_cache`]
    /// but scores against raw parameter values instead of pushing the
    /// full embedding matrix through the graph.
    pub fn infer_scores<T: Real>(
        &self,
        params: &ParamSet<T>,
        seq: &[usize],
        cache: &ScoreCache<T>,
    ) -> Result<Vec<T>, ModelError> {
        match (self, cache) {
            (Model::Dacsr(m), ScoreCache::AggregatedEmbeddings(e_a)) => {
                m.infer_scores(params, seq, e_a)
            }
            (Model::Sasrec(m), _) => {
                let h = m.encoder.encode_values(params, seq)?;
                Ok(crate::encoder::score_values(
                    &h,
                    params.values(m.encoder.item_embeddings()),
                    m.encoder.config().hidden_dim,
                ))
            }
            (Model::Dacsr(m), ScoreCache::None) => {
                let e_a = m.aggregated_embeddings(params)?;
                m.infer_scores(params, seq, &e_a)
            }
        }
    }

    /// Mean loss over a batch, with attribute and aggregated-embedding
    /// nodes shared across the batch's samples.
    fn batch_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        batch: &[TrainSample<'_>],
        catalog: &ItemCatalog,
    ) -> Result<NodeId, ModelError> {
        debug_assert!(!batch.is_empty());
        let mut total: Option<NodeId> = None;
        match self {
            Model::Sasrec(m) => {
                let attr = if m.needs_attr_node() {
                    Some(attr_matrix_node(g, catalog)?)
                } else {
                    None
                };
                for sample in batch {
                    let loss = m.sample_loss(
                        g,
                        params,
                        sample.prefix,
                        sample.target,
                        sample.target_dist,
                        attr,
                    )?;
                    total = Some(match total {
                        None => loss,
                        Some(acc) => g.add(acc, loss)?,
                    });
                }
            }
            Model::Dacsr(m) => {
                let attr = attr_matrix_node(g, catalog)?;
                let e_a = m.aggregated_embeddings_node(g, params)?;
                for sample in batch {
                    let t = dist_node(g, sample.target_dist)?;
                    let loss = m.total_loss_with(
                        g,
                        params,
                        sample.prefix,
                        sample.target,
                        t,
                        attr,
                        e_a,
                    )?;
                    total = Some(match total {
                        None => loss,
                        Some(acc) => g.add(acc, loss)?,
                    });
                }
            }
        }
        let total = total.expect("nonempty batch");
        Ok(g.scale(total, T::from_f64(1.0 / batch.len() as f64)))
    }
}

struct TrainSample<'a> {
    prefix: &'a [usize],
    target: usize,
    target_dist: &'a [f64],
}

/// Validation metric used to pick the returned epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "metric", content = "k", rename_all = "snake_case")]
pub enum SelectMetric {
    Recall(usize),
    Mrr(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Selection {
    Metric(SelectMetric),
    /// Negated mean validation loss (higher is better); used by
    /// pre-training, where each encoder selects on its own loss.
    ValidationLoss,
}

/// Training-run hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub pretrain_epochs: usize,
    /// Epochs without validation improvement before stopping early.
    pub patience: Option<usize>,
    pub seed: u64,
    pub select_metric: SelectMetric,
    /// How calibration targets are derived from history distributions.
    pub dist_mode: DistMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 256,
            max_epochs: 100,
            pretrain_epochs: 20,
            patience: Some(10),
            seed: 42,
            select_metric: SelectMetric::Recall(20),
            dist_mode: DistMode::Raw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub validation_metric: f64,
}

/// Result of a training run. The checkpoint holds the best-validation
/// epoch's parameters; the live `ParamSet` is left at the final epoch.
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub history: Vec<EpochStats>,
}

/// Serializable description of a model, embedded in checkpoints so a
/// compatible model can be rebuilt at load time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Sasrec {
        encoder: EncoderConfig,
        objective: Objective,
        tau: f64,
        item_count: usize,
    },
    Dacsr {
        config: DacsrConfig,
        item_count: usize,
    },
}

impl ModelSpec {
    pub fn item_count(&self) -> usize {
        match self {
            ModelSpec::Sasrec { item_count, .. } | ModelSpec::Dacsr { item_count, .. } => {
                *item_count
            }
        }
    }

    /// Registers fresh parameters for this spec and returns the model.
    /// Checkpoint application afterwards overwrites the random init.
    pub fn build(&self, params: &mut ParamSet<f32>, seed: u64) -> Result<Model, TrainError> {
        let mut rng = StdRng::seed_from_u64(seed);
        match self {
            ModelSpec::Sasrec {
                encoder,
                objective,
                tau,
                item_count,
            } => {
                let enc =
                    SasRecEncoder::new(params, "encoder.main", *encoder, *item_count, &mut rng)?;
                Ok(Model::Sasrec(EncoderModel::new(enc, *objective, *tau)))
            }
            ModelSpec::Dacsr { config, item_count } => Ok(Model::Dacsr(DacsrModel::new(
                params, *config, *item_count, &mut rng,
            )?)),
        }
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self, TrainError> {
        let spec = ckpt
            .config
            .get("model")
            .ok_or_else(|| TrainError::BadModelSpec("missing `model` entry".into()))?;
        serde_json::from_value(spec.clone()).map_err(|e| TrainError::BadModelSpec(e.to_string()))
    }
}

/// Rebuilds a model and its parameters from a checkpoint, verifying the
/// catalog matches the one the model was trained against.
pub fn restore_model(
    ckpt: &ModelCheckpoint,
    catalog: &ItemCatalog,
) -> Result<(ParamSet<f32>, Model), TrainError> {
    let spec = ModelSpec::from_checkpoint(ckpt)?;
    if spec.item_count() != catalog.item_count() {
        return Err(TrainError::CatalogMismatch {
            checkpoint_items: spec.item_count(),
            catalog_items: catalog.item_count(),
        });
    }
    let mut params = ParamSet::new();
    let model = spec.build(&mut params, 0)?;
    ckpt.apply_to(&mut params)?;
    Ok((params, model))
}

/// Mini-batch training with per-epoch shuffling and validation-based
/// selection. Returns the checkpoint of the epoch that maximizes the
/// selection metric; ties resolve to the earliest epoch.
pub fn train(
    model: &Model,
    params: &mut ParamSet<f32>,
    dataset: &DatasetSplit,
    config: &TrainConfig,
    model_spec: &ModelSpec,
) -> Result<TrainOutcome, TrainError> {
    train_inner(
        model,
        params,
        dataset,
        config,
        model_spec,
        Selection::Metric(config.select_metric),
        config.max_epochs,
    )
}

fn train_inner(
    model: &Model,
    params: &mut ParamSet<f32>,
    dataset: &DatasetSplit,
    config: &TrainConfig,
    model_spec: &ModelSpec,
    selection: Selection,
    max_epochs: usize,
) -> Result<TrainOutcome, TrainError> {
    if dataset.train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let catalog = &dataset.catalog;
    let ids = model.param_ids();
    let hyper = AdamHyper::with_learning_rate(config.learning_rate);
    let mut adam: AdamState<f32> = AdamState::new();
    let mut rng = StdRng::seed_from_u64(config.seed ^ 0x5157_cc1b_2722_0a95);

    // Calibration targets depend only on the prefix and the mode; compute
    // them once up front.
    let dists_of = |pairs: &[crate::ingest::SplitPair]| -> Result<Vec<Vec<f64>>, TrainError> {
        pairs
            .iter()
            .map(|pair| {
                let p = history_distribution(&pair.prefix, catalog)?;
                Ok(config.dist_mode.apply(&p)?.weights().to_vec())
            })
            .collect()
    };
    let target_dists = dists_of(&dataset.train)?;
    let val_dists = dists_of(&dataset.validation)?;

    // Selection candidates are the post-epoch states; the initial model
    // is only returned when no epoch runs at all.
    let mut best_metric = if max_epochs == 0 {
        validation_metric(model, params, dataset, &val_dists, selection)?
    } else {
        f64::NEG_INFINITY
    };
    let mut best_epoch = 0usize;
    let mut best_params = params.clone();
    let mut best_adam = adam.clone();
    let mut history = Vec::new();
    let mut since_best = 0usize;

    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    for epoch in 1..=max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size.max(1)).enumerate() {
            let graph_seed: u64 = rng.random();
            let mut g: Graph<f32> = Graph::train(graph_seed);
            let batch: Vec<TrainSample<'_>> = chunk
                .iter()
                .map(|&i| TrainSample {
                    prefix: dataset.train[i].prefix.items(),
                    target: dataset.train[i].target,
                    target_dist: &target_dists[i],
                })
                .collect();
            let loss = model.batch_loss(&mut g, params, &batch, catalog)?;
            let loss_value = g.scalar_value(loss).to_f64();
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            g.backward(loss, params)?;
            adam_step(params, &ids, &mut adam, &hyper).map_err(|e| match e {
                AdamError::NonFiniteGradient { param } => TrainError::NonFiniteGradient {
                    param,
                    epoch,
                    batch: batch_idx,
                },
            })?;
            loss_sum += loss_value;
            batches += 1;
        }

        let metric = validation_metric(model, params, dataset, &val_dists, selection)?;
        history.push(EpochStats {
            epoch,
            mean_train_loss: loss_sum / batches as f64,
            validation_metric: metric,
        });
        if metric > best_metric {
            best_metric = metric;
            best_epoch = epoch;
            best_params = params.clone();
            best_adam = adam.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if let Some(patience) = config.patience {
                if since_best >= patience {
                    break;
                }
            }
        }
    }

    let config_json = serde_json::json!({
        "model": model_spec,
        "train": config,
    });
    let checkpoint = ModelCheckpoint::from_params(
        &best_params,
        Some(&best_adam),
        config_json,
        best_epoch,
        best_metric,
    );
    Ok(TrainOutcome {
        checkpoint,
        best_epoch,
        best_metric,
        history,
    })
}

/// Higher-is-better validation value for the selection rule.
fn validation_metric(
    model: &Model,
    params: &ParamSet<f32>,
    dataset: &DatasetSplit,
    val_dists: &[Vec<f64>],
    selection: Selection,
) -> Result<f64, TrainError> {
    if dataset.validation.is_empty() {
        return Ok(0.0);
    }
    match selection {
        Selection::Metric(metric) => {
            let cache = model.build_score_cache(params)?;
            let mut sum = 0.0;
            for pair in &dataset.validation {
                let scores = model.infer_scores(params, pair.prefix.items(), &cache)?;
                let rank = rank_of(&scores, pair.target);
                sum += match metric {
                    SelectMetric::Recall(k) => {
                        if rank <= k {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    SelectMetric::Mrr(k) => {
                        if rank <= k {
                            1.0 / rank as f64
                        } else {
                            0.0
                        }
                    }
                };
            }
            Ok(sum / dataset.validation.len() as f64)
        }
        Selection::ValidationLoss => {
            let catalog = &dataset.catalog;
            let mut sum = 0.0;
            for (pair, dist) in dataset.validation.iter().zip(val_dists) {
                let mut g: Graph<f32> = Graph::eval();
                let sample = TrainSample {
                    prefix: pair.prefix.items(),
                    target: pair.target,
                    target_dist: dist,
                };
                let loss = model.batch_loss(&mut g, params, &[sample], catalog)?;
                sum += g.scalar_value(loss).to_f64();
            }
            Ok(-(sum / dataset.validation.len() as f64))
        }
    }
}

/// 1-based rank of the target under descending score order, ties broken
/// toward the lower item index (matching top-K candidate selection).
fn rank_of(scores: &[f32], target: usize) -> usize {
    let target_score = scores[target];
    let mut rank = 1;
    for (i, &s) in scores.iter().enumerate() {
        if s > target_score || (s == target_score && i < target) {
            rank += 1;
        }
    }
    rank
}

/// Result of encoder pre-training: one checkpoint per role, parameters
/// under `encoder.p.*` and `encoder.c.*` respectively.
#[derive(Debug)]
pub struct PretrainOutcome {
    pub accuracy_encoder: ModelCheckpoint,
    pub calibration_encoder: ModelCheckpoint,
    pub history_p: Vec<EpochStats>,
    pub history_c: Vec<EpochStats>,
}

/// Pre-trains the two encoder roles separately: the accuracy encoder on
/// its cross-entropy loss, the calibration encoder on the calibration
/// loss, each selected by its own validation loss. With
/// `pretrain_epochs == 0` the random initializations pass through
/// unchanged.
pub fn pretrain(
    dataset: &DatasetSplit,
    encoder_config: EncoderConfig,
    tau: f64,
    config: &TrainConfig,
) -> Result<PretrainOutcome, TrainError> {
    let item_count = dataset.catalog.item_count();
    let run = |role: &str,
                   objective: Objective,
                   seed: u64|
     -> Result<(ModelCheckpoint, Vec<EpochStats>), TrainError> {
        let mut params: ParamSet<f32> = ParamSet::new();
        let mut rng = StdRng::seed_from_u64(seed);
        let prefix = format!("encoder.{role}");
        let encoder =
            SasRecEncoder::new(&mut params, &prefix, encoder_config, item_count, &mut rng)?;
        let model = Model::Sasrec(EncoderModel::new(encoder, objective, tau));
        let spec = ModelSpec::Sasrec {
            encoder: encoder_config,
            objective,
            tau,
            item_count,
        };
        if config.pretrain_epochs == 0 {
            let config_json = serde_json::json!({ "model": spec, "train": config });
            let ckpt = ModelCheckpoint::from_params(&params, None, config_json, 0, 0.0);
            return Ok((ckpt, Vec::new()));
        }
        let run_config = TrainConfig {
            seed,
            ..config.clone()
        };
        let outcome = train_inner(
            &model,
            &mut params,
            dataset,
            &run_config,
            &spec,
            Selection::ValidationLoss,
            config.pretrain_epochs,
        )?;
        Ok((outcome.checkpoint, outcome.history))
    };

    let (accuracy_encoder, history_p) = run("p", Objective::Accuracy, config.seed)?;
    let (calibration_encoder, history_c) =
        run("c", Objective::Calibration, config.seed.wrapping_add(1))?;
    Ok(PretrainOutcome {
        accuracy_encoder,
        calibration_encoder,
        history_p,
        history_c,
    })
}

/// Builds a DACSR model, optionally seeding its encoders from
/// pre-training, then trains it jointly on the three-term loss.
pub fn train_dacsr(
    dataset: &DatasetSplit,
    dacsr_config: DacsrConfig,
    config: &TrainConfig,
) -> Result<(ParamSet<f32>, Model, TrainOutcome), TrainError> {
    let pretrained = if config.pretrain_epochs > 0 {
        Some(pretrain(
            dataset,
            dacsr_config.encoder,
            dacsr_config.tau,
            config,
        )?)
    } else {
        None
    };
    let mut params: ParamSet<f32> = ParamSet::new();
    let mut rng = StdRng::seed_from_u64(config.seed);
    let item_count = dataset.catalog.item_count();
    let dacsr = DacsrModel::new(&mut params, dacsr_config, item_count, &mut rng)?;
    if let Some(pre) = &pretrained {
        pre.accuracy_encoder
            .apply_renamed(&mut params, "encoder.p.", "dacsr.fp.")?;
        pre.calibration_encoder
            .apply_renamed(&mut params, "encoder.c.", "dacsr.fc.")?;
    }
    let model = Model::Dacsr(dacsr);
    let spec = ModelSpec::Dacsr {
        config: dacsr_config,
        item_count,
    };
    let outcome = train(&model, &mut params, dataset, config, &spec)?;
    Ok((params, model, outcome))
}

/// Builds and trains a single-encoder model.
pub fn train_sasrec(
    dataset: &DatasetSplit,
    encoder_config: EncoderConfig,
    objective: Objective,
    tau: f64,
    config: &TrainConfig,
) -> Result<(ParamSet<f32>, Model, TrainOutcome), TrainError> {
    let mut params: ParamSet<f32> = ParamSet::new();
    let mut rng = StdRng::seed_from_u64(config.seed);
    let item_count = dataset.catalog.item_count();
    let encoder = SasRecEncoder::new(
        &mut params,
        "encoder.main",
        encoder_config,
        item_count,
        &mut rng,
    )?;
    let model = Model::Sasrec(EncoderModel::new(encoder, objective, tau));
    let spec = ModelSpec::Sasrec {
        encoder: encoder_config,
        objective,
        tau,
        item_count,
    };
    let outcome = train(&model, &mut params, dataset, config, &spec)?;
    Ok((params, model, outcome))
}
