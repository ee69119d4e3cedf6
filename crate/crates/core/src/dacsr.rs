//! The decoupled-aggregated model.
//!
//! Two independent encoders carry the two objectives: one is trained for
//! next-item accuracy, the other for calibration. Their sequence
//! representations and item embedding matrices are concatenated, pushed
//! through extractor nets (square feed-forward stacks with an input
//! residual), and the aggregated representations score all items. The
//! total loss is the weighted loss on the aggregated scores plus each
//! encoder's own objective.
//!
//! By default the concatenations are detached before entering the
//! extractors, so the weighted loss trains only the extractor parameters
//! and each encoder is optimized purely by its own loss. The alternative
//! (full backpropagation into both encoders) stays available behind
//! `detach_encoders: false` for ablation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::ItemCatalog;
use crate::encoder::{
    accuracy_loss, attr_matrix_node, calibration_loss_with, dist_node, score_against, score_all,
    EncoderConfig, ModelError, SasRecEncoder, SequenceEncoder, INIT_RANGE,
};
use crate::tensor::{Graph, NodeId, ParamId, ParamSet, Real, Shape, Tensor};

/// Square feed-forward stack over a fixed width, with the raw input added
/// back onto the final layer's output.
#[derive(Debug, Clone)]
pub struct ExtractorNet {
    width: usize,
    layers: Vec<(ParamId, ParamId)>,
}

impl ExtractorNet {
    /// `t` layers of `width x width` weights with biases, uniformly
    /// initialized.
    pub fn new<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        prefix: &str,
        width: usize,
        t: usize,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        if t == 0 {
            return Err(ModelError::BadConfig(
                "extractor needs at least one layer".into(),
            ));
        }
        let mut layers = Vec::with_capacity(t);
        for i in 0..t {
            let w = params.add_uniform(
                format!("{prefix}.layer{i}.w"),
                Shape::new(width, width),
                rng,
                -INIT_RANGE,
                INIT_RANGE,
            )?;
            let b = params.add_zeros(format!("{prefix}.layer{i}.b"), Shape::vector(width))?;
            layers.push((w, b));
        }
        Ok(Self { width, layers })
    }

    /// All-zero weights and biases: the net is exactly the identity.
    pub fn new_zeroed<T: Real>(
        params: &mut ParamSet<T>,
        prefix: &str,
        width: usize,
        t: usize,
    ) -> Result<Self, ModelError> {
        if t == 0 {
            return Err(ModelError::BadConfig(
                "extractor needs at least one layer".into(),
            ));
        }
        let mut layers = Vec::with_capacity(t);
        for i in 0..t {
            let w = params.add_zeros(format!("{prefix}.layer{i}.w"), Shape::new(width, width))?;
            let b = params.add_zeros(format!("{prefix}.layer{i}.b"), Shape::vector(width))?;
            layers.push((w, b));
        }
        Ok(Self { width, layers })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// h^i = W^i σ(h^{i-1}) + b^i for each layer, activation applied to
    /// the layer input (including the raw concatenation), then the input
    /// is added back: returns h^t + h^0. Applies row-wise to `n x width`
    /// input as one matrix product per layer.
    pub fn extract<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        input: NodeId,
    ) -> Result<NodeId, ModelError> {
        let shape = g.shape(input);
        if shape.cols != self.width {
            return Err(ModelError::Tensor(
                crate::tensor::TensorError::ShapeMismatch {
                    op: "extract",
                    lhs: shape,
                    rhs: Shape::new(self.width, self.width),
                },
            ));
        }
        let mut h = input;
        for &(w, b) in &self.layers {
            let act = g.relu(h);
            let wn = g.param(params, w);
            let wt = g.transpose(wn);
            let prod = g.matmul(act, wt)?;
            let bn = g.param(params, b);
            h = g.add_bias(prod, bn)?;
        }
        Ok(g.add(h, input)?)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Tape-free forward over one `1 x width` row, mirroring
    /// [`Self::extract`]'s arithmetic order so values match bitwise.
    pub fn extract_values<T: Real>(&self, params: &ParamSet<T>, input: &[T]) -> Vec<T> {
        debug_assert_eq!(input.len(), self.width);
        let w = self.width;
        let mut h = input.to_vec();
        let mut act = vec![T::zero(); w];
        let mut next = vec![T::zero(); w];
        for &(wid, bid) in &self.layers {
            for (a, &v) in act.iter_mut().zip(&h) {
                *a = if v > T::zero() { v } else { T::zero() };
            }
            let weights = params.values(wid);
            let bias = params.values(bid);
            // next[r] = act . W[r,:] + b[r]; same accumulation order as
            // matmul(act, transpose(W)).
            for (r, n) in next.iter_mut().enumerate() {
                let mut s = T::zero();
                for (c, &a) in act.iter().enumerate() {
                    if a == T::zero() {
                        continue;
                    }
                    s = s + a * weights[r * w + c];
                }
                *n = s + bias[r];
            }
            std::mem::swap(&mut h, &mut next);
        }
        for (o, &i) in h.iter_mut().zip(input) {
            *o = *o + i;
        }
        h
    }
}

/// Hyperparameters of the decoupled-aggregated model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DacsrConfig {
    pub encoder: EncoderConfig,
    /// Number of extractor layers t.
    pub extractor_layers: usize,
    /// Accuracy/calibration trade-off in the weighted loss.
    pub lambda: f64,
    /// Softmax temperature of the soft list distribution.
    pub tau: f64,
    /// Block gradient flow from the weighted loss into the encoders.
    pub detach_encoders: bool,
}

impl Default for DacsrConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            extractor_layers: 2,
            lambda: 0.5,
            tau: 1.0,
            detach_encoders: true,
        }
    }
}

/// Scores of one forward pass: aggregated, accuracy-encoder and
/// calibration-encoder score rows (each `1 x |I|`).
#[derive(Debug, Clone, Copy)]
pub struct AggregateScores {
    pub y_a: NodeId,
    pub y_p: NodeId,
    pub y_c: NodeId,
}

/// Decoupled-aggregated model over any pair of sequence encoders.
#[derive(Debug, Clone)]
pub struct DacsrModel<E: SequenceEncoder = SasRecEncoder> {
    f_p: E,
    f_c: E,
    ex_seq: ExtractorNet,
    ex_emb: ExtractorNet,
    lambda: f64,
    tau: f64,
    detach_encoders: bool,
}

impl DacsrModel<SasRecEncoder> {
    /// Builds the standard configuration: two SASRec-style encoders under
    /// `dacsr.fp.*` / `dacsr.fc.*` and extractors under `dacsr.ex_seq.*` /
    /// `dacsr.ex_emb.*`.
    pub fn new<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        config: DacsrConfig,
        item_count: usize,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let f_p = SasRecEncoder::new(params, "dacsr.fp", config.encoder, item_count, rng)?;
        let f_c = SasRecEncoder::new(params, "dacsr.fc", config.encoder, item_count, rng)?;
        let width = 2 * config.encoder.hidden_dim;
        let ex_seq =
            ExtractorNet::new(params, "dacsr.ex_seq", width, config.extractor_layers, rng)?;
        let ex_emb =
            ExtractorNet::new(params, "dacsr.ex_emb", width, config.extractor_layers, rng)?;
        Self::from_parts(f_p, f_c, ex_seq, ex_emb, config)
    }

    /// Same layout but with zero-initialized extractors, which act as the
    /// identity on their inputs until trained.
    pub fn new_with_zero_extractors<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        config: DacsrConfig,
        item_count: usize,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let f_p = SasRecEncoder::new(params, "dacsr.fp", config.encoder, item_count, rng)?;
        let f_c = SasRecEncoder::new(params, "dacsr.fc", config.encoder, item_count, rng)?;
        let width = 2 * config.encoder.hidden_dim;
        let ex_seq =
            ExtractorNet::new_zeroed(params, "dacsr.ex_seq", width, config.extractor_layers)?;
        let ex_emb =
            ExtractorNet::new_zeroed(params, "dacsr.ex_emb", width, config.extractor_layers)?;
        Self::from_parts(f_p, f_c, ex_seq, ex_emb, config)
    }
}

impl<E: SequenceEncoder> DacsrModel<E> {
    /// Assembles a model from already-registered components. The two
    /// encoders must not share parameters and must agree on hidden_dim.
    pub fn from_parts(
        f_p: E,
        f_c: E,
        ex_seq: ExtractorNet,
        ex_emb: ExtractorNet,
        config: DacsrConfig,
    ) -> Result<Self, ModelError> {
        if !(0.0..=1.0).contains(&config.lambda) {
            return Err(ModelError::BadLambda(config.lambda));
        }
        if config.tau <= 0.0 {
            return Err(ModelError::BadConfig(format!(
                "tau must be positive, got {}",
                config.tau
            )));
        }
        let (dp, dc) = (f_p.config().hidden_dim, f_c.config().hidden_dim);
        if dp != dc {
            return Err(ModelError::BadConfig(format!(
                "encoder hidden dims differ: {dp} vs {dc}"
            )));
        }
        if ex_seq.width() != 2 * dp || ex_emb.width() != 2 * dp {
            return Err(ModelError::BadConfig(format!(
                "extractor width must be {} (2d)",
                2 * dp
            )));
        }
        for (a, ida) in f_p.param_ids().iter().enumerate() {
            if f_c.param_ids().contains(ida) {
                return Err(ModelError::BadConfig(format!(
                    "encoders share parameter #{a}"
                )));
            }
        }
        Ok(Self {
            f_p,
            f_c,
            ex_seq,
            ex_emb,
            lambda: config.lambda,
            tau: config.tau,
            detach_encoders: config.detach_encoders,
        })
    }

    pub fn accuracy_encoder(&self) -> &E {
        &self.f_p
    }

    pub fn calibration_encoder(&self) -> &E {
        &self.f_c
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<(), ModelError> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(ModelError::BadLambda(lambda));
        }
        self.lambda = lambda;
        Ok(())
    }

    pub fn extractor_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.ex_seq.param_ids();
        ids.extend(self.ex_emb.param_ids());
        ids
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.f_p.param_ids();
        ids.extend(self.f_c.param_ids());
        ids.extend(self.extractor_param_ids());
        ids
    }

    /// Aggregated `|I| x 2d` embedding node: concat of the two embedding
    /// matrices (detached by default) through the embedding extractor.
    /// Input-independent, so batch and evaluation paths build it once.
    pub fn aggregated_embeddings_node<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
    ) -> Result<NodeId, ModelError> {
        let ep = g.param(params, self.f_p.item_embeddings());
        let ec = g.param(params, self.f_c.item_embeddings());
        let cat = g.concat_cols(ep, ec)?;
        let input = if self.detach_encoders {
            g.detach(cat)
        } else {
            cat
        };
        self.ex_emb.extract(g, params, input)
    }

    /// Snapshot of the aggregated embeddings for cached inference.
    pub fn aggregated_embeddings<T: Real>(
        &self,
        params: &ParamSet<T>,
    ) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::eval();
        let node = self.aggregated_embeddings_node(&mut g, params)?;
        Ok(Tensor::new(g.shape(node), g.value(node).to_vec())?)
    }

    /// Aggregated sequence representation `1 x 2d`.
    pub fn aggregated_state<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        seq: &[usize],
    ) -> Result<NodeId, ModelError> {
        let h_p = self.f_p.encode(g, params, seq)?;
        let h_c = self.f_c.encode(g, params, seq)?;
        let cat = g.concat_cols(h_p, h_c)?;
        let input = if self.detach_encoders {
            g.detach(cat)
        } else {
            cat
        };
        self.ex_seq.extract(g, params, input)
    }

    /// Full forward pass: aggregated scores plus both encoders' own score
    /// rows.
    pub fn aggregate_forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        seq: &[usize],
    ) -> Result<AggregateScores, ModelError> {
        let e_a = self.aggregated_embeddings_node(g, params)?;
        self.aggregate_forward_with(g, params, seq, e_a)
    }

    /// [`aggregate_forward`] against a pre-built aggregated embedding
    /// node, so batch graphs pay for the embedding extractor once.
    pub fn aggregate_forward_with<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        seq: &[usize],
        e_a: NodeId,
    ) -> Result<AggregateScores, ModelError> {
        let h_p = self.f_p.encode(g, params, seq)?;
        let h_c = self.f_c.encode(g, params, seq)?;
        let y_p = score_all(g, params, h_p, self.f_p.item_embeddings())?;
        let y_c = score_all(g, params, h_c, self.f_c.item_embeddings())?;
        let cat = g.concat_cols(h_p, h_c)?;
        let input = if self.detach_encoders {
            g.detach(cat)
        } else {
            cat
        };
        let h_a = self.ex_seq.extract(g, params, input)?;
        let y_a = score_against(g, h_a, e_a)?;
        Ok(AggregateScores { y_a, y_p, y_c })
    }

    /// Aggregated scores for ranking (the model's recommendation output).
    pub fn scores<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        seq: &[usize],
    ) -> Result<NodeId, ModelError> {
        let e_a = self.aggregated_embeddings_node(g, params)?;
        let h_a = self.aggregated_state(g, params, seq)?;
        score_against(g, h_a, e_a)
    }

    /// Ranking scores against cached aggregated embeddings; equal to
    /// [`Self::scores`] but skips the per-sequence embedding extraction.
    pub fn scores_cached<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        seq: &[usize],
        cached: &Tensor<T>,
    ) -> Result<NodeId, ModelError> {
        let e_a = g.constant(cached.shape, cached.values.clone())?;
        let h_a = self.aggregated_state(g, params, seq)?;
        score_against(g, h_a, e_a)
    }

    /// Inference fast path: tape-free encoder and extractor forwards,
    /// then a plain matrix-vector product against the cached aggregated
    /// embeddings. Value-identical to [`Self::scores_cached`].
    pub fn infer_scores<T: Real>(
        &self,
        params: &ParamSet<T>,
        seq: &[usize],
        cached: &Tensor<T>,
    ) -> Result<Vec<T>, ModelError> {
        let mut cat = self.f_p.encode_values(params, seq)?;
        cat.extend(self.f_c.encode_values(params, seq)?);
        let h_a = self.ex_seq.extract_values(params, &cat);
        Ok(crate::encoder::score_values(
            &h_a,
            &cached.values,
            cached.shape.cols,
        ))
    }

    /// Eq-by-eq total loss with pre-built target/attribute constant nodes
    /// and a shared aggregated-embedding node.
    #[allow(clippy::too_many_arguments)]
    pub fn total_loss_with<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        seq: &[usize],
        target: usize,
        target_node: NodeId,
        attr_node: NodeId,
        e_a: NodeId,
    ) -> Result<NodeId, ModelError> {
        let scores = self.aggregate_forward_with(g, params, seq, e_a)?;
        let l_w = weighted_loss_on_scores(
            g,
            scores.y_a,
            target,
            target_node,
            attr_node,
            self.lambda,
            self.tau,
        )?;
        let l_acc_p = accuracy_loss(g, scores.y_p, target)?;
        let l_cal_c = calibration_loss_with(g, scores.y_c, target_node, attr_node, self.tau)?;
        let partial = g.add(l_w, l_acc_p)?;
        Ok(g.add(partial, l_cal_c)?)
    }

    /// Three-term training loss for one sample: the weighted loss on the
    /// aggregated scores, the accuracy loss on the accuracy encoder, and
    /// the calibration loss on the calibration encoder.
    pub fn total_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        seq: &[usize],
        target: usize,
        target_dist: &[f64],
        catalog: &ItemCatalog,
    ) -> Result<NodeId, ModelError> {
        let attr_node = attr_matrix_node(g, catalog)?;
        let target_node = dist_node(g, target_dist)?;
        let e_a = self.aggregated_embeddings_node(g, params)?;
        self.total_loss_with(g, params, seq, target, target_node, attr_node, e_a)
    }
}

/// (1-λ)·accuracy + λ·calibration on one score row.
pub fn weighted_loss_on_scores<T: Real>(
    g: &mut Graph<T>,
    scores: NodeId,
    target: usize,
    target_node: NodeId,
    attr_node: NodeId,
    lambda: f64,
    tau: f64,
) -> Result<NodeId, ModelError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(ModelError::BadLambda(lambda));
    }
    let acc = accuracy_loss(g, scores, target)?;
    let cal = calibration_loss_with(g, scores, target_node, attr_node, tau)?;
    let acc_scaled = g.scale(acc, T::from_f64(1.0 - lambda));
    let cal_scaled = g.scale(cal, T::from_f64(lambda));
    Ok(g.add(acc_scaled, cal_scaled)?)
}

/// Convenience wrapper building the constants in-graph.
pub fn weighted_loss<T: Real>(
    g: &mut Graph<T>,
    scores: NodeId,
    target: usize,
    target_dist: &[f64],
    lambda: f64,
    tau: f64,
    catalog: &ItemCatalog,
) -> Result<NodeId, ModelError> {
    let attr_node = attr_matrix_node(g, catalog)?;
    let target_node = dist_node(g, target_dist)?;
    weighted_loss_on_scores(g, scores, target, target_node, attr_node, lambda, tau)
}
