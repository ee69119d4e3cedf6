//! Self-attentive sequence encoding and the shared-embedding prediction
//! layer, plus the accuracy and calibration loss heads.
//!
//! The reference encoder is a small SASRec-style stack: item + learned
//! positional embeddings, then `num_blocks` rounds of pre-norm causal
//! self-attention and a pointwise feed-forward, both residual, with a
//! final layer norm. The sequence representation is the last position's
//! state. Scoring is a plain dot product against the item embedding
//! matrix, bias-free.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::ItemCatalog;
use crate::distribution::DistributionError;
use crate::tensor::{Graph, NodeId, ParamId, ParamSet, Real, Shape, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-8;
pub const INIT_RANGE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence length {len} exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("sequence is empty")]
    EmptySequence,
    #[error("invalid encoder config: {0}")]
    BadConfig(String),
    #[error("lambda must lie in [0, 1], got {0}")]
    BadLambda(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
}

/// Hyperparameters of one sequence encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Hidden dimension d of states and item embeddings.
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub dropout_rate: f64,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            num_blocks: 2,
            num_heads: 1,
            dropout_rate: 0.2,
            max_len: 200,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden_dim == 0 || self.num_blocks == 0 || self.num_heads == 0 || self.max_len == 0
        {
            return Err(ModelError::BadConfig(
                "hidden_dim, num_blocks, num_heads and max_len must be positive".into(),
            ));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::BadConfig(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// A trainable sequence encoder: history in, fixed-width representation
/// out. The reference implementation is [`SasRecEncoder`]; a recurrent
/// encoder would fit the same contract.
pub trait SequenceEncoder {
    /// Length-d representation of the sequence (`1 x d`).
    fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        seq: &[usize],
    ) -> Result<NodeId, ModelError>;

    /// Evaluation-mode representation as plain values. The default goes
    /// through a throwaway graph; implementations may provide a tape-free
    /// forward as long as the values stay identical.
    fn encode_values<T: Real>(
        &self,
        params: &ParamSet<T>,
        seq: &[usize],
    ) -> Result<Vec<T>, ModelError> {
        let mut g = Graph::eval();
        let h = self.encode(&mut g, params, seq)?;
        Ok(g.value(h).to_vec())
    }

    /// The `|I| x d` item embedding matrix also used for scoring.
    fn item_embeddings(&self) -> ParamId;

    fn config(&self) -> &EncoderConfig;

    fn param_ids(&self) -> Vec<ParamId>;
}

#[derive(Debug, Clone)]
struct BlockParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
}

/// SASRec-style self-attentive encoder.
#[derive(Debug, Clone)]
pub struct SasRecEncoder {
    config: EncoderConfig,
    item_count: usize,
    item_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<BlockParams>,
    final_gamma: ParamId,
    final_beta: ParamId,
}

impl SasRecEncoder {
    /// Registers all encoder parameters under `prefix` (e.g.
    /// `encoder.main` or `dacsr.fp`) and returns the handle struct.
    /// Projection weights and embeddings initialize uniform in
    /// (-INIT_RANGE, INIT_RANGE); layer-norm gains start at one.
    pub fn new<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        prefix: &str,
        config: EncoderConfig,
        item_count: usize,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.hidden_dim;
        let item_emb = params.add_uniform(
            format!("{prefix}.item_emb"),
            Shape::new(item_count, d),
            rng,
            -INIT_RANGE,
            INIT_RANGE,
        )?;
        let pos_emb = params.add_uniform(
            format!("{prefix}.pos_emb"),
            Shape::new(config.max_len, d),
            rng,
            -INIT_RANGE,
            INIT_RANGE,
        )?;
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for b in 0..config.num_blocks {
            let p = format!("{prefix}.block{b}");
            let square = Shape::new(d, d);
            blocks.push(BlockParams {
                wq: params.add_uniform(format!("{p}.wq"), square, rng, -INIT_RANGE, INIT_RANGE)?,
                wk: params.add_uniform(format!("{p}.wk"), square, rng, -INIT_RANGE, INIT_RANGE)?,
                wv: params.add_uniform(format!("{p}.wv"), square, rng, -INIT_RANGE, INIT_RANGE)?,
                ln1_gamma: params.add(
                    format!("{p}.ln1.gamma"),
                    Shape::vector(d),
                    vec![T::one(); d],
                )?,
                ln1_beta: params.add_zeros(format!("{p}.ln1.beta"), Shape::vector(d))?,
                w1: params.add_uniform(format!("{p}.ffn.w1"), square, rng, -INIT_RANGE, INIT_RANGE)?,
                b1: params.add_zeros(format!("{p}.ffn.b1"), Shape::vector(d))?,
                w2: params.add_uniform(format!("{p}.ffn.w2"), square, rng, -INIT_RANGE, INIT_RANGE)?,
                b2: params.add_zeros(format!("{p}.ffn.b2"), Shape::vector(d))?,
                ln2_gamma: params.add(
                    format!("{p}.ln2.gamma"),
                    Shape::vector(d),
                    vec![T::one(); d],
                )?,
                ln2_beta: params.add_zeros(format!("{p}.ln2.beta"), Shape::vector(d))?,
            });
        }
        let final_gamma = params.add(
            format!("{prefix}.final_ln.gamma"),
            Shape::vector(d),
            vec![T::one(); d],
        )?;
        let final_beta = params.add_zeros(format!("{prefix}.final_ln.beta"), Shape::vector(d))?;
        Ok(Self {
            config,
            item_count,
            item_emb,
            pos_emb,
            blocks,
            final_gamma,
            final_beta,
        })
    }

    pub fn item_count(&self) -> usize {
        self.item_count
    }

    /// Full `L x d` matrix of per-position states after the final layer
    /// norm. Position i only depends on items at positions <= i.
    pub fn encode_states<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        seq: &[usize],
    ) -> Result<NodeId, ModelError> {
        if seq.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if seq.len() > self.config.max_len {
            return Err(ModelError::SequenceTooLong {
                len: seq.len(),
                max: self.config.max_len,
            });
        }
        let len = seq.len();
        let d = self.config.hidden_dim;
        let heads = self.config.num_heads;
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let rate = self.config.dropout_rate;
        let eps = T::from_f64(LAYER_NORM_EPS);

        let positions: Vec<usize> = (0..len).collect();
        let items = g.gather_param_rows(params, self.item_emb, seq)?;
        let pos = g.gather_param_rows(params, self.pos_emb, &positions)?;
        let summed = g.add(items, pos)?;
        let mut x = g.dropout(summed, rate)?;

        for block in &self.blocks {
            let g1 = g.param(params, block.ln1_gamma);
            let b1 = g.param(params, block.ln1_beta);
            let normed = g.layer_norm_rows(x, g1, b1, eps)?;
            let wq = g.param(params, block.wq);
            let wk = g.param(params, block.wk);
            let wv = g.param(params, block.wv);
            let q = g.matmul(normed, wq)?;
            let k = g.matmul(normed, wk)?;
            let v = g.matmul(normed, wv)?;
            let mut head_outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let (lo, hi) = (h * dh, (h + 1) * dh);
                let (qh, kh, vh) = if heads == 1 {
                    (q, k, v)
                } else {
                    (
                        g.slice_cols(q, lo, hi)?,
                        g.slice_cols(k, lo, hi)?,
                        g.slice_cols(v, lo, hi)?,
                    )
                };
                let kt = g.transpose(kh);
                let raw = g.matmul(qh, kt)?;
                let scaled = g.scale(raw, scale);
                let attn = g.causal_softmax_rows(scaled)?;
                head_outs.push(g.matmul(attn, vh)?);
            }
            let mut attended = head_outs[0];
            for &h in &head_outs[1..] {
                attended = g.concat_cols(attended, h)?;
            }
            let dropped = g.dropout(attended, rate)?;
            x = g.add(x, dropped)?;

            let g2 = g.param(params, block.ln2_gamma);
            let b2 = g.param(params, block.ln2_beta);
            let normed2 = g.layer_norm_rows(x, g2, b2, eps)?;
            let w1 = g.param(params, block.w1);
            let bias1 = g.param(params, block.b1);
            let w2 = g.param(params, block.w2);
            let bias2 = g.param(params, block.b2);
            let hidden = g.matmul(normed2, w1)?;
            let hidden = g.add_bias(hidden, bias1)?;
            let hidden = g.relu(hidden);
            let out = g.matmul(hidden, w2)?;
            let out = g.add_bias(out, bias2)?;
            let out = g.dropout(out, rate)?;
            x = g.add(x, out)?;
        }

        let fg = g.param(params, self.final_gamma);
        let fb = g.param(params, self.final_beta);
        Ok(g.layer_norm_rows(x, fg, fb, eps)?)
    }
}

impl SasRecEncoder {
    /// Tape-free evaluation-mode forward: returns the length-d state of
    /// the last position. Mirrors the graph ops' arithmetic order
    /// exactly, so values are bitwise identical to [`Self::encode`] in
    /// eval mode.
    fn encode_values_fast<T: Real>(
        &self,
        params: &ParamSet<T>,
        seq: &[usize],
    ) -> Result<Vec<T>, ModelError> {
        if seq.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if seq.len() > self.config.max_len {
            return Err(ModelError::SequenceTooLong {
                len: seq.len(),
                max: self.config.max_len,
            });
        }
        let len = seq.len();
        let d = self.config.hidden_dim;
        let heads = self.config.num_heads;
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let eps = T::from_f64(LAYER_NORM_EPS);
        let item_count = self.item_count;

        fn gather<T>(table: &[T], idx: usize, d: usize) -> &[T] {
            &table[idx * d..(idx + 1) * d]
        }
        let item_table = params.values(self.item_emb);
        let pos_table = params.values(self.pos_emb);
        for &i in seq {
            if i >= item_count {
                return Err(ModelError::Tensor(
                    crate::tensor::TensorError::RowIndexOutOfRange {
                        op: "encode_values",
                        index: i,
                        rows: item_count,
                    },
                ));
            }
        }

        let mut x = vec![T::zero(); len * d];
        for (r, &item) in seq.iter().enumerate() {
            let irow = gather(item_table, item, d);
            let prow = gather(pos_table, r, d);
            for c in 0..d {
                x[r * d + c] = irow[c] + prow[c];
            }
        }

        let layer_norm = |x: &[T], gamma: &[T], beta: &[T], out: &mut Vec<T>| {
            out.clear();
            let count = T::from(d).unwrap();
            for row in x.chunks(d) {
                let mean: T = row.iter().cloned().sum::<T>() / count;
                let var: T = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
                let is = T::one() / (var + eps).sqrt();
                for (j, &v) in row.iter().enumerate() {
                    out.push(gamma[j] * ((v - mean) * is) + beta[j]);
                }
            }
        };
        // C[m x n] += A[m x k] B[k x n], accumulation in ascending k,
        // matching the graph's matmul.
        let mm = |a: &[T], m: usize, k: usize, b: &[T], n: usize, out: &mut Vec<T>| {
            out.clear();
            out.resize(m * n, T::zero());
            for i in 0..m {
                for p in 0..k {
                    let aip = a[i * k + p];
                    if aip == T::zero() {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o = *o + aip * bv;
                    }
                }
            }
        };

        let mut normed = Vec::new();
        let mut q = Vec::new();
        let mut k = Vec::new();
        let mut v = Vec::new();
        let mut attended = vec![T::zero(); len * d];
        let mut scores = vec![T::zero(); len * len];
        let mut hidden = Vec::new();
        let mut out = Vec::new();

        for block in &self.blocks {
            layer_norm(
                &x,
                params.values(block.ln1_gamma),
                params.values(block.ln1_beta),
                &mut normed,
            );
            mm(&normed, len, d, params.values(block.wq), d, &mut q);
            mm(&normed, len, d, params.values(block.wk), d, &mut k);
            mm(&normed, len, d, params.values(block.wv), d, &mut v);

            for h in 0..heads {
                let off = h * dh;
                // scores[i][j] = scale * q_h[i] . k_h[j], causal.
                for i in 0..len {
                    for j in 0..len {
                        let mut s = T::zero();
                        for c in 0..dh {
                            s = s + q[i * d + off + c] * k[j * d + off + c];
                        }
                        scores[i * len + j] = s * scale;
                    }
                }
                // Row-softmax over the causal prefix.
                for i in 0..len {
                    let row = &mut scores[i * len..i * len + i + 1];
                    let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for val in row.iter_mut() {
                        *val = (*val - max).exp();
                        sum = sum + *val;
                    }
                    for val in row.iter_mut() {
                        *val = *val / sum;
                    }
                }
                // attended_h = attn @ v_h
                for i in 0..len {
                    for c in 0..dh {
                        attended[i * d + off + c] = T::zero();
                    }
                    for j in 0..=i {
                        let w = scores[i * len + j];
                        if w == T::zero() {
                            continue;
                        }
                        for c in 0..dh {
                            attended[i * d + off + c] =
                                attended[i * d + off + c] + w * v[j * d + off + c];
                        }
                    }
                }
            }
            for (xi, &ai) in x.iter_mut().zip(&attended) {
                *xi = *xi + ai;
            }

            layer_norm(
                &x,
                params.values(block.ln2_gamma),
                params.values(block.ln2_beta),
                &mut normed,
            );
            mm(&normed, len, d, params.values(block.w1), d, &mut hidden);
            let b1 = params.values(block.b1);
            for row in hidden.chunks_mut(d) {
                for (h, &b) in row.iter_mut().zip(b1) {
                    let biased = *h + b;
                    *h = if biased > T::zero() { biased } else { T::zero() };
                }
            }
            mm(&hidden, len, d, params.values(block.w2), d, &mut out);
            let b2 = params.values(block.b2);
            for (r, row) in out.chunks(d).enumerate() {
                for (c, (&o, &b)) in row.iter().zip(b2).enumerate() {
                    x[r * d + c] = x[r * d + c] + (o + b);
                }
            }
        }

        layer_norm(
            &x,
            params.values(self.final_gamma),
            params.values(self.final_beta),
            &mut normed,
        );
        Ok(normed[(len - 1) * d..len * d].to_vec())
    }
}

impl SequenceEncoder for SasRecEncoder {
    fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        seq: &[usize],
    ) -> Result<NodeId, ModelError> {
        let states = self.encode_states(g, params, seq)?;
        Ok(g.gather_rows(states, &[seq.len() - 1])?)
    }

    fn encode_values<T: Real>(
        &self,
        params: &ParamSet<T>,
        seq: &[usize],
    ) -> Result<Vec<T>, ModelError> {
        self.encode_values_fast(params, seq)
    }

    fn item_embeddings(&self) -> ParamId {
        self.item_emb
    }

    fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.item_emb, self.pos_emb];
        for b in &self.blocks {
            ids.extend([
                b.wq, b.wk, b.wv, b.ln1_gamma, b.ln1_beta, b.w1, b.b1, b.w2, b.b2, b.ln2_gamma,
                b.ln2_beta,
            ]);
        }
        ids.extend([self.final_gamma, self.final_beta]);
        ids
    }
}

/// ŷ = E h^T: one dot product per item, no bias term. `h` is `1 x d`,
/// the embedding node `|I| x d`; the result is a `1 x |I|` score row.
pub fn score_against<T: Real>(
    g: &mut Graph<T>,
    h: NodeId,
    embeddings: NodeId,
) -> Result<NodeId, ModelError> {
    let et = g.transpose(embeddings);
    Ok(g.matmul(h, et)?)
}

/// [`score_against`] with the embeddings taken from a parameter.
pub fn score_all<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    h: NodeId,
    item_embeddings: ParamId,
) -> Result<NodeId, ModelError> {
    let emb = g.param(params, item_embeddings);
    score_against(g, h, emb)
}

/// Inference-only scoring: one dot product per row of `embeddings`
/// against the `1 x d` state values, computed outside the graph.
pub fn score_values<T: Real>(h: &[T], embeddings: &[T], d: usize) -> Vec<T> {
    debug_assert_eq!(h.len(), d);
    embeddings
        .chunks(d)
        .map(|row| row.iter().zip(h).map(|(&e, &x)| e * x).sum())
        .collect()
}

/// Negative log-likelihood of the target item under softmax over the full
/// item set.
pub fn accuracy_loss<T: Real>(
    g: &mut Graph<T>,
    scores: NodeId,
    target: usize,
) -> Result<NodeId, ModelError> {
    Ok(g.cross_entropy_from_logits(scores, target)?)
}

/// 1 - cos(q̂, target): the differentiable calibration loss. `attr_node`
/// is the `|I| x |G|` item-attribute constant, `target_node` the `1 x |G|`
/// target distribution.
pub fn calibration_loss_with<T: Real>(
    g: &mut Graph<T>,
    scores: NodeId,
    target_node: NodeId,
    attr_node: NodeId,
    tau: f64,
) -> Result<NodeId, ModelError> {
    if tau <= 0.0 {
        return Err(ModelError::Tensor(TensorError::NonPositiveTemperature(tau)));
    }
    let weights = g.softmax_rows(scores, T::from_f64(tau))?;
    let qhat = g.matmul(weights, attr_node)?;
    let cos = g.cosine_similarity(qhat, target_node)?;
    let neg = g.scale(cos, -T::one());
    Ok(g.add_scalar(neg, T::one()))
}

/// [`calibration_loss_with`], building the catalog and target constants
/// in-graph. Batch loops should build those once and use the `_with` form.
pub fn calibration_loss<T: Real>(
    g: &mut Graph<T>,
    scores: NodeId,
    target_dist: &[f64],
    catalog: &ItemCatalog,
    tau: f64,
) -> Result<NodeId, ModelError> {
    let attr_node = attr_matrix_node(g, catalog)?;
    let target_node = dist_node(g, target_dist)?;
    calibration_loss_with(g, scores, target_node, attr_node, tau)
}

/// The catalog's item-attribute matrix as a graph constant.
pub fn attr_matrix_node<T: Real>(
    g: &mut Graph<T>,
    catalog: &ItemCatalog,
) -> Result<NodeId, ModelError> {
    let values: Vec<T> = catalog
        .attr_matrix()
        .iter()
        .map(|&v| T::from_f64(v))
        .collect();
    Ok(g.constant(
        Shape::new(catalog.item_count(), catalog.attribute_count()),
        values,
    )?)
}

/// A distribution as a `1 x |G|` constant row.
pub fn dist_node<T: Real>(g: &mut Graph<T>, dist: &[f64]) -> Result<NodeId, ModelError> {
    let values: Vec<T> = dist.iter().map(|&v| T::from_f64(v)).collect();
    Ok(g.constant(Shape::vector(dist.len()), values)?)
}
