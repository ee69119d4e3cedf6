//! Attribute preference distributions and the transforms between them.
//!
//! A sequence induces a history distribution (the per-item indicator rows
//! averaged over the sequence), a recommendation list induces the same over
//! its K items, and a full score vector induces a soft, differentiable
//! estimate through a temperature softmax. The diversity and mask
//! modifications reshape a history distribution before it is used as a
//! calibration target.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{CatalogError, InteractionSequence, ItemCatalog};

/// Per-item prediction scores for one sequence, over the full item set.
pub type ScoreVector = Vec<f64>;

/// Mask value assigned to zero-mass attributes before the masked softmax.
pub const MASK_VALUE: f64 = -1e10;

/// Default smoothing factor for [`ckl`].
pub const DEFAULT_ALPHA: f64 = 0.01;

#[derive(Debug, Error)]
pub enum DistributionError {
    #[error("sequence is empty")]
    EmptySequence,
    #[error("recommendation list is empty")]
    EmptyList,
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("score vector length {got} != item count {want}")]
    ScoreLengthMismatch { got: usize, want: usize },
    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),
    #[error("distribution has no nonzero entry")]
    AllZero,
    #[error("vector lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("cosine similarity of a zero-norm vector")]
    ZeroNorm,
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

/// Nonnegative attribute-mass vector summing to one.
///
/// Every constructor in this module normalizes, so holding one of these
/// means the invariant already holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeDistribution {
    weights: Vec<f64>,
}

impl AttributeDistribution {
    /// Wraps weights that are already nonnegative and normalized.
    /// Intended for constructed test fixtures; the invariant is checked.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self, DistributionError> {
        if weights.iter().all(|&w| w == 0.0) {
            return Err(DistributionError::AllZero);
        }
        debug_assert!(weights.iter().all(|&w| w >= 0.0));
        debug_assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Fraction of attributes with nonzero mass.
    pub fn coverage(&self) -> f64 {
        let nonzero = self.weights.iter().filter(|&&w| w > 0.0).count();
        nonzero as f64 / self.weights.len() as f64
    }
}

/// p(s): mean of the attribute rows of the items in the sequence.
pub fn history_distribution(
    seq: &InteractionSequence,
    catalog: &ItemCatalog,
) -> Result<AttributeDistribution, DistributionError> {
    mean_of_rows(seq.items(), catalog)
}

/// q(RL): mean of the attribute rows of the recommended items.
pub fn list_distribution(
    rec_list: &[usize],
    catalog: &ItemCatalog,
) -> Result<AttributeDistribution, DistributionError> {
    if rec_list.is_empty() {
        return Err(DistributionError::EmptyList);
    }
    mean_of_rows(rec_list, catalog)
}

fn mean_of_rows(
    items: &[usize],
    catalog: &ItemCatalog,
) -> Result<AttributeDistribution, DistributionError> {
    if items.is_empty() {
        return Err(DistributionError::EmptySequence);
    }
    let g = catalog.attribute_count();
    let mut weights = vec![0.0; g];
    for &item in items {
        let row = catalog.attribute_row(item)?;
        for (w, r) in weights.iter_mut().zip(row) {
            *w += r;
        }
    }
    let inv = 1.0 / items.len() as f64;
    for w in &mut weights {
        *w *= inv;
    }
    Ok(AttributeDistribution { weights })
}

/// q̂(s): softmax(scores/tau)-weighted mean of all item attribute rows.
///
/// The output sums to one because the weights do and every attribute row
/// does. This is the reference (non-differentiable) route; the training
/// path rebuilds the same computation inside the graph.
pub fn soft_list_distribution(
    scores: &[f64],
    catalog: &ItemCatalog,
    tau: f64,
) -> Result<AttributeDistribution, DistributionError> {
    if tau <= 0.0 {
        return Err(DistributionError::NonPositiveTemperature(tau));
    }
    if scores.len() != catalog.item_count() {
        return Err(DistributionError::ScoreLengthMismatch {
            got: scores.len(),
            want: catalog.item_count(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(DistributionError::NonFiniteScore(i));
    }
    let w = softmax_scaled(scores, tau);
    let g = catalog.attribute_count();
    let mut weights = vec![0.0; g];
    for (item, &wi) in w.iter().enumerate() {
        if wi == 0.0 {
            continue;
        }
        let row = catalog.attribute_row(item)?;
        for (acc, r) in weights.iter_mut().zip(row) {
            *acc += wi * r;
        }
    }
    Ok(AttributeDistribution { weights })
}

/// p_d(s): softmax(p/tau_div). Every attribute, including zero-mass ones,
/// ends up with positive weight.
pub fn modify_diversity(
    p: &AttributeDistribution,
    tau_div: f64,
) -> Result<AttributeDistribution, DistributionError> {
    if tau_div <= 0.0 {
        return Err(DistributionError::NonPositiveTemperature(tau_div));
    }
    Ok(AttributeDistribution {
        weights: softmax_scaled(&p.weights, tau_div),
    })
}

/// p_m(s): zero-mass attributes are pushed to [`MASK_VALUE`] before the
/// softmax, so they stay at exactly zero while the surviving ones are
/// renormalized by temperature.
pub fn modify_masked(
    p: &AttributeDistribution,
    tau_div: f64,
) -> Result<AttributeDistribution, DistributionError> {
    if tau_div <= 0.0 {
        return Err(DistributionError::NonPositiveTemperature(tau_div));
    }
    if p.weights.iter().all(|&w| w == 0.0) {
        return Err(DistributionError::AllZero);
    }
    let masked: Vec<f64> = p
        .weights
        .iter()
        .map(|&w| if w == 0.0 { MASK_VALUE } else { w })
        .collect();
    let mut weights = softmax_scaled(&masked, tau_div);
    // exp(-1e10/tau) underflows to 0 for any sane tau; pin it regardless.
    for (w, &orig) in weights.iter_mut().zip(&p.weights) {
        if orig == 0.0 {
            *w = 0.0;
        }
    }
    Ok(AttributeDistribution { weights })
}

/// How the calibration target is derived from the history distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DistMode {
    /// Raw p(s).
    Raw,
    /// p_d(s) = softmax(p/tau_div); explores attributes outside the history.
    Diversity { tau_div: f64 },
    /// p_m(s): masked softmax; flattens interests without leaving the
    /// history's attribute support.
    Masked { tau_div: f64 },
}

impl DistMode {
    pub fn apply(
        &self,
        p: &AttributeDistribution,
    ) -> Result<AttributeDistribution, DistributionError> {
        match *self {
            DistMode::Raw => Ok(p.clone()),
            DistMode::Diversity { tau_div } => modify_diversity(p, tau_div),
            DistMode::Masked { tau_div } => modify_masked(p, tau_div),
        }
    }
}

/// Smoothed KL divergence from `p` to `q`: the calibration metric.
///
/// The second argument is smoothed as q̃ = (1-alpha)·q + alpha·p before
/// Σ p·ln(p/q̃) is taken, with the convention 0·ln(0/·) = 0. Natural log.
pub fn ckl(
    p: &AttributeDistribution,
    q: &AttributeDistribution,
    alpha: f64,
) -> Result<f64, DistributionError> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(DistributionError::InvalidAlpha(alpha));
    }
    if p.len() != q.len() {
        return Err(DistributionError::LengthMismatch(p.len(), q.len()));
    }
    Ok(ckl_weights(&p.weights, &q.weights, alpha))
}

/// [`ckl`] over raw normalized weight slices; callers that build `q` in a
/// scratch buffer (the greedy re-ranker) skip the wrapper type.
pub(crate) fn ckl_weights(p: &[f64], q: &[f64], alpha: f64) -> f64 {
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        // (1-a)q + a*p equals p exactly when q == p; computing it in
        // floats would leave rounding residue, so equal terms short out.
        if pi == qi {
            continue;
        }
        let smoothed = (1.0 - alpha) * qi + alpha * pi;
        total += pi * (pi / smoothed).ln();
    }
    // Clamp the tiny negative float residue near-identical inputs leave.
    total.max(0.0)
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, DistributionError> {
    if u.len() != v.len() {
        return Err(DistributionError::LengthMismatch(u.len(), v.len()));
    }
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (&a, &b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(DistributionError::ZeroNorm);
    }
    Ok(dot / (nu.sqrt() * nv.sqrt()))
}

/// Max-subtracted softmax of `x / tau`.
fn softmax_scaled(x: &[f64], tau: f64) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / tau;
    let mut out: Vec<f64> = x.iter().map(|&v| (v / tau - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}
