//! Named trainable parameters with gradient accumulators.

use std::collections::HashMap;

use rand::Rng;

use super::{Real, Shape, TensorError};

/// Handle into a [`ParamSet`]. Stable for the life of the set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct ParamEntry<T> {
    name: String,
    shape: Shape,
    values: Vec<T>,
    grad: Vec<T>,
}

/// Owns every trainable tensor of a model together with its gradient
/// accumulator. Gradients accumulate across backward passes until
/// explicitly zeroed, so multi-term losses may back-propagate in any order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: Shape,
        values: Vec<T>,
    ) -> Result<ParamId, TensorError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateParamName(name));
        }
        if values.len() != shape.count() {
            return Err(TensorError::ValueCountMismatch {
                shape,
                got: values.len(),
            });
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        let grad = vec![T::zero(); values.len()];
        self.entries.push(ParamEntry {
            name,
            shape,
            values,
            grad,
        });
        Ok(id)
    }

    /// Adds a parameter initialized uniformly in `[lo, hi)`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: Shape,
        rng: &mut R,
        lo: f64,
        hi: f64,
    ) -> Result<ParamId, TensorError> {
        let values = (0..shape.count())
            .map(|_| T::from_f64(rng.random_range(lo..hi)))
            .collect();
        self.add(name, shape, values)
    }

    pub fn add_zeros(
        &mut self,
        name: impl Into<String>,
        shape: Shape,
    ) -> Result<ParamId, TensorError> {
        let values = vec![T::zero(); shape.count()];
        self.add(name, shape, values)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> Shape {
        self.entries[id.0].shape
    }

    pub fn values(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].values
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.entries[id.0].values
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].grad
    }

    pub fn zero_grad(&mut self) {
        for entry in &mut self.entries {
            for g in &mut entry.grad {
                *g = T::zero();
            }
        }
    }

    pub fn zero_grad_of(&mut self, id: ParamId) {
        for g in &mut self.entries[id.0].grad {
            *g = T::zero();
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn coordinate_count(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, delta: &[T]) {
        let grad = &mut self.entries[id.0].grad;
        debug_assert_eq!(grad.len(), delta.len());
        for (g, d) in grad.iter_mut().zip(delta) {
            *g = *g + *d;
        }
    }

    /// Adds `delta` rows (width `cols`) onto the gradient rows named by
    /// `indices`; duplicates accumulate.
    pub(crate) fn scatter_add_grad(&mut self, id: ParamId, indices: &[usize], delta: &[T], cols: usize) {
        let grad = &mut self.entries[id.0].grad;
        for (r, &row) in indices.iter().enumerate() {
            let src = &delta[r * cols..(r + 1) * cols];
            let dst = &mut grad[row * cols..(row + 1) * cols];
            for (g, d) in dst.iter_mut().zip(src) {
                *g = *g + *d;
            }
        }
    }

    /// Copies values from another set's same-named parameter, used to seed
    /// a model from pre-trained weights. Names are matched after stripping
    /// `src_prefix` and prepending `dst_prefix`.
    pub fn copy_from_prefixed(
        &mut self,
        src: &ParamSet<T>,
        src_prefix: &str,
        dst_prefix: &str,
    ) -> Result<usize, TensorError> {
        let mut copied = 0;
        for src_id in src.ids() {
            let src_name = src.name(src_id);
            let Some(suffix) = src_name.strip_prefix(src_prefix) else {
                continue;
            };
            let dst_name = format!("{dst_prefix}{suffix}");
            if let Some(dst_id) = self.id_of(&dst_name) {
                if self.shape(dst_id) != src.shape(src_id) {
                    return Err(TensorError::ShapeMismatch {
                        op: "copy_from_prefixed",
                        lhs: self.shape(dst_id),
                        rhs: src.shape(src_id),
                    });
                }
                let values = src.values(src_id).to_vec();
                self.values_mut(dst_id).copy_from_slice(&values);
                copied += 1;
            }
        }
        Ok(copied)
    }
}
