//! Adam with bias correction, operating in place on a [`ParamSet`].

use thiserror::Error;

use crate::tensor::{ParamId, ParamSet, Real};

#[derive(Debug, Error)]
pub enum AdamError {
    #[error("non-finite gradient in parameter {param:?}; step aborted")]
    NonFiniteGradient { param: String },
}

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamHyper {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// First/second moment accumulators per parameter plus the shared step
/// counter. Moments appear lazily the first time a parameter steps.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T> {
    step: u64,
    slots: Vec<Option<Moments<T>>>,
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            slots: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[T], &[T])> {
        self.slots
            .get(id.0)
            .and_then(|s| s.as_ref())
            .map(|mo| (mo.m.as_slice(), mo.v.as_slice()))
    }

    pub fn set_moments(&mut self, id: ParamId, m: Vec<T>, v: Vec<T>) {
        if self.slots.len() <= id.0 {
            self.slots.resize_with(id.0 + 1, || None);
        }
        self.slots[id.0] = Some(Moments { m, v });
    }

    fn ensure(&mut self, id: ParamId, len: usize) -> &mut Moments<T> {
        if self.slots.len() <= id.0 {
            self.slots.resize_with(id.0 + 1, || None);
        }
        self.slots[id.0].get_or_insert_with(|| Moments {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        })
    }
}

/// One Adam update over `ids`, reading the accumulated gradients and
/// zeroing them afterwards. If any gradient is non-finite the step aborts
/// before touching parameters or moments.
pub fn adam_step<T: Real>(
    params: &mut ParamSet<T>,
    ids: &[ParamId],
    state: &mut AdamState<T>,
    hyper: &AdamHyper,
) -> Result<(), AdamError> {
    for &id in ids {
        if params.grad(id).iter().any(|g| !g.is_finite()) {
            return Err(AdamError::NonFiniteGradient {
                param: params.name(id).to_string(),
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let beta1 = T::from_f64(hyper.beta1);
    let beta2 = T::from_f64(hyper.beta2);
    let one = T::one();
    let bias1 = one - beta1.powi(t);
    let bias2 = one - beta2.powi(t);
    let lr = T::from_f64(hyper.learning_rate);
    let eps = T::from_f64(hyper.epsilon);

    for &id in ids {
        let grads: Vec<T> = params.grad(id).to_vec();
        let moments = state.ensure(id, grads.len());
        let values = params.values_mut(id);
        for (i, &g) in grads.iter().enumerate() {
            moments.m[i] = beta1 * moments.m[i] + (one - beta1) * g;
            moments.v[i] = beta2 * moments.v[i] + (one - beta2) * g * g;
            let m_hat = moments.m[i] / bias1;
            let v_hat = moments.v[i] / bias2;
            values[i] = values[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    // Gradients zero after the step so the next accumulation is clean.
    for &id in ids {
        params.zero_grad_of(id);
    }
    Ok(())
}
