//! Central finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, NodeId};
use super::param::{ParamId, ParamSet};
use super::TensorError;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Outcome of a [`gradient_check`] run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error across all checked coordinates.
    pub max_rel_err: f64,
    /// Parameter name and flat coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
    /// Number of coordinates compared.
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Compares the reverse-mode gradient of a scalar-valued computation
/// against central finite differences, coordinate by coordinate.
///
/// `build` reconstructs the forward graph from the current parameter
/// values and returns the loss node; it runs once for the analytic pass
/// and twice per checked coordinate for the probes. Computations using
/// dropout must construct their graph with a fixed seed so the probes see
/// the same masks. Run in `f64`.
pub fn gradient_check<F>(
    params: &mut ParamSet<f64>,
    check_ids: &[ParamId],
    epsilon: f64,
    tolerance: f64,
    mut build: F,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&ParamSet<f64>) -> Result<(Graph<f64>, NodeId), TensorError>,
{
    params.zero_grad();
    let (graph, loss) = build(params)?;
    if !graph.scalar_value(loss).is_finite() {
        return Err(TensorError::NonFinite("gradient_check forward"));
    }
    graph.backward(loss, params)?;
    let analytic: Vec<Vec<f64>> = check_ids.iter().map(|&id| params.grad(id).to_vec()).collect();

    let mut max_rel_err: f64 = 0.0;
    let mut worst = None;
    let mut checked = 0;

    for (slot, &id) in check_ids.iter().enumerate() {
        for coord in 0..params.values(id).len() {
            let original = params.values(id)[coord];

            params.values_mut(id)[coord] = original + epsilon;
            let (gp, lp) = build(params)?;
            let plus = gp.scalar_value(lp);

            params.values_mut(id)[coord] = original - epsilon;
            let (gm, lm) = build(params)?;
            let minus = gm.scalar_value(lm);

            params.values_mut(id)[coord] = original;

            if !plus.is_finite() || !minus.is_finite() {
                return Err(TensorError::NonFinite("gradient_check probe"));
            }

            let fd = (plus - minus) / (2.0 * epsilon);
            let an = analytic[slot][coord];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            checked += 1;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((params.name(id).to_string(), coord));
            }
        }
    }

    Ok(GradCheckReport {
        max_rel_err,
        worst,
        checked,
        tolerance,
    })
}
