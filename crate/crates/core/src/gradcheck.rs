//! Central finite-difference gradient checking in `f64`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// `(param, component)` where the largest error occurred.
    pub worst: Option<(usize, usize)>,
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: Option<(f64, f64)>,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(build: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<_> = params.iter().map(|p| g.constant(p.clone())).collect();
    let loss = build(&mut g, &ids)?;
    Ok(g.value(loss).item())
}

/// Compares the tape gradient of `build` with central differences at every
/// component of every parameter.
///
/// `build` receives a graph plus one leaf per entry of `params` and must
/// return a scalar node.
pub fn finite_difference_check<F>(
    op_name: &str,
    params: &[Tensor<f64>],
    epsilon: f64,
    tolerance: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut g = Graph::new();
    let ids: Vec<_> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &ids)?;
    let base = g.value(loss).item();
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("{op_name}: loss is {base} at the unperturbed point")));
    }
    let grads = g.backward(loss)?;
    drop(g);

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut worst_values = None;
    for (p, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id);
        for c in 0..params[p].numel() {
            let orig = params[p].data()[c];
            work[p].data_mut()[c] = orig + epsilon;
            let plus = evaluate(&build, &work)?;
            work[p].data_mut()[c] = orig - epsilon;
            let minus = evaluate(&build, &work)?;
            work[p].data_mut()[c] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{op_name}: loss not finite when perturbing parameter {p} component {c}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let rel = relative_error(analytic.data()[c], numeric);
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                worst = Some((p, c));
                worst_values = Some((analytic.data()[c], numeric));
            }
        }
    }
    Ok(GradCheckReport {
        op_name: op_name.into(),
        max_rel_error: max_rel,
        tolerance,
        passed: max_rel <= tolerance,
        worst,
        worst_values,
    })
}
