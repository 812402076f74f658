//! Central finite-difference gradient checks.
//!
//! The check only evaluates forward passes, so it is independent of the
//! backward rules it validates.

use super::{Graph, NodeId, Tensor};
use crate::error::Result;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub probes: usize,
    pub max_rel_err: f64,
}

/// Relative error with a small floor on the denominator.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compare backward gradients against central differences at `probes`
/// randomly chosen coordinates spread across all inputs.
pub fn check<F, R>(inputs: &[Tensor<f64>], build: F, probes: usize, step: f64, rng: &mut R) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
    R: Rng,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let root = build(&mut g, &ids)?;
        Ok(g.value(root).data()[0])
    };
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = build(&mut g, &ids)?;
    g.backward(root)?;
    let grads: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| g.grad(id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let total: usize = inputs.iter().map(|t| t.len()).sum();
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for _ in 0..probes {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= work[which].len() {
            flat -= work[which].len();
            which += 1;
        }
        let orig = work[which].data()[flat];
        work[which].data_mut()[flat] = orig + step;
        let up = eval(&work)?;
        work[which].data_mut()[flat] = orig - step;
        let down = eval(&work)?;
        work[which].data_mut()[flat] = orig;
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(rel_err(grads[which][flat], numeric));
    }
    Ok(GradReport { probes, max_rel_err: worst })
}
