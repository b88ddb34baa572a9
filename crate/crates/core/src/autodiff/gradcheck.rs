//! Central finite-difference gradient checking.
//!
//! The checker is the independent oracle for every backward pass in the
//! crate: it re-evaluates the forward function at θ ± ε per coordinate and
//! compares the quotient against the analytic gradient. It must run in
//! double precision; single-precision noise sits above the tolerances the
//! checks assert.

use rand::Rng;

use super::graph::{AutodiffError, Graph, NodeId};
use super::tensor::Tensor;
use crate::exec::{self, ExecMode};
use crate::seed;

/// Outcome of a [`grad_check`] run.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

/// Builds the scalar loss of a parameterized function on a fresh graph.
/// Leaves are registered in `params` order before the call.
pub trait LossBuilder: Sync {
    fn build(&self, graph: &mut Graph<'_, f64>, params: &[NodeId])
        -> Result<NodeId, AutodiffError>;
}

impl<F> LossBuilder for F
where
    F: Fn(&mut Graph<'_, f64>, &[NodeId]) -> Result<NodeId, AutodiffError> + Sync,
{
    fn build(
        &self,
        graph: &mut Graph<'_, f64>,
        params: &[NodeId],
    ) -> Result<NodeId, AutodiffError> {
        self(graph, params)
    }
}

fn eval(build: &dyn LossBuilder, params: &[Tensor<f64>]) -> Result<f64, AutodiffError> {
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|t| graph.leaf(t)).collect();
    let loss = build.build(&mut graph, &ids)?;
    let v = graph.scalar_value(loss);
    if !v.is_finite() {
        return Err(AutodiffError::NonFiniteValue(format!("loss = {v}")));
    }
    Ok(v)
}

/// Compares analytic gradients against central finite differences at up to
/// `coords_per_tensor` sampled coordinates per tensor (all coordinates for
/// tensors at most that large). Relative error per coordinate is
/// `|a − n| / max(|a|, |n|, 1e-8)`; the report carries the maximum.
pub fn grad_check(
    build: &dyn LossBuilder,
    params: &[Tensor<f64>],
    fd_epsilon: f64,
    coords_per_tensor: usize,
    coord_seed: u64,
    mode: ExecMode,
) -> Result<GradCheckReport, AutodiffError> {
    if fd_epsilon <= 0.0 {
        return Err(AutodiffError::InvalidEpsilon(fd_epsilon));
    }

    // Analytic pass.
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|t| graph.leaf(t)).collect();
    let loss = build.build(&mut graph, &ids)?;
    let mut grads = graph.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = ids.iter().map(|&id| grads.take_or_zeros(id)).collect();
    drop(graph);

    // Coordinate plan: everything for small tensors, a seeded sample else.
    let mut jobs: Vec<(usize, usize, f64)> = Vec::new();
    for (ti, tensor) in params.iter().enumerate() {
        let n = tensor.len();
        if n <= coords_per_tensor {
            for ei in 0..n {
                jobs.push((ti, ei, analytic[ti].data()[ei]));
            }
        } else {
            let mut rng = seed::rng(coord_seed, "fd_coords", ti as u64);
            let mut seen = std::collections::HashSet::with_capacity(coords_per_tensor);
            while seen.len() < coords_per_tensor {
                let ei = rng.gen_range(0..n);
                if seen.insert(ei) {
                    jobs.push((ti, ei, analytic[ti].data()[ei]));
                }
            }
        }
    }

    let errors: Vec<Result<f64, AutodiffError>> = exec::indexed_map(mode, jobs.len(), |j| {
        let (ti, ei, analytic) = jobs[j];
        let mut local: Vec<Tensor<f64>> = params.to_vec();
        let base = local[ti].data()[ei];
        local[ti].data_mut()[ei] = base + fd_epsilon;
        let plus = eval(build, &local)?;
        local[ti].data_mut()[ei] = base - fd_epsilon;
        let minus = eval(build, &local)?;
        let numeric = (plus - minus) / (2.0 * fd_epsilon);
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        Ok((analytic - numeric).abs() / denom)
    });

    let mut max_rel_error = 0.0f64;
    for e in errors {
        max_rel_error = max_rel_error.max(e?);
    }
    Ok(GradCheckReport {
        max_rel_error,
        coords_checked: jobs.len(),
    })
}
