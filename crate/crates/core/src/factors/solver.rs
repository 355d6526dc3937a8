use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use super::{FactorError, FactorGraph, VarKey};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmOptions {
    pub max_iters: usize,
    pub lambda_init: f64,
    pub lambda_factor: f64,
    pub lambda_max: f64,
    /// Stop when an accepted step lowers the cost by less than
    /// `cost_tol * max(1, |cost|)`.
    pub cost_tol: f64,
    /// Stop when the step norm falls below `step_tol * (1 + ‖x‖)`.
    pub step_tol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            lambda_init: 1e-4,
            lambda_factor: 10.0,
            lambda_max: 1e12,
            cost_tol: 1e-12,
            step_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
    pub mode_flips: usize,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_trace: Vec<f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error(transparent)]
    Factor(#[from] FactorError),
    #[error("damping exceeded {lambda:e} without a descent step")]
    Diverged { lambda: f64 },
    #[error("objective is not finite")]
    NonFinite,
}

struct Layout {
    offsets: BTreeMap<VarKey, usize>,
    dim: usize,
}

impl Layout {
    fn new(graph: &FactorGraph) -> Self {
        let mut offsets = BTreeMap::new();
        let mut dim = 0;
        for key in graph.vars.free_variables() {
            offsets.insert(key, dim);
            dim += key.dim();
        }
        Self { offsets, dim }
    }
}

fn normal_equations(
    graph: &FactorGraph,
    layout: &Layout,
) -> Result<(DMatrix<f64>, DVector<f64>), FactorError> {
    let n = layout.dim;
    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    for f in &graph.factors {
        let s = f.sqrt_information();
        if s.iter().all(|v| *v == 0.0) {
            continue;
        }
        let r = f.residual(&graph.vars)?.component_mul(&s);
        let blocks: Vec<(usize, DMatrix<f64>)> = f
            .jacobians(&graph.vars)?
            .into_iter()
            .filter_map(|(key, j)| {
                let off = *layout.offsets.get(&key)?;
                let mut j = j;
                for (mut row, si) in j.row_iter_mut().zip(s.iter()) {
                    row *= *si;
                }
                Some((off, j))
            })
            .collect();
        for (oi, ji) in &blocks {
            let jt = ji.transpose();
            let mut gi = g.rows_mut(*oi, ji.ncols());
            gi += &jt * &r;
            for (oj, jj) in &blocks {
                let mut hij = h.view_mut((*oi, *oj), (ji.ncols(), jj.ncols()));
                hij += &jt * jj;
            }
        }
    }
    Ok((h, g))
}

fn state_norm(graph: &FactorGraph) -> f64 {
    let v = &graph.vars;
    let poses = v
        .window_poses
        .iter()
        .map(|(_, p)| p.to_array().iter().map(|c| c * c).sum::<f64>());
    let landmarks = v.landmarks.values().map(|l| l.norm_squared());
    let objects = v
        .objects
        .values()
        .map(|p| p.to_array().iter().map(|c| c * c).sum::<f64>());
    poses.chain(landmarks).chain(objects).sum::<f64>().sqrt()
}

/// Damped Gauss-Newton on the graph's objective.
///
/// Every candidate step re-evaluates the max-mixture mode of dynamically gated
/// measurement factors before its cost is compared, and a step is accepted
/// only if the total cost strictly decreases. The objective is therefore
/// non-increasing over the solve.
pub fn lm_solve(graph: &mut FactorGraph, opts: &LmOptions) -> Result<SolveReport, SolveError> {
    let layout = Layout::new(graph);
    let mut cost = graph.total_cost()?;
    if !cost.is_finite() {
        return Err(SolveError::NonFinite);
    }
    let mut report = SolveReport {
        initial_cost: cost,
        final_cost: cost,
        cost_trace: vec![cost],
        ..SolveReport::default()
    };
    if layout.dim == 0 {
        report.converged = true;
        return Ok(report);
    }
    let keys: Vec<(VarKey, usize)> = layout.offsets.iter().map(|(k, o)| (*k, *o)).collect();
    let mut lambda = opts.lambda_init;

    'outer: while report.iterations < opts.max_iters {
        report.iterations += 1;
        let (h, g) = normal_equations(graph, &layout)?;
        loop {
            let mut damped = h.clone();
            for i in 0..layout.dim {
                damped[(i, i)] += lambda * (1.0 + h[(i, i)]);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= opts.lambda_factor;
                if lambda > opts.lambda_max {
                    return Err(SolveError::Diverged { lambda });
                }
                continue;
            };
            let delta = -chol.solve(&g);
            if delta.norm() <= opts.step_tol * (1.0 + state_norm(graph)) {
                report.converged = true;
                break 'outer;
            }
            let mut candidate = graph.clone();
            for (key, off) in &keys {
                let d = delta.rows(*off, key.dim());
                candidate.vars.retract(*key, d.as_slice());
            }
            let flips = candidate.refresh_modes()?;
            let new_cost = candidate.total_cost()?;
            if new_cost.is_finite() && new_cost < cost {
                let decrease = cost - new_cost;
                *graph = candidate;
                cost = new_cost;
                report.mode_flips += flips;
                report.cost_trace.push(cost);
                lambda = (lambda / opts.lambda_factor).max(1e-15);
                if decrease <= opts.cost_tol * cost.abs().max(1.0) {
                    report.converged = true;
                    break 'outer;
                }
                break;
            }
            lambda *= opts.lambda_factor;
            if lambda > opts.lambda_max {
                if g.norm() <= 1e-6 * (1.0 + cost.abs()) {
                    // Already at a stationary point that round-off cannot improve.
                    report.converged = true;
                    break 'outer;
                }
                return Err(SolveError::Diverged { lambda });
            }
        }
    }
    report.final_cost = cost;
    Ok(report)
}
