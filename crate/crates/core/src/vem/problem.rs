use std::collections::BTreeMap;

use crate::consistency::{
    beta_kl, gaussian_log_density, uniform_log_density, BetaState, EStepWeights,
};
use crate::factors::{lm_solve, FactorGraph, FrameId, LmOptions, Mode, ObjectId, SolveReport};
use crate::geom::{normalize_angle, Pose2};

use super::{Variant, VemError};

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrace {
    pub id: ObjectId,
    pub expected_v: f64,
    /// Mean unconstrained responsibility of the object's current measurements.
    pub expected_pi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub em_iter: usize,
    pub elbo: f64,
    pub pose_error: Option<f64>,
    pub rot_error: Option<f64>,
    pub mode_flips: usize,
    pub solver_iterations: usize,
    pub objects: Vec<ObjectTrace>,
}

/// One frame's variational problem: the window factor graph plus the
/// consistency beliefs of the objects observed in this frame.
///
/// The tracked objective is
/// `J = -cost(graph) - Σ_o KL(q(v_o) ‖ prior_o)`, where measurement factors
/// carry their responsibilities and mixing terms. E-steps maximize `J` over
/// the responsibilities and `q(v)` with the variables fixed; M-steps decrease
/// the graph cost. `J` is therefore non-decreasing across iterations.
#[derive(Debug, Clone)]
pub struct FrameProblem {
    pub graph: FactorGraph,
    pub frame: FrameId,
    pub priors: BTreeMap<ObjectId, BetaState>,
    pub posteriors: BTreeMap<ObjectId, BetaState>,
    /// This frame's measurement factor indices, grouped per object.
    pub current: BTreeMap<ObjectId, Vec<usize>>,
    pub variant: Variant,
    pub lm: LmOptions,
}

impl FrameProblem {
    /// Sets the initial mode of every current measurement from the prior and
    /// the initial variables.
    pub fn new(
        graph: FactorGraph,
        frame: FrameId,
        priors: BTreeMap<ObjectId, BetaState>,
        current: BTreeMap<ObjectId, Vec<usize>>,
        variant: Variant,
        lm: LmOptions,
    ) -> Result<Self, VemError> {
        let mut problem = Self {
            graph,
            frame,
            posteriors: priors.clone(),
            priors,
            current,
            variant,
            lm,
        };
        for i in problem.current_factors() {
            let f = &mut problem.graph.factors[i];
            let e = f
                .measurement_residual(&problem.graph.vars)?
                .expect("measurement factor");
            let m = f.mixture_mut().expect("measurement factor");
            let free = free_weights(m.log_prior_static, m.log_prior_changed, e, m);
            let mode = m.select(e);
            *m = m.with_weights(free, mode);
        }
        Ok(problem)
    }

    fn current_factors(&self) -> Vec<usize> {
        self.current.values().flatten().copied().collect()
    }

    /// Variational objective at the current state.
    pub fn elbo(&self) -> Result<f64, VemError> {
        let cost = self.graph.total_cost()?;
        let kl: f64 = self
            .posteriors
            .iter()
            .map(|(id, q)| beta_kl(q, &self.priors[id]))
            .sum();
        Ok(-cost - kl)
    }

    /// Closed-form update of responsibilities and consistency beliefs with
    /// the variables held fixed. Modes are kept; rejected measurements carry
    /// `(0, 1)`.
    pub fn e_step(&mut self) -> Result<(), VemError> {
        for (id, idxs) in &self.current {
            let (mut ds, mut dc) = (0.0, 0.0);
            for &i in idxs {
                let f = &mut self.graph.factors[i];
                let e = f
                    .measurement_residual(&self.graph.vars)?
                    .expect("measurement factor");
                let m = f.mixture_mut().expect("measurement factor");
                let free = free_weights(m.log_prior_static, m.log_prior_changed, e, m);
                *m = m.with_weights(free, m.mode);
                ds += m.weights.w_static;
                dc += m.weights.w_changed;
            }
            let q = self.priors[id].with_counts_added(ds, dc, f64::INFINITY);
            self.posteriors.insert(*id, q);
            let (lps, lpc) = self.variant.log_priors(&q);
            for &i in idxs {
                let m = self.graph.factors[i]
                    .mixture_mut()
                    .expect("measurement factor");
                m.log_prior_static = lps;
                m.log_prior_changed = lpc;
                m.expected_v = q.expectation();
            }
        }
        Ok(())
    }

    /// Max-mixture nonlinear least squares over the window variables.
    pub fn m_step(&mut self) -> Result<SolveReport, VemError> {
        Ok(lm_solve(&mut self.graph, &self.lm)?)
    }

    /// Alternates E- and M-steps up to `n_iters` times, stopping early once
    /// the objective changes by less than `elbo_tol`. The first trace entry
    /// (`em_iter` 0) describes the initial state.
    pub fn run(
        &mut self,
        n_iters: usize,
        elbo_tol: f64,
        gt_pose: Option<Pose2>,
    ) -> Result<Vec<IterationTrace>, VemError> {
        let mut traces = Vec::with_capacity(n_iters + 1);
        let mut previous = self.elbo()?;
        traces.push(self.trace(0, previous, &SolveReport::default(), gt_pose)?);
        for em_iter in 1..=n_iters {
            self.e_step()?;
            let report = self.m_step()?;
            let elbo = self.elbo()?;
            traces.push(self.trace(em_iter, elbo, &report, gt_pose)?);
            log::debug!(
                "frame {} iter {em_iter}: elbo {elbo:.6} flips {}",
                self.frame,
                report.mode_flips
            );
            if (elbo - previous).abs() < elbo_tol {
                break;
            }
            previous = elbo;
        }
        Ok(traces)
    }

    /// Iterates E-steps and mode selection with the variables held fixed.
    pub fn settle_latents(&mut self, max_iters: usize) -> Result<(), VemError> {
        for _ in 0..max_iters {
            self.e_step()?;
            if self.graph.refresh_modes()? == 0 {
                self.e_step()?;
                break;
            }
        }
        Ok(())
    }

    /// Current robot-in-world estimate of this frame.
    pub fn pose_estimate(&self) -> Result<Pose2, VemError> {
        Ok(self.graph.vars.pose(self.frame)?.inverse())
    }

    /// Responsibilities entering the objective, per current factor of `id`.
    pub fn effective_weights(&self, id: ObjectId) -> Vec<EStepWeights> {
        self.current
            .get(&id)
            .into_iter()
            .flatten()
            .filter_map(|&i| self.graph.factors[i].mixture().map(|m| m.weights))
            .collect()
    }

    pub fn mean_free_static_weight(&self, id: ObjectId) -> Option<f64> {
        let w: Vec<f64> = self
            .current
            .get(&id)
            .into_iter()
            .flatten()
            .filter_map(|&i| {
                self.graph.factors[i]
                    .mixture()
                    .map(|m| m.free_weights.w_static)
            })
            .collect();
        (!w.is_empty()).then(|| w.iter().sum::<f64>() / w.len() as f64)
    }

    pub fn mode_counts(&self) -> (usize, usize) {
        let modes = self
            .current_factors()
            .into_iter()
            .filter_map(|i| self.graph.factors[i].mixture().map(|m| m.mode));
        modes.fold((0, 0), |(s, c), m| match m {
            Mode::Static => (s + 1, c),
            Mode::Changed => (s, c + 1),
        })
    }

    fn trace(
        &self,
        em_iter: usize,
        elbo: f64,
        report: &SolveReport,
        gt_pose: Option<Pose2>,
    ) -> Result<IterationTrace, VemError> {
        let est = self.pose_estimate()?;
        let objects = self
            .current
            .keys()
            .map(|id| ObjectTrace {
                id: *id,
                expected_v: self.posteriors[id].expectation(),
                expected_pi: self.mean_free_static_weight(*id).unwrap_or(f64::NAN),
            })
            .collect();
        Ok(IterationTrace {
            em_iter,
            elbo,
            pose_error: gt_pose.map(|g| (est.translation() - g.translation()).norm()),
            rot_error: gt_pose.map(|g| normalize_angle(est.theta() - g.theta()).abs()),
            mode_flips: report.mode_flips,
            solver_iterations: report.iterations,
            objects,
        })
    }
}

fn free_weights(
    log_prior_static: f64,
    log_prior_changed: f64,
    e: crate::geom::Point2,
    m: &crate::factors::MixtureTerm,
) -> EStepWeights {
    EStepWeights::from_log_weights(
        log_prior_static + gaussian_log_density(e, &m.params),
        log_prior_changed + uniform_log_density(&m.params),
    )
}
