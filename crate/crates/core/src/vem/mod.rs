//! Per-frame pipeline: association, alternating E-step / M-step, object
//! library maintenance and the sliding-window hand-off.

mod associate;
mod library;
mod problem;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::{BetaState, ConsistencyError, MixtureParams, DEFAULT_COUNT_CAP};
use crate::factors::{
    Factor, FactorError, Gating, LandmarkKey, LmOptions, MixtureTerm, ObjectId, PoseNoise,
    SolveError, VariableSet,
};
use crate::geom::{Point2, Pose2};
use crate::sim::{Fov, FrameData};

pub use associate::associate;
pub use library::{update_object_library, LibraryUpdate};
pub use problem::{FrameProblem, IterationTrace, ObjectTrace};

#[derive(Debug, Error)]
pub enum VemError {
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Factor(#[from] FactorError),
    #[error(transparent)]
    Consistency(#[from] ConsistencyError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("frame {got} arrived out of order (expected {expected})")]
    FrameOrder { expected: usize, got: usize },
}

/// Objective variant used for the landmark mixing terms and mode gating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Mean-field bound with `E[log v]` mixing and `E[v]` gating.
    Full,
    /// Single-point mixture using `log E[v]` in place of `E[log v]`.
    PointEstimate,
    /// Weighted Gaussian factors without max-mixture rejection.
    NoMaxMixture,
    /// Mean-field bound with gating on the factor's own `E[π]`.
    GateByEPi,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::PointEstimate,
        Variant::NoMaxMixture,
        Variant::GateByEPi,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::PointEstimate => "point_estimate",
            Variant::NoMaxMixture => "no_max_mixture",
            Variant::GateByEPi => "gate_by_E_pi",
        }
    }

    pub fn gating(&self) -> Gating {
        match self {
            Variant::Full | Variant::PointEstimate => Gating::ExpectedV,
            Variant::NoMaxMixture => Gating::AlwaysStatic,
            Variant::GateByEPi => Gating::ExpectedPi,
        }
    }

    /// Log mixing terms `(static, changed)` for a consistency belief.
    pub fn log_priors(&self, q: &BetaState) -> (f64, f64) {
        match self {
            Variant::PointEstimate => {
                let v = q.expectation();
                (v.ln(), (1.0 - v).ln())
            }
            _ => (q.expected_log_v(), q.expected_log_1mv()),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.as_str()).collect();
                format!(
                    "unknown variant `{s}` (expected one of: {})",
                    names.join(", ")
                )
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VemConfig {
    pub window: usize,
    pub em_iters: usize,
    pub elbo_tol: f64,
    pub consistency_threshold: f64,
    pub prior: BetaState,
    pub min_points: usize,
    pub pseudo_change: f64,
    pub count_cap: f64,
    pub mixture: MixtureParams,
    pub odom_noise: PoseNoise,
    pub rigid_sigma: f64,
    pub prior_sigma: f64,
    /// Learning rate of the running change-magnitude estimate.
    pub change_rate: f64,
    /// Objects closer than this to the field-of-view boundary are not
    /// penalized for going unobserved.
    pub frustum_margin: f64,
    pub frustum_angle_margin: f64,
    pub variant: Variant,
    pub lm: LmOptions,
}

impl Default for VemConfig {
    fn default() -> Self {
        Self {
            window: 8,
            em_iters: 30,
            elbo_tol: 1e-6,
            consistency_threshold: 0.2,
            prior: BetaState::default(),
            min_points: 3,
            pseudo_change: 4.0,
            count_cap: DEFAULT_COUNT_CAP,
            mixture: MixtureParams::default(),
            odom_noise: PoseNoise::default(),
            rigid_sigma: 0.01,
            prior_sigma: 0.5,
            change_rate: 0.5,
            frustum_margin: 0.3,
            frustum_angle_margin: 0.05,
            variant: Variant::Full,
            lm: LmOptions::default(),
        }
    }
}

impl VemConfig {
    pub fn validate(&self) -> Result<(), VemError> {
        let bad = |m: &str| Err(VemError::InvalidConfig(m.to_string()));
        if self.window < 2 {
            return bad("window must hold at least 2 poses");
        }
        if self.em_iters == 0 {
            return bad("em_iters must be at least 1");
        }
        if !(self.elbo_tol >= 0.0) {
            return bad("elbo_tol must be non-negative");
        }
        if !(self.consistency_threshold > 0.0 && self.consistency_threshold < 1.0) {
            return bad("consistency_threshold must lie in (0, 1)");
        }
        if self.min_points == 0 {
            return bad("min_points must be at least 1");
        }
        if !(self.pseudo_change >= 0.0) {
            return bad("pseudo_change must be non-negative");
        }
        if !(self.count_cap > 0.0) {
            return bad("count_cap must be positive");
        }
        for (name, s) in [
            ("odometry sigma_xy", self.odom_noise.sigma_xy),
            ("odometry sigma_theta", self.odom_noise.sigma_theta),
            ("rigid_sigma", self.rigid_sigma),
            ("prior_sigma", self.prior_sigma),
        ] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(VemError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !(self.change_rate >= 0.0 && self.change_rate <= 1.0) {
            return bad("change_rate must lie in [0, 1]");
        }
        self.mixture.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Active,
    RejectedPending,
    Removed,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Active => "active",
            Status::RejectedPending => "rejected_pending",
            Status::Removed => "removed",
        }
    }
}

/// A mapped object: pose `T^{OW}`, landmark layout in the object frame,
/// landmark world positions and the consistency belief.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectModel {
    pub id: ObjectId,
    pub class_label: u8,
    pub pose: Pose2,
    pub template: Vec<Point2>,
    /// Keypoint descriptor of each landmark.
    pub descriptors: Vec<usize>,
    pub landmarks_world: Vec<Point2>,
    pub consistency: BetaState,
    pub change_magnitude: f64,
    pub status: Status,
    pub created_frame: usize,
    /// Mean unconstrained responsibility at the last observation.
    pub last_expected_pi: Option<f64>,
}

impl ObjectModel {
    pub fn landmark_for(&self, descriptor: usize) -> Option<usize> {
        self.descriptors.iter().position(|d| *d == descriptor)
    }

    /// Object-in-world placement, the inverse of `pose`.
    pub fn placement(&self) -> Pose2 {
        self.pose.inverse()
    }

    pub fn centroid(&self) -> Point2 {
        Point2::centroid(&self.landmarks_world).unwrap_or(Point2::ORIGIN)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LandmarkAssoc {
    Existing(usize),
    New,
    Ignored,
}

/// One object-level cluster of measured keypoints in the robot frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub frame_id: usize,
    pub class_label: u8,
    pub points_body: Vec<Point2>,
    pub descriptors: Vec<usize>,
    pub assoc_object: Option<ObjectId>,
    pub assoc_landmarks: Vec<LandmarkAssoc>,
}

impl Observation {
    pub fn new(frame_id: usize, class_label: u8) -> Self {
        Self {
            frame_id,
            class_label,
            points_body: Vec::new(),
            descriptors: Vec::new(),
            assoc_object: None,
            assoc_landmarks: Vec::new(),
        }
    }

    pub fn push(&mut self, point_body: Point2, descriptor: usize) {
        self.points_body.push(point_body);
        self.descriptors.push(descriptor);
    }

    pub fn clear_association(&mut self) {
        self.assoc_object = None;
        self.assoc_landmarks.clear();
    }
}

/// Sensor data of one frame as seen by the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub frame_id: usize,
    pub odometry: Pose2,
    pub init_offset: Pose2,
    pub observations: Vec<Observation>,
    /// Ground-truth robot pose, used only for error traces.
    pub gt_pose: Option<Pose2>,
}

impl From<&FrameData> for FrameInput {
    fn from(f: &FrameData) -> Self {
        Self {
            frame_id: f.frame_id,
            odometry: f.odometry_meas,
            init_offset: f.init_offset,
            observations: f.observations.clone(),
            gt_pose: Some(f.gt_pose),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSnapshot {
    pub id: ObjectId,
    pub expected_v: f64,
    pub expected_pi: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub status: Status,
    pub placement: Pose2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameReport {
    pub frame_id: usize,
    /// Robot-in-world estimate of this frame after optimization.
    pub estimate: Pose2,
    pub iterations: Vec<IterationTrace>,
    pub mode_flips: usize,
    pub associated: usize,
    /// New objects with the index of the observation that created them.
    pub created: Vec<(ObjectId, usize)>,
    pub rejected: Vec<ObjectId>,
    pub removed: Vec<ObjectId>,
    pub objects: Vec<ObjectSnapshot>,
}

#[derive(Debug, Clone)]
pub struct PipelineState {
    pub config: VemConfig,
    pub fov: Fov,
    pub library: BTreeMap<ObjectId, ObjectModel>,
    /// Estimated `T^{CW}` of every processed frame.
    pub trajectory: Vec<Pose2>,
    pub window: VariableSet,
    start_pose: Pose2,
    /// Odometry and measurement factors of earlier frames still in the window.
    frozen: Vec<Factor>,
    next_id: ObjectId,
}

impl PipelineState {
    /// `start_pose` is the known robot-in-world pose of frame 0.
    pub fn new(config: VemConfig, fov: Fov, start_pose: Pose2) -> Result<Self, VemError> {
        config.validate()?;
        Ok(Self {
            config,
            fov,
            library: BTreeMap::new(),
            trajectory: Vec::new(),
            window: VariableSet::default(),
            start_pose,
            frozen: Vec::new(),
            next_id: 0,
        })
    }

    /// Robot-in-world estimates of all processed frames.
    pub fn estimated_path(&self) -> Vec<Pose2> {
        self.trajectory.iter().map(|p| p.inverse()).collect()
    }

    pub fn frozen_factors(&self) -> &[Factor] {
        &self.frozen
    }

    fn window_start(&self, frame: usize) -> usize {
        (frame + 1).saturating_sub(self.config.window)
    }

    /// Predicted robot-in-world pose: previous estimate composed with odometry.
    pub fn predicted_pose(&self, input: &FrameInput) -> Pose2 {
        match self.trajectory.last() {
            None => self.start_pose,
            Some(prev) => prev.inverse().compose(&input.odometry),
        }
    }

    fn initial_pose(&self, input: &FrameInput) -> Pose2 {
        if self.trajectory.is_empty() {
            self.start_pose
        } else {
            self.predicted_pose(input).compose(&input.init_offset)
        }
    }

    /// Associates the frame's observations and assembles the window problem.
    /// Returns the problem, the associated observations and the indices of
    /// unmatched clusters.
    pub fn build_problem(
        &self,
        input: &FrameInput,
    ) -> Result<(FrameProblem, Vec<Observation>, Vec<usize>), VemError> {
        let t = input.frame_id;
        if t != self.trajectory.len() {
            return Err(VemError::FrameOrder {
                expected: self.trajectory.len(),
                got: t,
            });
        }
        let cfg = &self.config;
        let mut observations = input.observations.clone();
        observations
            .iter_mut()
            .for_each(Observation::clear_association);
        let predicted = self.predicted_pose(input);
        let proposals = associate(
            &mut observations,
            &self.library,
            &predicted,
            cfg.mixture.e_max,
        );

        let start = self.window_start(t);
        let mut vars = VariableSet::default();
        for f in start..t {
            vars.window_poses.push((f, self.trajectory[f]));
        }
        vars.window_poses
            .push((t, self.initial_pose(input).inverse()));

        let mut factors: Vec<Factor> = self
            .frozen
            .iter()
            .filter(|f| factor_in_window(f, start))
            .cloned()
            .collect();
        if t > 0 {
            factors.push(Factor::Odometry {
                prev: t - 1,
                curr: t,
                meas: input.odometry,
                noise: cfg.odom_noise,
            });
        }

        let mut in_graph: BTreeSet<ObjectId> = factors
            .iter()
            .filter_map(|f| match f {
                Factor::LandmarkMeasurement { landmark, .. } => Some(landmark.object),
                _ => None,
            })
            .collect();
        in_graph.extend(observations.iter().filter_map(|o| o.assoc_object));

        let gating = cfg.variant.gating();
        let mut current: BTreeMap<ObjectId, Vec<usize>> = BTreeMap::new();
        let mut priors = BTreeMap::new();
        for obs in &observations {
            let Some(id) = obs.assoc_object else { continue };
            let obj = &self.library[&id];
            priors.insert(id, obj.consistency);
            let (lps, lpc) = cfg.variant.log_priors(&obj.consistency);
            for (p, a) in obs.points_body.iter().zip(&obs.assoc_landmarks) {
                if let LandmarkAssoc::Existing(i) = a {
                    let mut mixture = MixtureTerm::new(cfg.mixture, &obj.consistency, gating);
                    mixture.log_prior_static = lps;
                    mixture.log_prior_changed = lpc;
                    current.entry(id).or_default().push(factors.len());
                    factors.push(Factor::LandmarkMeasurement {
                        frame: t,
                        landmark: LandmarkKey::new(id, *i),
                        obs: *p,
                        mixture,
                    });
                }
            }
        }

        for id in &in_graph {
            let obj = &self.library[id];
            vars.objects.insert(*id, obj.pose);
            for (i, (l, tmpl)) in obj.landmarks_world.iter().zip(&obj.template).enumerate() {
                let key = LandmarkKey::new(*id, i);
                vars.landmarks.insert(key, *l);
                factors.push(Factor::Rigid {
                    landmark: key,
                    template: *tmpl,
                    sigma: cfg.rigid_sigma,
                });
                factors.push(Factor::LandmarkPrior {
                    landmark: key,
                    previous: *l,
                    sigma: cfg.prior_sigma,
                });
            }
        }

        let problem = FrameProblem::new(
            crate::factors::FactorGraph::new(vars, factors),
            t,
            priors,
            current,
            cfg.variant,
            cfg.lm,
        )?;
        Ok((problem, observations, proposals))
    }

    /// Predict, associate, run variational EM, update the library and slide
    /// the window.
    pub fn process_frame(&mut self, input: &FrameInput) -> Result<FrameReport, VemError> {
        let (mut problem, observations, proposals) = self.build_problem(input)?;
        let t = input.frame_id;
        let iterations = if t == 0 {
            Vec::new()
        } else {
            problem.run(self.config.em_iters, self.config.elbo_tol, input.gt_pose)?
        };
        self.commit(problem, input, observations, proposals, iterations)
    }

    /// Applies a solved frame problem to the pipeline state.
    pub fn commit(
        &mut self,
        problem: FrameProblem,
        input: &FrameInput,
        observations: Vec<Observation>,
        proposals: Vec<usize>,
        iterations: Vec<IterationTrace>,
    ) -> Result<FrameReport, VemError> {
        let t = input.frame_id;
        for (f, pose) in &problem.graph.vars.window_poses {
            if *f < self.trajectory.len() {
                self.trajectory[*f] = *pose;
            } else {
                self.trajectory.push(*pose);
            }
        }
        let estimate = self.trajectory[t].inverse();
        let update = update_object_library(self, &problem, &observations, &proposals, &estimate)?;

        // Slide: keep factors that still touch the next window.
        let next_start = self.window_start(t + 1);
        let removed: BTreeSet<ObjectId> = update.removed.iter().copied().collect();
        let mut frozen: Vec<Factor> = self
            .frozen
            .drain(..)
            .filter(|f| factor_in_window(f, next_start) && !touches(f, &removed))
            .collect();
        if t > 0 {
            frozen.extend(
                problem
                    .graph
                    .factors
                    .iter()
                    .filter(|f| matches!(f, Factor::Odometry { curr, .. } if *curr == t))
                    .cloned(),
            );
        }
        for id in &update.accepted {
            if removed.contains(id) {
                continue;
            }
            for &i in problem.current.get(id).into_iter().flatten() {
                let mut f = problem.graph.factors[i].clone();
                if let Some(m) = f.mixture_mut() {
                    m.gating = Gating::Fixed;
                }
                frozen.push(f);
            }
        }
        frozen.extend(update.new_factors.iter().cloned());
        frozen.retain(|f| factor_in_window(f, next_start));
        self.frozen = frozen;

        let mut window = problem.graph.vars;
        window.window_poses.retain(|(f, _)| *f >= next_start);
        window.landmarks.retain(|k, _| !removed.contains(&k.object));
        window.objects.retain(|k, _| !removed.contains(k));
        self.window = window;

        let mode_flips = iterations.iter().map(|it| it.mode_flips).sum();
        let objects = self
            .library
            .values()
            .map(|o| ObjectSnapshot {
                id: o.id,
                expected_v: o.consistency.expectation(),
                expected_pi: o.last_expected_pi,
                alpha: o.consistency.alpha(),
                beta: o.consistency.beta(),
                status: o.status,
                placement: o.placement(),
            })
            .collect();
        Ok(FrameReport {
            frame_id: t,
            estimate,
            iterations,
            mode_flips,
            associated: observations
                .iter()
                .filter(|o| o.assoc_object.is_some())
                .count(),
            created: update.created,
            rejected: update.rejected,
            removed: update.removed,
            objects,
        })
    }

    fn allocate_id(&mut self) -> ObjectId {
        let id = self.next_id;
        self.next_id += 1;
        id
    }
}

fn factor_in_window(f: &Factor, start: usize) -> bool {
    match f {
        Factor::Odometry { prev, .. } => *prev >= start,
        Factor::LandmarkMeasurement { frame, .. } => *frame >= start,
        _ => true,
    }
}

fn touches(f: &Factor, objects: &BTreeSet<ObjectId>) -> bool {
    match f {
        Factor::LandmarkMeasurement { landmark, .. }
        | Factor::Rigid { landmark, .. }
        | Factor::LandmarkPrior { landmark, .. } => objects.contains(&landmark.object),
        Factor::Odometry { .. } => false,
    }
}
