//! Augmented factor graph: odometry, object rigidity, landmark prior and
//! max-mixture landmark measurement factors over a sliding window.
//!
//! Frame convention: a pose `T^{AB}` maps frame-`B` coordinates into frame `A`.
//! Robot poses are stored as `T^{CW}` (world → robot) and object poses as
//! `T^{OW}` (world → object).

mod solver;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::consistency::{
    gaussian_log_density, uniform_log_density, xlogx, BetaState, EStepWeights, MixtureParams,
};
use crate::geom::{normalize_angle, Point2, Pose2};

pub use solver::{lm_solve, LmOptions, SolveError, SolveReport};

pub type FrameId = usize;
pub type ObjectId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LandmarkKey {
    pub object: ObjectId,
    pub index: usize,
}

impl LandmarkKey {
    pub fn new(object: ObjectId, index: usize) -> Self {
        Self { object, index }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarKey {
    Pose(FrameId),
    Landmark(LandmarkKey),
    Object(ObjectId),
}

impl VarKey {
    /// Dimension of the variable's retraction parameters.
    pub fn dim(&self) -> usize {
        match self {
            VarKey::Landmark(_) => 2,
            VarKey::Pose(_) | VarKey::Object(_) => 3,
        }
    }
}

impl fmt::Display for VarKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VarKey::Pose(t) => write!(f, "pose:{t}"),
            VarKey::Landmark(k) => write!(f, "landmark:{}.{}", k.object, k.index),
            VarKey::Object(o) => write!(f, "object:{o}"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FactorError {
    #[error("factor references missing variable {0}")]
    MissingVariable(VarKey),
}

/// Variables of one sliding-window problem. The first window pose is the gauge
/// anchor and is never updated by the solver.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VariableSet {
    pub window_poses: Vec<(FrameId, Pose2)>,
    pub landmarks: BTreeMap<LandmarkKey, Point2>,
    pub objects: BTreeMap<ObjectId, Pose2>,
}

impl VariableSet {
    pub fn anchor(&self) -> Option<FrameId> {
        self.window_poses.first().map(|(t, _)| *t)
    }

    pub fn pose(&self, frame: FrameId) -> Result<Pose2, FactorError> {
        self.window_poses
            .iter()
            .find(|(t, _)| *t == frame)
            .map(|(_, p)| *p)
            .ok_or(FactorError::MissingVariable(VarKey::Pose(frame)))
    }

    pub fn landmark(&self, key: LandmarkKey) -> Result<Point2, FactorError> {
        self.landmarks
            .get(&key)
            .copied()
            .ok_or(FactorError::MissingVariable(VarKey::Landmark(key)))
    }

    pub fn object(&self, id: ObjectId) -> Result<Pose2, FactorError> {
        self.objects
            .get(&id)
            .copied()
            .ok_or(FactorError::MissingVariable(VarKey::Object(id)))
    }

    /// Optimized variables in a fixed order: window poses after the anchor,
    /// then landmarks, then object poses.
    pub fn free_variables(&self) -> Vec<VarKey> {
        let poses = self
            .window_poses
            .iter()
            .skip(1)
            .map(|(t, _)| VarKey::Pose(*t));
        let landmarks = self.landmarks.keys().map(|k| VarKey::Landmark(*k));
        let objects = self.objects.keys().map(|o| VarKey::Object(*o));
        poses.chain(landmarks).chain(objects).collect()
    }

    pub fn retract(&mut self, key: VarKey, delta: &[f64]) {
        match key {
            VarKey::Pose(t) => {
                if let Some((_, p)) = self.window_poses.iter_mut().find(|(f, _)| *f == t) {
                    *p = p.retract([delta[0], delta[1], delta[2]]);
                }
            }
            VarKey::Landmark(k) => {
                if let Some(l) = self.landmarks.get_mut(&k) {
                    *l = *l + Point2::new(delta[0], delta[1]);
                }
            }
            VarKey::Object(o) => {
                if let Some(p) = self.objects.get_mut(&o) {
                    *p = p.retract([delta[0], delta[1], delta[2]]);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseNoise {
    pub sigma_xy: f64,
    pub sigma_theta: f64,
}

impl Default for PoseNoise {
    fn default() -> Self {
        Self {
            sigma_xy: 0.05,
            sigma_theta: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorKind {
    Odometry,
    Rigid,
    LandmarkPrior,
    LandmarkMeasurement,
}

impl FactorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FactorKind::Odometry => "odometry",
            FactorKind::Rigid => "rigid",
            FactorKind::LandmarkPrior => "landmark_prior",
            FactorKind::LandmarkMeasurement => "landmark_measurement",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mode {
    Static,
    Changed,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Static => "static",
            Mode::Changed => "changed",
        }
    }
}

/// How a measurement factor's max-mixture mode is revised during a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gating {
    /// Compare `E[v]`-weighted mode likelihoods (the default).
    ExpectedV,
    /// Compare the factor's own unconstrained `E[π]`-weighted likelihoods.
    ExpectedPi,
    /// Never reject; the landmark stays in the Gaussian mode.
    AlwaysStatic,
    /// Mode and weights frozen (factors carried over from earlier frames).
    Fixed,
}

impl Gating {
    pub fn is_dynamic(&self) -> bool {
        matches!(self, Gating::ExpectedV | Gating::ExpectedPi)
    }
}

/// Mixture state carried by a landmark measurement factor.
///
/// `log_prior_static` / `log_prior_changed` hold the log mixing terms used by
/// the E-step (`E[log v]`, `E[log(1-v)]`). `weights` are the responsibilities
/// that enter the objective; a factor in the changed mode always carries
/// `(0, 1)`. `free_weights` are the unconstrained E-step responsibilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureTerm {
    pub params: MixtureParams,
    pub log_prior_static: f64,
    pub log_prior_changed: f64,
    pub expected_v: f64,
    pub free_weights: EStepWeights,
    pub weights: EStepWeights,
    pub mode: Mode,
    pub gating: Gating,
}

impl MixtureTerm {
    /// A term in the static mode with unit weight, mixing terms taken from `state`.
    pub fn new(params: MixtureParams, state: &BetaState, gating: Gating) -> Self {
        Self {
            params,
            log_prior_static: state.expected_log_v(),
            log_prior_changed: state.expected_log_1mv(),
            expected_v: state.expectation(),
            free_weights: EStepWeights::STATIC,
            weights: EStepWeights::STATIC,
            mode: Mode::Static,
            gating,
        }
    }

    /// Plain weighted Gaussian factor that never changes mode.
    pub fn fixed(params: MixtureParams, weights: EStepWeights) -> Self {
        Self {
            params,
            log_prior_static: 0.0,
            log_prior_changed: 0.0,
            expected_v: 1.0,
            free_weights: weights,
            weights,
            mode: Mode::Static,
            gating: Gating::Fixed,
        }
    }

    pub fn with_weights(mut self, weights: EStepWeights, mode: Mode) -> Self {
        self.free_weights = weights;
        self.mode = mode;
        self.weights = match mode {
            Mode::Static => weights,
            Mode::Changed => EStepWeights::CHANGED,
        };
        self
    }

    /// Max-mixture decision for `residual` under this term's gating rule.
    pub fn select(&self, residual: Point2) -> Mode {
        match self.gating {
            Gating::ExpectedV => select_mode(residual, self.expected_v, &self.params),
            Gating::ExpectedPi => select_mode(residual, self.free_weights.w_static, &self.params),
            Gating::AlwaysStatic => Mode::Static,
            Gating::Fixed => self.mode,
        }
    }

    /// Switches mode: rejecting forces `(0, 1)` weights, accepting restores the
    /// free E-step weights. Returns whether the mode changed.
    pub fn set_mode(&mut self, mode: Mode) -> bool {
        if mode == self.mode {
            return false;
        }
        self.mode = mode;
        self.weights = match mode {
            Mode::Static => self.free_weights,
            Mode::Changed => EStepWeights::CHANGED,
        };
        true
    }

    /// Per-component square-root information of the residual.
    pub fn sqrt_information(&self) -> f64 {
        match self.mode {
            Mode::Static => self.weights.w_static.sqrt() / self.params.sigma,
            Mode::Changed => 0.0,
        }
    }

    /// Negative landmark lower bound:
    /// `-(E[π](m_s + log N(e)) + E[1-π](m_c + log U) + H[q(π)])`.
    pub fn cost(&self, residual: Point2) -> f64 {
        let p = &self.params;
        match self.mode {
            Mode::Changed => -(self.log_prior_changed + uniform_log_density(p)),
            Mode::Static => {
                let w = &self.weights;
                let static_part = if w.w_static > 0.0 {
                    -w.w_static * (self.log_prior_static + gaussian_log_density(residual, p))
                } else {
                    0.0
                };
                let changed_part = if w.w_changed > 0.0 {
                    -w.w_changed * (self.log_prior_changed + uniform_log_density(p))
                } else {
                    0.0
                };
                static_part + changed_part + xlogx(w.w_static) + xlogx(w.w_changed)
            }
        }
    }
}

fn select_mode(residual: Point2, weight_static: f64, p: &MixtureParams) -> Mode {
    let log_static = weight_static.ln() + gaussian_log_density(residual, p);
    let log_changed = (1.0 - weight_static).ln() + uniform_log_density(p);
    if log_static >= log_changed {
        Mode::Static
    } else {
        Mode::Changed
    }
}

/// Max-mixture decision gated by the consistency expectation `E[v]`; ties go
/// to the static mode.
pub fn max_mixture_select(residual: Point2, s: &BetaState, p: &MixtureParams) -> Mode {
    select_mode(residual, s.expectation(), p)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Factor {
    Odometry {
        prev: FrameId,
        curr: FrameId,
        meas: Pose2,
        noise: PoseNoise,
    },
    Rigid {
        landmark: LandmarkKey,
        template: Point2,
        sigma: f64,
    },
    LandmarkPrior {
        landmark: LandmarkKey,
        previous: Point2,
        sigma: f64,
    },
    LandmarkMeasurement {
        frame: FrameId,
        landmark: LandmarkKey,
        obs: Point2,
        mixture: MixtureTerm,
    },
}

/// Odometry deviation `T_t (T_{t-1})^{-1} M` as `(x, y, θ)`, poses being world → robot.
pub fn odometry_residual(prev: &Pose2, curr: &Pose2, meas: &Pose2) -> [f64; 3] {
    let offset = curr.compose(&prev.inverse()).compose(meas);
    [offset.x(), offset.y(), normalize_angle(offset.theta())]
}

/// `T^{OW} l^W - l^O`.
pub fn rigid_residual(object_pose: &Pose2, landmark_world: Point2, template: Point2) -> Point2 {
    object_pose.apply(landmark_world) - template
}

pub fn landmark_prior_residual(landmark_world: Point2, previous: Point2) -> Point2 {
    landmark_world - previous
}

/// `(T^{CW})^{-1} d^C - l^W`.
pub fn landmark_measurement_residual(
    robot_pose: &Pose2,
    landmark_world: Point2,
    obs_body: Point2,
) -> Point2 {
    robot_pose.inverse().apply(obs_body) - landmark_world
}

/// Derivative of `R(θ) p` with respect to `θ`.
fn rotation_derivative(theta: f64, p: Point2) -> Point2 {
    let (s, c) = theta.sin_cos();
    Point2::new(-s * p.x - c * p.y, c * p.x - s * p.y)
}

fn point_vec(p: Point2) -> DVector<f64> {
    DVector::from_column_slice(&[p.x, p.y])
}

impl Factor {
    pub fn kind(&self) -> FactorKind {
        match self {
            Factor::Odometry { .. } => FactorKind::Odometry,
            Factor::Rigid { .. } => FactorKind::Rigid,
            Factor::LandmarkPrior { .. } => FactorKind::LandmarkPrior,
            Factor::LandmarkMeasurement { .. } => FactorKind::LandmarkMeasurement,
        }
    }

    pub fn variables(&self) -> Vec<VarKey> {
        match self {
            Factor::Odometry { prev, curr, .. } => vec![VarKey::Pose(*prev), VarKey::Pose(*curr)],
            Factor::Rigid { landmark, .. } => {
                vec![VarKey::Object(landmark.object), VarKey::Landmark(*landmark)]
            }
            Factor::LandmarkPrior { landmark, .. } => vec![VarKey::Landmark(*landmark)],
            Factor::LandmarkMeasurement {
                frame, landmark, ..
            } => vec![VarKey::Pose(*frame), VarKey::Landmark(*landmark)],
        }
    }

    pub fn mixture(&self) -> Option<&MixtureTerm> {
        match self {
            Factor::LandmarkMeasurement { mixture, .. } => Some(mixture),
            _ => None,
        }
    }

    pub fn mixture_mut(&mut self) -> Option<&mut MixtureTerm> {
        match self {
            Factor::LandmarkMeasurement { mixture, .. } => Some(mixture),
            _ => None,
        }
    }

    /// Landmark residual of a measurement factor as a point.
    pub fn measurement_residual(&self, vars: &VariableSet) -> Result<Option<Point2>, FactorError> {
        match self {
            Factor::LandmarkMeasurement {
                frame,
                landmark,
                obs,
                ..
            } => Ok(Some(landmark_measurement_residual(
                &vars.pose(*frame)?,
                vars.landmark(*landmark)?,
                *obs,
            ))),
            _ => Ok(None),
        }
    }

    /// Unwhitened residual.
    pub fn residual(&self, vars: &VariableSet) -> Result<DVector<f64>, FactorError> {
        Ok(match self {
            Factor::Odometry {
                prev, curr, meas, ..
            } => DVector::from_column_slice(&odometry_residual(
                &vars.pose(*prev)?,
                &vars.pose(*curr)?,
                meas,
            )),
            Factor::Rigid {
                landmark, template, ..
            } => point_vec(rigid_residual(
                &vars.object(landmark.object)?,
                vars.landmark(*landmark)?,
                *template,
            )),
            Factor::LandmarkPrior {
                landmark, previous, ..
            } => point_vec(landmark_prior_residual(
                vars.landmark(*landmark)?,
                *previous,
            )),
            Factor::LandmarkMeasurement { .. } => point_vec(
                self.measurement_residual(vars)?
                    .expect("measurement factor"),
            ),
        })
    }

    /// Diagonal square-root information applied to the residual.
    pub fn sqrt_information(&self) -> DVector<f64> {
        match self {
            Factor::Odometry { noise, .. } => DVector::from_column_slice(&[
                1.0 / noise.sigma_xy,
                1.0 / noise.sigma_xy,
                1.0 / noise.sigma_theta,
            ]),
            Factor::Rigid { sigma, .. } | Factor::LandmarkPrior { sigma, .. } => {
                DVector::from_element(2, 1.0 / sigma)
            }
            Factor::LandmarkMeasurement { mixture, .. } => {
                DVector::from_element(2, mixture.sqrt_information())
            }
        }
    }

    /// Negative log-objective contribution of this factor.
    pub fn cost(&self, vars: &VariableSet) -> Result<f64, FactorError> {
        match self {
            Factor::LandmarkMeasurement { mixture, .. } => {
                let e = self
                    .measurement_residual(vars)?
                    .expect("measurement factor");
                Ok(mixture.cost(e))
            }
            _ => {
                let r = self.residual(vars)?;
                let s = self.sqrt_information();
                Ok(0.5 * r.component_mul(&s).norm_squared())
            }
        }
    }

    /// Analytic Jacobians of the unwhitened residual with respect to each
    /// variable's retraction parameters. Changed-mode measurement factors
    /// return zero blocks.
    pub fn jacobians(
        &self,
        vars: &VariableSet,
    ) -> Result<Vec<(VarKey, DMatrix<f64>)>, FactorError> {
        Ok(match self {
            Factor::Odometry {
                prev, curr, meas, ..
            } => {
                let p = vars.pose(*prev)?;
                let a = vars.pose(*curr)?;
                let delta = a.theta() - p.theta();
                let v = meas.translation() - p.translation();
                let dv = rotation_derivative(delta, v);
                let (s, c) = delta.sin_cos();
                #[rustfmt::skip]
                let j_prev = DMatrix::from_row_slice(3, 3, &[
                    -c,  s, -dv.x,
                    -s, -c, -dv.y,
                    0.0, 0.0, -1.0,
                ]);
                #[rustfmt::skip]
                let j_curr = DMatrix::from_row_slice(3, 3, &[
                    1.0, 0.0, dv.x,
                    0.0, 1.0, dv.y,
                    0.0, 0.0, 1.0,
                ]);
                vec![(VarKey::Pose(*prev), j_prev), (VarKey::Pose(*curr), j_curr)]
            }
            Factor::Rigid { landmark, .. } => {
                let o = vars.object(landmark.object)?;
                let l = vars.landmark(*landmark)?;
                let dl = rotation_derivative(o.theta(), l);
                let (s, c) = o.theta().sin_cos();
                #[rustfmt::skip]
                let j_obj = DMatrix::from_row_slice(2, 3, &[
                    1.0, 0.0, dl.x,
                    0.0, 1.0, dl.y,
                ]);
                let j_l = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
                vec![
                    (VarKey::Object(landmark.object), j_obj),
                    (VarKey::Landmark(*landmark), j_l),
                ]
            }
            Factor::LandmarkPrior { landmark, .. } => {
                vars.landmark(*landmark)?;
                vec![(VarKey::Landmark(*landmark), DMatrix::identity(2, 2))]
            }
            Factor::LandmarkMeasurement {
                frame,
                landmark,
                obs,
                mixture,
            } => {
                let pose = vars.pose(*frame)?;
                vars.landmark(*landmark)?;
                if mixture.mode == Mode::Changed {
                    vec![
                        (VarKey::Pose(*frame), DMatrix::zeros(2, 3)),
                        (VarKey::Landmark(*landmark), DMatrix::zeros(2, 2)),
                    ]
                } else {
                    // e = R(θ)^T (d - t) - l
                    let (s, c) = pose.theta().sin_cos();
                    let d = *obs - pose.translation();
                    let dth = Point2::new(-s * d.x + c * d.y, -c * d.x - s * d.y);
                    #[rustfmt::skip]
                    let j_pose = DMatrix::from_row_slice(2, 3, &[
                        -c, -s, dth.x,
                         s, -c, dth.y,
                    ]);
                    vec![
                        (VarKey::Pose(*frame), j_pose),
                        (VarKey::Landmark(*landmark), -DMatrix::identity(2, 2)),
                    ]
                }
            }
        })
    }
}

pub fn factor_cost(f: &Factor, vars: &VariableSet) -> Result<f64, FactorError> {
    f.cost(vars)
}

pub fn jacobians(
    f: &Factor,
    vars: &VariableSet,
) -> Result<Vec<(VarKey, DMatrix<f64>)>, FactorError> {
    f.jacobians(vars)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FactorGraph {
    pub vars: VariableSet,
    pub factors: Vec<Factor>,
}

impl FactorGraph {
    pub fn new(vars: VariableSet, factors: Vec<Factor>) -> Self {
        Self { vars, factors }
    }

    pub fn total_cost(&self) -> Result<f64, FactorError> {
        self.factors.iter().map(|f| f.cost(&self.vars)).sum()
    }

    /// Re-evaluates every dynamically gated measurement factor at the current
    /// variables and returns the number of mode flips.
    pub fn refresh_modes(&mut self) -> Result<usize, FactorError> {
        let mut flips = 0;
        for f in &mut self.factors {
            let Some(residual) = f.measurement_residual(&self.vars)? else {
                continue;
            };
            let mixture = f.mixture_mut().expect("measurement factor");
            if mixture.gating.is_dynamic() {
                let mode = mixture.select(residual);
                if mixture.set_mode(mode) {
                    flips += 1;
                }
            }
        }
        Ok(flips)
    }

    /// Line-oriented dump: one record per variable and per factor.
    pub fn write_dump<W: Write>(&self, out: &mut W, tag: &str) -> io::Result<()> {
        let anchor = self.vars.anchor();
        for (t, p) in &self.vars.window_poses {
            writeln!(
                out,
                "{tag} var pose {t} {:.9} {:.9} {:.9} fixed={}",
                p.x(),
                p.y(),
                p.theta(),
                u8::from(Some(*t) == anchor)
            )?;
        }
        for (k, l) in &self.vars.landmarks {
            writeln!(
                out,
                "{tag} var landmark {}.{} {:.9} {:.9}",
                k.object, k.index, l.x, l.y
            )?;
        }
        for (o, p) in &self.vars.objects {
            writeln!(
                out,
                "{tag} var object {o} {:.9} {:.9} {:.9}",
                p.x(),
                p.y(),
                p.theta()
            )?;
        }
        for (i, f) in self.factors.iter().enumerate() {
            let vars: Vec<String> = f.variables().iter().map(|v| v.to_string()).collect();
            let residual = f
                .residual(&self.vars)
                .map(|r| {
                    r.iter()
                        .map(|x| format!("{x:.9}"))
                        .collect::<Vec<_>>()
                        .join(",")
                })
                .unwrap_or_else(|e| format!("error:{e}"));
            write!(
                out,
                "{tag} factor {i} {} {} residual={residual}",
                f.kind().as_str(),
                vars.join(",")
            )?;
            if let Some(m) = f.mixture() {
                write!(
                    out,
                    " mode={} w_static={:.9} w_changed={:.9} e_v={:.9}",
                    m.mode.as_str(),
                    m.weights.w_static,
                    m.weights.w_changed,
                    m.expected_v
                )?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}
