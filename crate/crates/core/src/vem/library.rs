use std::collections::BTreeSet;

use crate::consistency::{apply_pseudo_change, beta_update, update_change_magnitude, EStepWeights};
use crate::factors::{Factor, LandmarkKey, MixtureTerm, ObjectId, VariableSet};
use crate::geom::{Point2, Pose2};

use super::{
    FrameProblem, LandmarkAssoc, ObjectModel, Observation, PipelineState, Status, VemConfig,
    VemError,
};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LibraryUpdate {
    pub accepted: Vec<ObjectId>,
    pub rejected: Vec<ObjectId>,
    pub removed: Vec<ObjectId>,
    /// New objects with the index of the observation that created them.
    pub created: Vec<(ObjectId, usize)>,
    /// First-observation factors of new objects and new landmarks.
    pub new_factors: Vec<Factor>,
}

fn refresh_from(obj: &mut ObjectModel, vars: &VariableSet) {
    if let Some(pose) = vars.objects.get(&obj.id) {
        obj.pose = *pose;
    }
    for (i, l) in obj.landmarks_world.iter_mut().enumerate() {
        if let Some(v) = vars.landmarks.get(&LandmarkKey::new(obj.id, i)) {
            *l = *v;
        }
    }
}

fn in_frustum(obj: &ObjectModel, robot: &Pose2, state: &PipelineState) -> bool {
    let body = robot.inverse().apply(obj.centroid());
    let cfg = &state.config;
    body.norm() <= state.fov.max_range - cfg.frustum_margin
        && body.y.atan2(body.x).abs() <= state.fov.half_angle - cfg.frustum_angle_margin
}

/// Moves an object along active → rejected_pending → removed while its
/// consistency stays below the threshold. Returns true on removal.
fn apply_status(obj: &mut ObjectModel, cfg: &VemConfig) -> bool {
    if obj.consistency.expectation() < cfg.consistency_threshold {
        match obj.status {
            Status::Active => obj.status = Status::RejectedPending,
            Status::RejectedPending => {
                obj.status = Status::Removed;
                return true;
            }
            Status::Removed => {}
        }
    } else if obj.status == Status::RejectedPending {
        obj.status = Status::Active;
    }
    false
}

fn first_observation(frame: usize, key: LandmarkKey, obs: Point2, cfg: &VemConfig) -> Factor {
    Factor::LandmarkMeasurement {
        frame,
        landmark: key,
        obs,
        mixture: MixtureTerm::fixed(cfg.mixture, EStepWeights::STATIC),
    }
}

/// Folds the frame's result into the object library.
///
/// Observed objects receive one conjugate update per measured landmark.
/// Objects whose mean responsibility is at least one half are accepted: their
/// landmarks and pose take the optimized values and unseen keypoints become
/// new landmarks. Rejected objects keep their map. Objects that should have
/// been visible but were not associated receive a pseudo-change penalty.
/// Objects removed while observed are re-instantiated from the current
/// observation under a fresh id, as are unmatched clusters with enough points.
pub fn update_object_library(
    state: &mut PipelineState,
    problem: &FrameProblem,
    observations: &[Observation],
    proposals: &[usize],
    robot: &Pose2,
) -> Result<LibraryUpdate, VemError> {
    let cfg = state.config.clone();
    let frame = problem.frame;
    let vars = &problem.graph.vars;
    let mut update = LibraryUpdate::default();
    let mut associated = BTreeSet::new();
    let mut relocalize = Vec::new();

    for (k, obs) in observations.iter().enumerate() {
        let Some(id) = obs.assoc_object else { continue };
        associated.insert(id);
        let weights = problem.effective_weights(id);
        let obj = state
            .library
            .get_mut(&id)
            .expect("associated object exists");
        for w in &weights {
            obj.consistency = beta_update(&obj.consistency, w.w_static, cfg.count_cap);
        }
        obj.last_expected_pi = problem.mean_free_static_weight(id);
        let mean_r = if weights.is_empty() {
            1.0
        } else {
            weights.iter().map(|w| w.w_static).sum::<f64>() / weights.len() as f64
        };

        if mean_r >= 0.5 {
            update.accepted.push(id);
            refresh_from(obj, vars);
            let norms: Vec<f64> = problem
                .current
                .get(&id)
                .into_iter()
                .flatten()
                .map(|&i| problem.graph.factors[i].measurement_residual(vars))
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .flatten()
                .map(|e| e.norm())
                .collect();
            if !norms.is_empty() {
                let mean = norms.iter().sum::<f64>() / norms.len() as f64;
                obj.change_magnitude =
                    update_change_magnitude(obj.change_magnitude, mean, cfg.change_rate);
            }
            for ((p, d), a) in obs
                .points_body
                .iter()
                .zip(&obs.descriptors)
                .zip(&obs.assoc_landmarks)
            {
                if *a == LandmarkAssoc::New && obj.landmark_for(*d).is_none() {
                    let world = robot.apply(*p);
                    let key = LandmarkKey::new(id, obj.landmarks_world.len());
                    obj.template.push(obj.pose.apply(world));
                    obj.landmarks_world.push(world);
                    obj.descriptors.push(*d);
                    update
                        .new_factors
                        .push(first_observation(frame, key, *p, &cfg));
                }
            }
        } else {
            update.rejected.push(id);
        }
        if apply_status(obj, &cfg) {
            update.removed.push(id);
            relocalize.push(k);
        }
    }

    for obj in state.library.values_mut() {
        if associated.contains(&obj.id) || obj.status == Status::Removed {
            continue;
        }
        if obj.status == Status::Active {
            refresh_from(obj, vars);
        }
    }

    let unseen: Vec<ObjectId> = state
        .library
        .values()
        .filter(|o| {
            o.status != Status::Removed
                && !associated.contains(&o.id)
                && o.created_frame < frame
                && in_frustum(o, robot, state)
        })
        .map(|o| o.id)
        .collect();
    for id in unseen {
        let obj = state.library.get_mut(&id).expect("listed object exists");
        obj.consistency = apply_pseudo_change(&obj.consistency, cfg.pseudo_change, cfg.count_cap);
        if apply_status(obj, &cfg) {
            update.removed.push(id);
        }
    }

    let mut sources: Vec<usize> = proposals.iter().chain(&relocalize).copied().collect();
    sources.sort_unstable();
    for k in sources {
        let obs = &observations[k];
        if obs.points_body.len() < cfg.min_points {
            continue;
        }
        let world: Vec<Point2> = obs.points_body.iter().map(|p| robot.apply(*p)).collect();
        let c = Point2::centroid(&world).expect("non-empty cluster");
        let id = state.allocate_id();
        for (i, p) in obs.points_body.iter().enumerate() {
            update
                .new_factors
                .push(first_observation(frame, LandmarkKey::new(id, i), *p, &cfg));
        }
        state.library.insert(
            id,
            ObjectModel {
                id,
                class_label: obs.class_label,
                pose: Pose2::from_parts(-c, 0.0),
                template: world.iter().map(|w| *w - c).collect(),
                descriptors: obs.descriptors.clone(),
                landmarks_world: world,
                consistency: cfg.prior,
                change_magnitude: 0.0,
                status: Status::Active,
                created_frame: frame,
                last_expected_pi: None,
            },
        );
        update.created.push((id, k));
    }
    Ok(update)
}
