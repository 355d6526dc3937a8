use std::collections::BTreeMap;

use crate::factors::ObjectId;
use crate::geom::{Point2, Pose2};

use super::{LandmarkAssoc, ObjectModel, Observation, Status};

/// Distance between an observation and an object over their shared keypoint
/// descriptors, with the observation placed at `robot_pose` (robot-in-world).
fn centroid_distance(obs: &Observation, obj: &ObjectModel, robot_pose: &Pose2) -> Option<f64> {
    let mut seen = Vec::new();
    let mut mapped = Vec::new();
    for (p, d) in obs.points_body.iter().zip(&obs.descriptors) {
        if let Some(i) = obj.landmark_for(*d) {
            seen.push(robot_pose.apply(*p));
            mapped.push(obj.landmarks_world[i]);
        }
    }
    let a = Point2::centroid(&seen)?;
    let b = Point2::centroid(&mapped)?;
    Some((a - b).norm())
}

/// Greedy gated nearest-neighbour association of observed clusters to
/// library objects.
///
/// Candidate pairs need matching class labels, at least one shared keypoint
/// descriptor and a centroid distance within `gate`. Pairs are taken in order
/// of increasing distance, one-to-one. Points of an associated cluster are
/// linked to the landmark carrying their descriptor, marked new when the
/// object has no such landmark, and ignored when their residual exceeds the
/// gate. Returns the indices of unmatched clusters.
pub fn associate(
    observations: &mut [Observation],
    library: &BTreeMap<ObjectId, ObjectModel>,
    robot_pose: &Pose2,
    gate: f64,
) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize, ObjectId)> = Vec::new();
    for (k, obs) in observations.iter().enumerate() {
        for obj in library.values().filter(|o| o.status != Status::Removed) {
            if obj.class_label != obs.class_label {
                continue;
            }
            if let Some(d) = centroid_distance(obs, obj, robot_pose) {
                if d <= gate {
                    pairs.push((d, k, obj.id));
                }
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut taken_objects = Vec::new();
    for (_, k, id) in pairs {
        if observations[k].assoc_object.is_some() || taken_objects.contains(&id) {
            continue;
        }
        taken_objects.push(id);
        let obj = &library[&id];
        let obs = &mut observations[k];
        obs.assoc_object = Some(id);
        obs.assoc_landmarks = obs
            .points_body
            .iter()
            .zip(&obs.descriptors)
            .map(|(p, d)| match obj.landmark_for(*d) {
                Some(i) if (robot_pose.apply(*p) - obj.landmarks_world[i]).norm() <= gate => {
                    LandmarkAssoc::Existing(i)
                }
                Some(_) => LandmarkAssoc::Ignored,
                None => LandmarkAssoc::New,
            })
            .collect();
    }
    observations
        .iter()
        .enumerate()
        .filter(|(_, o)| o.assoc_object.is_none())
        .map(|(k, _)| k)
        .collect()
}
