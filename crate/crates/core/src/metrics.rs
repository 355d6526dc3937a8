//! Trajectory and change-detection metrics.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::factors::ObjectId;
use crate::geom::Pose2;
use crate::vem::Status;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("trajectory lengths differ: {est} estimated vs {gt} ground-truth poses")]
    LengthMismatch { est: usize, gt: usize },
    #[error("empty trajectory")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunMetrics {
    /// Root-mean-square translational error after frame-0 alignment (m).
    pub ate: f64,
    /// Maximum per-frame translational error (m).
    pub mpe: f64,
    pub change_precision: f64,
    pub change_recall: f64,
    pub mode_flips: usize,
    /// Wall-clock seconds; not written to the deterministic CSV outputs.
    pub runtime: f64,
}

/// Per-frame translational errors.
pub fn position_errors(est: &[Pose2], gt: &[Pose2]) -> Result<Vec<f64>, MetricsError> {
    if est.len() != gt.len() {
        return Err(MetricsError::LengthMismatch {
            est: est.len(),
            gt: gt.len(),
        });
    }
    if est.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(est
        .iter()
        .zip(gt)
        .map(|(e, g)| (e.translation() - g.translation()).norm())
        .collect())
}

/// Rigidly moves `est` so that its first pose coincides with `gt[0]`.
pub fn align_to_first(est: &[Pose2], gt: &[Pose2]) -> Vec<Pose2> {
    match (est.first(), gt.first()) {
        (Some(e0), Some(g0)) => {
            let align = g0.compose(&e0.inverse());
            est.iter().map(|e| align.compose(e)).collect()
        }
        _ => est.to_vec(),
    }
}

/// `(ATE, MPE)` of an estimated robot-in-world trajectory.
pub fn trajectory_errors(est: &[Pose2], gt: &[Pose2]) -> Result<(f64, f64), MetricsError> {
    let errors = position_errors(est, gt)?;
    let ate = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt();
    let mpe = errors.iter().copied().fold(0.0, f64::max);
    Ok((ate, mpe))
}

/// Links between library objects and the scene objects that produced them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObjectTruth {
    /// Library id → generating scene object id.
    pub links: BTreeMap<ObjectId, u32>,
    /// Library id → frame of creation.
    pub created: BTreeMap<ObjectId, usize>,
    /// Scene object id → frame of its first scripted move.
    pub moves: BTreeMap<u32, usize>,
}

/// `(precision, recall)` of change detection.
///
/// A library object counts as flagged once its status is `rejected_pending`
/// or `removed`. Only objects mapped before their scene object's move are
/// scored. A flag is correct when the scene object moved and the flag came
/// at or after the move. Recall is over moved scene objects that were mapped
/// before moving. Empty denominators score 1.
pub fn change_detection(history: &[(usize, ObjectId, Status)], truth: &ObjectTruth) -> (f64, f64) {
    let mut first_flag: BTreeMap<ObjectId, usize> = BTreeMap::new();
    for (frame, id, status) in history {
        if *status != Status::Active {
            first_flag.entry(*id).or_insert(*frame);
        }
    }
    let eligible = |id: &ObjectId, gt: &u32| match truth.moves.get(gt) {
        Some(m) => truth.created.get(id).is_some_and(|c| c < m),
        None => true,
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut detected = std::collections::BTreeSet::new();
    for (id, frame) in &first_flag {
        let Some(gt) = truth.links.get(id) else {
            continue;
        };
        if !eligible(id, gt) {
            continue;
        }
        match truth.moves.get(gt) {
            Some(m) if frame >= m => {
                tp += 1;
                detected.insert(*gt);
            }
            _ => fp += 1,
        }
    }
    let moved_mapped: std::collections::BTreeSet<u32> = truth
        .links
        .iter()
        .filter(|(id, gt)| truth.moves.contains_key(gt) && eligible(id, gt))
        .map(|(_, gt)| *gt)
        .collect();
    let precision = if tp + fp == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if moved_mapped.is_empty() {
        1.0
    } else {
        detected.len() as f64 / moved_mapped.len() as f64
    };
    (precision, recall)
}
