//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Every export returns a JSON document. The `*_json` functions hold the logic
//! and are usable natively.

use serde::Serialize;
use thiserror::Error;
use wasm_bindgen::prelude::*;

use semistatic_vem::consistency::{e_step_weights, BetaState, MixtureParams};
use semistatic_vem::factors::{max_mixture_select, Mode};
use semistatic_vem::geom::{Point2, Pose2};
use semistatic_vem::runner::{run_scenario_observed, RunError};
use semistatic_vem::sim::{generate_scene, preset, simulate, Fov, ScenarioError};
use semistatic_vem::vem::{Variant, VemConfig};

#[derive(Debug, Error)]
pub enum DemoError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("{0}")]
    Input(String),
}

#[derive(Serialize)]
struct SceneObject {
    id: u32,
    moved: bool,
    /// Vertex positions per frame.
    corners: Vec<[Point2; 4]>,
}

#[derive(Serialize)]
struct SceneView {
    name: String,
    fov: Fov,
    robot_path: Vec<Pose2>,
    objects: Vec<SceneObject>,
    /// Noisy world-frame measurements per frame, projected with the true pose.
    measurements: Vec<Vec<Point2>>,
}

pub fn preset_scene_json(name: &str, seed: u64) -> Result<String, DemoError> {
    let mut cfg = preset(name)?;
    cfg.seed = seed;
    let scene = generate_scene(&cfg)?;
    let frames = simulate(&scene, seed);
    let objects = cfg
        .objects
        .iter()
        .enumerate()
        .map(|(k, o)| SceneObject {
            id: o.id,
            moved: scene.first_move_frame(o.id).is_some(),
            corners: (0..scene.num_frames())
                .map(|t| scene.vertices_world(t, k))
                .collect(),
        })
        .collect();
    let measurements = frames
        .iter()
        .map(|f| {
            f.observations
                .iter()
                .flat_map(|o| o.points_body.iter().map(|p| f.gt_pose.apply(*p)))
                .collect()
        })
        .collect();
    let view = SceneView {
        name: cfg.name.clone(),
        fov: cfg.fov,
        robot_path: cfg.robot_path.clone(),
        objects,
        measurements,
    };
    Ok(serde_json::to_string(&view).expect("serializable"))
}

#[derive(Serialize)]
struct MappedObject {
    id: u32,
    status: &'static str,
    expected_v: f64,
    landmarks: Vec<Point2>,
}

#[derive(Serialize)]
struct FrameView {
    frame: usize,
    estimate: Pose2,
    iterations: usize,
    objects: Vec<MappedObject>,
}

#[derive(Serialize)]
struct TracePoint {
    em_iter: usize,
    elbo: f64,
    pose_error: Option<f64>,
    expected_v: Vec<(u32, f64)>,
}

#[derive(Serialize)]
struct RunView {
    variant: &'static str,
    ate: f64,
    mpe: f64,
    change_precision: f64,
    change_recall: f64,
    mode_flips: usize,
    ground_truth: Vec<Pose2>,
    estimated: Vec<Pose2>,
    frames: Vec<FrameView>,
    /// EM trace of the first frame that ran EM.
    trace: Vec<TracePoint>,
}

pub fn run_preset_json(
    name: &str,
    seed: u64,
    em_iters: usize,
    variant: &str,
) -> Result<String, DemoError> {
    let variant: Variant = variant.parse().map_err(DemoError::Input)?;
    let mut cfg = preset(name)?;
    cfg.seed = seed;
    let vem = VemConfig {
        em_iters,
        variant,
        ..VemConfig::default()
    };
    let mut frames = Vec::new();
    let out = run_scenario_observed(&cfg, &vem, |state, report| {
        let objects = state
            .library
            .values()
            .map(|o| MappedObject {
                id: o.id,
                status: o.status.as_str(),
                expected_v: o.consistency.expectation(),
                landmarks: o.landmarks_world.clone(),
            })
            .collect();
        frames.push(FrameView {
            frame: report.frame_id,
            estimate: report.estimate,
            iterations: report.iterations.len().saturating_sub(1),
            objects,
        });
    })?;
    let trace = out
        .reports
        .iter()
        .find(|r| !r.iterations.is_empty())
        .map(|r| {
            r.iterations
                .iter()
                .map(|it| TracePoint {
                    em_iter: it.em_iter,
                    elbo: it.elbo,
                    pose_error: it.pose_error,
                    expected_v: it.objects.iter().map(|o| (o.id, o.expected_v)).collect(),
                })
                .collect()
        })
        .unwrap_or_default();
    let m = out.metrics;
    let view = RunView {
        variant: variant.as_str(),
        ate: m.ate,
        mpe: m.mpe,
        change_precision: m.change_precision,
        change_recall: m.change_recall,
        mode_flips: m.mode_flips,
        ground_truth: out.ground_truth,
        estimated: out.estimated,
        frames,
        trace,
    };
    Ok(serde_json::to_string(&view).expect("serializable"))
}

#[derive(Serialize)]
struct Curve {
    residual: Vec<f64>,
    /// Static responsibility with `E[log v]` mixing.
    w_static: Vec<f64>,
    /// Static responsibility with `log E[v]` mixing.
    w_static_point: Vec<f64>,
    static_mode: Vec<bool>,
    expected_v: f64,
}

pub fn e_step_curve_json(
    alpha: f64,
    beta: f64,
    sigma: f64,
    e_max: f64,
    max_residual: f64,
    n: usize,
) -> Result<String, DemoError> {
    let input = |e: String| DemoError::Input(e);
    let state = BetaState::new(alpha, beta).map_err(|e| input(e.to_string()))?;
    let params = MixtureParams::new(sigma, e_max, 2).map_err(|e| input(e.to_string()))?;
    if !(max_residual > 0.0) || n < 2 {
        return Err(input(
            "need a positive residual range and at least 2 samples".into(),
        ));
    }
    let v = state.expectation();
    let mut curve = Curve {
        residual: Vec::with_capacity(n),
        w_static: Vec::with_capacity(n),
        w_static_point: Vec::with_capacity(n),
        static_mode: Vec::with_capacity(n),
        expected_v: v,
    };
    for i in 0..n {
        let r = max_residual * i as f64 / (n - 1) as f64;
        let e = Point2::new(r, 0.0);
        let log_n = semistatic_vem::consistency::gaussian_log_density(e, &params);
        let log_u = semistatic_vem::consistency::uniform_log_density(&params);
        let point = 1.0 / (1.0 + ((1.0 - v).ln() + log_u - v.ln() - log_n).exp());
        curve.residual.push(r);
        curve
            .w_static
            .push(e_step_weights(e, &params, &state).w_static);
        curve.w_static_point.push(point);
        curve
            .static_mode
            .push(max_mixture_select(e, &state, &params) == Mode::Static);
    }
    Ok(serde_json::to_string(&curve).expect("serializable"))
}

fn js(r: Result<String, DemoError>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

/// Ground-truth scene of a preset: object corners per frame, robot path,
/// field of view and the simulated measurements.
#[wasm_bindgen]
pub fn preset_scene(name: &str, seed: u32) -> Result<String, JsError> {
    js(preset_scene_json(name, seed as u64))
}

/// Runs the pipeline on a preset and returns trajectories, per-frame maps,
/// metrics and the first EM trace.
#[wasm_bindgen]
pub fn run_preset(name: &str, seed: u32, em_iters: u32, variant: &str) -> Result<String, JsError> {
    js(run_preset_json(
        name,
        seed as u64,
        em_iters as usize,
        variant,
    ))
}

/// Static responsibility and max-mixture decision as functions of the
/// residual norm.
#[wasm_bindgen]
pub fn e_step_curve(
    alpha: f64,
    beta: f64,
    sigma: f64,
    e_max: f64,
    max_residual: f64,
    n: u32,
) -> Result<String, JsError> {
    js(e_step_curve_json(
        alpha,
        beta,
        sigma,
        e_max,
        max_residual,
        n as usize,
    ))
}

#[wasm_bindgen]
pub fn preset_names() -> String {
    serde_json::to_string(&semistatic_vem::sim::PRESET_NAMES).expect("serializable")
}
