//! End-to-end runs, ablations and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::factors::ObjectId;
use crate::geom::Pose2;
use crate::metrics::{
    align_to_first, change_detection, trajectory_errors, MetricsError, ObjectTruth, RunMetrics,
};
use crate::sim::{generate_scene, simulate, FrameData, ScenarioConfig, ScenarioError, Scene};
use crate::svg::{line_chart, Series};
use crate::vem::{FrameInput, FrameReport, PipelineState, Status, Variant, VemConfig, VemError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("frame {frame}: {source}")]
    Pipeline { frame: usize, source: VemError },
    #[error(transparent)]
    Vem(#[from] VemError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("output directory {} does not exist", .0.display())]
    MissingOutDir(PathBuf),
    #[error("cannot write {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("ablation needs at least one seed and one variant")]
    EmptyAblation,
}

impl RunError {
    /// Whether the failure comes from user input rather than the pipeline.
    pub fn is_usage_error(&self) -> bool {
        matches!(
            self,
            RunError::Scenario(_) | RunError::MissingOutDir(_) | RunError::EmptyAblation
        ) || matches!(self, RunError::Vem(VemError::InvalidConfig(_)))
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub scene: Scene,
    pub frames: Vec<FrameData>,
    pub reports: Vec<FrameReport>,
    /// Final robot-in-world estimates.
    pub estimated: Vec<Pose2>,
    pub ground_truth: Vec<Pose2>,
    pub truth: ObjectTruth,
    pub status_history: Vec<(usize, ObjectId, Status)>,
    pub metrics: RunMetrics,
    pub state: PipelineState,
}

/// Simulates the scenario with its own seed and runs the pipeline over all frames.
pub fn run_scenario(cfg: &ScenarioConfig, vem: &VemConfig) -> Result<RunOutput, RunError> {
    run_scenario_observed(cfg, vem, |_, _| {})
}

/// Wall clock, absent on targets without one.
#[cfg(not(target_arch = "wasm32"))]
fn clock() -> Option<Instant> {
    Some(Instant::now())
}

#[cfg(target_arch = "wasm32")]
fn clock() -> Option<Instant> {
    None
}

/// Like [`run_scenario`], calling `observe` with the pipeline state after
/// every processed frame.
pub fn run_scenario_observed<F>(
    cfg: &ScenarioConfig,
    vem: &VemConfig,
    mut observe: F,
) -> Result<RunOutput, RunError>
where
    F: FnMut(&PipelineState, &FrameReport),
{
    let started = clock();
    let scene = generate_scene(cfg)?;
    let frames = simulate(&scene, cfg.seed);
    let mut state = PipelineState::new(vem.clone(), cfg.fov, cfg.robot_path[0])?;
    let mut truth = ObjectTruth {
        moves: cfg
            .objects
            .iter()
            .filter_map(|o| scene.first_move_frame(o.id).map(|f| (o.id, f)))
            .collect(),
        ..ObjectTruth::default()
    };
    let mut reports = Vec::with_capacity(frames.len());
    let mut status_history = Vec::new();
    for frame in &frames {
        let report = state
            .process_frame(&FrameInput::from(frame))
            .map_err(|source| RunError::Pipeline {
                frame: frame.frame_id,
                source,
            })?;
        for (id, k) in &report.created {
            truth.links.insert(*id, frame.truth[*k]);
            truth.created.insert(*id, frame.frame_id);
        }
        status_history.extend(
            report
                .objects
                .iter()
                .map(|o| (frame.frame_id, o.id, o.status)),
        );
        observe(&state, &report);
        reports.push(report);
    }
    let estimated = state.estimated_path();
    let ground_truth = cfg.robot_path.clone();
    let (ate, mpe) = trajectory_errors(&align_to_first(&estimated, &ground_truth), &ground_truth)?;
    let (change_precision, change_recall) = change_detection(&status_history, &truth);
    let metrics = RunMetrics {
        ate,
        mpe,
        change_precision,
        change_recall,
        mode_flips: reports.iter().map(|r| r.mode_flips).sum(),
        runtime: started.map_or(0.0, |t| t.elapsed().as_secs_f64()),
    };
    Ok(RunOutput {
        scene,
        frames,
        reports,
        estimated,
        ground_truth,
        truth,
        status_history,
        metrics,
        state,
    })
}

fn f9(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.9}")
    } else {
        String::new()
    }
}

fn opt9(v: Option<f64>) -> String {
    v.map(f9).unwrap_or_default()
}

pub fn trajectory_csv(out: &RunOutput) -> String {
    let mut s = String::from("frame,est_x,est_y,est_theta,gt_x,gt_y,gt_theta\n");
    for (t, (e, g)) in out.estimated.iter().zip(&out.ground_truth).enumerate() {
        let _ = writeln!(
            s,
            "{t},{},{},{},{},{},{}",
            f9(e.x()),
            f9(e.y()),
            f9(e.theta()),
            f9(g.x()),
            f9(g.y()),
            f9(g.theta())
        );
    }
    s
}

pub fn objects_csv(out: &RunOutput) -> String {
    let mut s =
        String::from("frame,object_id,expected_v,expected_pi,alpha,beta,status,x,y,theta\n");
    for r in &out.reports {
        for o in &r.objects {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.frame_id,
                o.id,
                f9(o.expected_v),
                opt9(o.expected_pi),
                f9(o.alpha),
                f9(o.beta),
                o.status.as_str(),
                f9(o.placement.x()),
                f9(o.placement.y()),
                f9(o.placement.theta())
            );
        }
    }
    s
}

pub fn elbo_trace_csv(out: &RunOutput) -> String {
    let mut s = String::from("frame,em_iter,elbo,pose_error,rot_error,mode_flips\n");
    for r in &out.reports {
        for it in &r.iterations {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.frame_id,
                it.em_iter,
                f9(it.elbo),
                opt9(it.pose_error),
                opt9(it.rot_error),
                it.mode_flips
            );
        }
    }
    s
}

pub fn consistency_trace_csv(out: &RunOutput) -> String {
    let mut s = String::from("frame,em_iter,object_id,expected_v,expected_pi\n");
    for r in &out.reports {
        for it in &r.iterations {
            for o in &it.objects {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{}",
                    r.frame_id,
                    it.em_iter,
                    o.id,
                    f9(o.expected_v),
                    f9(o.expected_pi)
                );
            }
        }
    }
    s
}

pub fn metrics_csv(m: &RunMetrics) -> String {
    format!(
        "ate,mpe,change_precision,change_recall,mode_flips\n{},{},{},{},{}\n",
        f9(m.ate),
        f9(m.mpe),
        f9(m.change_precision),
        f9(m.change_recall),
        m.mode_flips
    )
}

/// Consistency and pose-error traces over the EM iterations of `frame`.
pub fn trace_charts(out: &RunOutput, frame: usize) -> Option<(String, String)> {
    let report = out.reports.iter().find(|r| r.frame_id == frame)?;
    let mut ids: Vec<ObjectId> = report
        .iterations
        .iter()
        .flat_map(|it| it.objects.iter().map(|o| o.id))
        .collect();
    ids.sort_unstable();
    ids.dedup();
    let consistency: Vec<Series> = ids
        .iter()
        .map(|id| Series {
            label: format!("object {id}"),
            points: report
                .iterations
                .iter()
                .filter_map(|it| {
                    it.objects
                        .iter()
                        .find(|o| o.id == *id)
                        .map(|o| (it.em_iter as f64, o.expected_v))
                })
                .collect(),
        })
        .collect();
    let pose = vec![Series {
        label: "translation (m)".into(),
        points: report
            .iterations
            .iter()
            .filter_map(|it| it.pose_error.map(|e| (it.em_iter as f64, e)))
            .collect(),
    }];
    Some((
        line_chart(
            &format!("Object consistency, frame {frame}"),
            "EM iteration",
            "E[v]",
            &consistency,
        ),
        line_chart(
            &format!("Robot pose error, frame {frame}"),
            "EM iteration",
            "error (m)",
            &pose,
        ),
    ))
}

/// Writes all report files into an existing directory. Nothing is written
/// when the directory is missing.
pub fn write_outputs(out: &RunOutput, dir: &Path, svg: bool) -> Result<Vec<PathBuf>, RunError> {
    if !dir.is_dir() {
        return Err(RunError::MissingOutDir(dir.to_path_buf()));
    }
    let mut files = vec![
        ("trajectory.csv", trajectory_csv(out)),
        ("objects.csv", objects_csv(out)),
        ("elbo_trace.csv", elbo_trace_csv(out)),
        ("consistency_trace.csv", consistency_trace_csv(out)),
        ("metrics.csv", metrics_csv(&out.metrics)),
    ];
    if svg {
        if let Some((consistency, pose)) = trace_charts(out, 1) {
            files.push(("consistency.svg", consistency));
            files.push(("pose_error.svg", pose));
        }
    }
    let mut written = Vec::with_capacity(files.len());
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|source| RunError::Io {
            path: path.clone(),
            source,
        })?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSpec {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// `None` marks the per-variant median row.
    pub seed: Option<u64>,
    pub ate: f64,
    pub mpe: f64,
    pub change_precision: f64,
    pub change_recall: f64,
    pub mode_flips: f64,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Runs every (variant, seed) cell in parallel. With an output directory each
/// cell writes its reports into `<dir>/<variant>/seed_<seed>/` and the table
/// goes to `<dir>/ablation.csv`.
pub fn ablate(
    cfg: &ScenarioConfig,
    vem: &VemConfig,
    spec: &AblationSpec,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>, RunError> {
    if spec.seeds.is_empty() || spec.variants.is_empty() {
        return Err(RunError::EmptyAblation);
    }
    if let Some(dir) = out_dir {
        if !dir.is_dir() {
            return Err(RunError::MissingOutDir(dir.to_path_buf()));
        }
    }
    let cells: Vec<(Variant, u64)> = spec
        .variants
        .iter()
        .flat_map(|v| spec.seeds.iter().map(move |s| (*v, *s)))
        .collect();
    let results: Vec<Result<AblationRow, RunError>> = cells
        .par_iter()
        .map(|(variant, seed)| {
            let scenario = ScenarioConfig {
                seed: *seed,
                ..cfg.clone()
            };
            let config = VemConfig {
                variant: *variant,
                ..vem.clone()
            };
            let out = run_scenario(&scenario, &config)?;
            if let Some(dir) = out_dir {
                let cell = dir.join(variant.as_str()).join(format!("seed_{seed}"));
                fs::create_dir_all(&cell).map_err(|source| RunError::Io {
                    path: cell.clone(),
                    source,
                })?;
                write_outputs(&out, &cell, false)?;
            }
            let m = out.metrics;
            Ok(AblationRow {
                variant: *variant,
                seed: Some(*seed),
                ate: m.ate,
                mpe: m.mpe,
                change_precision: m.change_precision,
                change_recall: m.change_recall,
                mode_flips: m.mode_flips as f64,
            })
        })
        .collect();
    let mut rows = Vec::with_capacity(results.len() + spec.variants.len());
    for r in results {
        rows.push(r?);
    }
    for v in &spec.variants {
        let cell: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == *v).collect();
        let med =
            |f: fn(&AblationRow) -> f64| median(&mut cell.iter().map(|r| f(r)).collect::<Vec<_>>());
        let summary = AblationRow {
            variant: *v,
            seed: None,
            ate: med(|r| r.ate),
            mpe: med(|r| r.mpe),
            change_precision: med(|r| r.change_precision),
            change_recall: med(|r| r.change_recall),
            mode_flips: med(|r| r.mode_flips),
        };
        rows.push(summary);
    }
    if let Some(dir) = out_dir {
        let path = dir.join("ablation.csv");
        fs::write(&path, ablation_csv(&rows)).map_err(|source| RunError::Io { path, source })?;
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,seed,ate,mpe,change_precision,change_recall,mode_flips\n");
    for r in rows {
        let seed = r
            .seed
            .map(|s| s.to_string())
            .unwrap_or_else(|| "median".into());
        let _ = writeln!(
            s,
            "{},{seed},{},{},{},{},{}",
            r.variant,
            f9(r.ate),
            f9(r.mpe),
            f9(r.change_precision),
            f9(r.change_recall),
            f9(r.mode_flips)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }
}
