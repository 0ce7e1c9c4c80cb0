use nalgebra::Matrix3xX;

use super::descent::{descent_step, objective_value, StepOutcome};
use super::objective::Problem;
use super::{AuxiliaryVars, MotionSolution, SolverConfig};
use crate::body::SkeletonSpec;
use crate::detections::DetectionSet;
use crate::error::{Error, Result};
use crate::geometry::{pnp_refine, PnpOptions};
use crate::sync::CommonTimeline;

/// Alternates body-parameter descent, low-rank projection of the auxiliary
/// variables, and per-video camera refinement until the objective settles.
///
/// The auxiliary variables start as (and, after every accepted body step,
/// are reset to) the rank-bounded projection of the current parameters. The
/// reference video's camera stays fixed and anchors the world frame. Every
/// stage is a descent step on the same objective, so the trace never
/// increases.
pub fn alternating_solve(
    skeleton: &SkeletonSpec,
    detections: &DetectionSet,
    timeline: &CommonTimeline,
    init: MotionSolution,
    config: &SolverConfig,
) -> Result<MotionSolution> {
    config.validate()?;
    let problem = Problem::new(skeleton, detections, timeline)?;
    let MotionSolution { mut params, mut cameras, .. } = init;
    params.validate(skeleton)?;
    if params.video_count() != problem.video_count() || params.frame_count() != problem.frame_count() {
        return Err(Error::Dimension(format!(
            "initial motion covers {} videos x {} frames, timeline has {} x {}",
            params.video_count(),
            params.frame_count(),
            problem.video_count(),
            problem.frame_count()
        )));
    }
    if cameras.len() != problem.video_count() {
        return Err(Error::Dimension(format!("{} cameras for {} videos", cameras.len(), problem.video_count())));
    }
    let mut aux = AuxiliaryVars::project_from(&params, config.pose_rank(), config.trajectory_rank());
    let reference = problem.reference;
    let pnp_options = PnpOptions {
        sigma: config.geman_sigma,
        max_iters: config.pnp_iters,
        refine_focal: config.refine_focal,
    };

    let mut current = super::total_objective(&problem, &params, &cameras, &aux, config)?.total;
    let mut trace = vec![current];
    let mut damping = 1e-3;
    let mut converged = false;
    let mut warning = None;

    for _ in 0..config.max_outer_iters {
        let before = current;

        for _ in 0..config.max_inner_iters {
            match descent_step(&problem, &params, &cameras, &aux, config, current, &mut damping)? {
                StepOutcome::Accepted { params: next, aux: next_aux, objective } => {
                    let gain = (current - objective) / current.abs().max(1.0);
                    params = next;
                    aux = next_aux;
                    current = objective;
                    if gain < 0.1 * config.convergence_tol {
                        break;
                    }
                }
                StepOutcome::Stalled => break,
            }
        }

        aux = AuxiliaryVars::project_from(&params, config.pose_rank(), config.trajectory_rank());

        for j in (0..problem.video_count()).filter(|&j| j != reference) {
            let joints: Vec<Matrix3xX<f64>> = params.video_joints(skeleton, j)?;
            match pnp_refine(&cameras[j], &joints, &problem.frames[j], &pnp_options) {
                Ok(out) => cameras[j] = out.camera,
                Err(Error::InsufficientConstraints(_)) => {}
                Err(e) => log::warn!("camera refinement for video {j} skipped: {e}"),
            }
        }

        current = objective_value(&problem, &params, &cameras, &aux, config)?;
        trace.push(current);
        if (before - current).abs() / current.abs().max(1.0) < config.convergence_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        let msg = format!("stopped after {} outer iterations without meeting the tolerance", config.max_outer_iters);
        log::warn!("{msg}");
        warning = Some(msg);
    }
    Ok(MotionSolution { params, cameras, aux, objective_trace: trace, warning })
}
