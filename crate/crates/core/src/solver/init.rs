use nalgebra::{DVector, Matrix3xX};
use rayon::prelude::*;

use super::objective::{frame_value, linearize_frame, Problem};
use super::{AuxiliaryVars, FrameParams, MotionParams, MotionSolution, SolverConfig};
use crate::body::{transform_body, PosedBody, PoseVector, RootTranslation, ShapeVector, SkeletonSpec};
use crate::detections::{DetectionSet, FrameKeypoints};
use crate::error::{Error, Result};
use crate::geometry::{rigid_init_relative_camera, CameraModel};
use crate::sync::CommonTimeline;

/// Fits `(theta, gamma)` of one body to one frame's keypoints with damped
/// Gauss-Newton, keeping `beta` and the camera fixed.
///
/// `prior_weight` (px² per rad²) pulls `theta` toward its starting value so
/// directions the keypoints do not observe (bone twist, leaf joints,
/// foreshortened depth) stay put. Returns the final unnormalized robust cost,
/// prior included.
pub fn refine_frame(
    skeleton: &SkeletonSpec,
    camera: &CameraModel,
    det: &FrameKeypoints,
    params: &mut FrameParams,
    iters: usize,
    sigma: f64,
    prior_weight: f64,
) -> Result<f64> {
    let nj = skeleton.joint_count();
    let fd = 3 * nj + 3;
    let anchor = params.theta.0.clone();
    let cost_of = |p: &FrameParams| -> Result<Option<f64>> {
        let body = PosedBody::new(skeleton, &p.theta, &p.beta, &p.gamma)?;
        Ok(frame_value(camera, det, &body, sigma)
            .ok()
            .map(|c| c + prior_weight * (&p.theta.0 - &anchor).norm_squared()))
    };
    let mut cost = cost_of(params)?.ok_or_else(|| Error::Input("initial body lies behind the camera".into()))?;
    let mut damping = 1e-4;
    for _ in 0..iters {
        if cost == 0.0 {
            break;
        }
        let body = PosedBody::new(skeleton, &params.theta, &params.beta, &params.gamma)?;
        let lin = linearize_frame(skeleton, camera, det, &body, sigma, true)
            .map_err(|depth| Error::Input(format!("body behind camera (depth {depth})")))?;
        let mut h = lin.hessian.expect("requested Gauss-Newton blocks").frame;
        let mut g = lin.grad_frame;
        g.rows_mut(0, 3 * nj).axpy(2.0 * prior_weight, &(&params.theta.0 - &anchor), 1.0);
        for d in 0..3 * nj {
            h[(d, d)] += 2.0 * prior_weight;
        }
        if g.iter().all(|v| *v == 0.0) {
            break;
        }
        let top = h.diagonal().max().max(1e-300);
        let mut accepted = false;
        for _ in 0..10 {
            let mut damped = h.clone();
            for d in 0..fd {
                damped[(d, d)] += damping * (h[(d, d)] + 1e-9 * top) + 1e-14 * top;
            }
            let Some(chol) = damped.cholesky() else {
                damping *= 10.0;
                continue;
            };
            let step = -chol.solve(&g);
            let candidate = FrameParams {
                theta: PoseVector(&params.theta.0 + step.rows(0, 3 * nj)),
                beta: params.beta.clone(),
                gamma: RootTranslation(params.gamma.0 + step.fixed_rows::<3>(3 * nj)),
            };
            match cost_of(&candidate)? {
                Some(c) if c < cost => {
                    *params = candidate;
                    cost = c;
                    damping = (damping / 3.0).max(1e-9);
                    accepted = true;
                    break;
                }
                _ => damping *= 10.0,
            }
        }
        if !accepted {
            break;
        }
    }
    Ok(cost)
}

fn mean_shape(poses: &[FrameParams], joints: usize) -> ShapeVector {
    let mut acc = DVector::zeros(joints);
    for p in poses {
        acc += &p.beta.0;
    }
    ShapeVector(acc / poses.len().max(1) as f64)
}

/// Builds the starting point of a solve.
///
/// `initial_poses[j][f]` is a body estimate for frame `f` of video `j`,
/// expressed in that video's camera frame. Each video gets one shape (the
/// mean of its estimates), every timeline frame is refined against its
/// keypoints, and cameras come from rigidly aligning each video's bodies to
/// the reference video's, whose camera frame becomes the world frame.
pub fn initialize(
    skeleton: &SkeletonSpec,
    initial_poses: &[Vec<FrameParams>],
    detections: &DetectionSet,
    timeline: &CommonTimeline,
    config: &SolverConfig,
) -> Result<MotionSolution> {
    config.validate()?;
    let problem = Problem::new(skeleton, detections, timeline)?;
    let m = problem.video_count();
    let n = problem.frame_count();
    let nj = skeleton.joint_count();
    if initial_poses.len() != m {
        return Err(Error::Input(format!("{} initial pose tracks for {m} videos", initial_poses.len())));
    }
    for (j, poses) in initial_poses.iter().enumerate() {
        if poses.len() != detections.videos[j].len() {
            return Err(Error::Input(format!(
                "video {j}: {} initial poses for {} frames",
                poses.len(),
                detections.videos[j].len()
            )));
        }
        if poses.iter().any(|p| p.theta.0.len() != 3 * nj || p.beta.0.len() != nj) {
            return Err(Error::Dimension(format!("video {j}: initial poses do not match the skeleton")));
        }
    }
    let reference = timeline.reference;
    let base_cameras: Vec<CameraModel> = detections.videos.iter().map(|v| v.intrinsics.identity_camera()).collect();

    // Refine each used frame once in its own camera frame.
    let mut theta = Vec::with_capacity(m);
    let mut gamma = Vec::with_capacity(m);
    let mut beta = Vec::with_capacity(m);
    for j in 0..m {
        let shape = mean_shape(&initial_poses[j], nj);
        let mut used: Vec<usize> = timeline.maps[j].clone();
        used.dedup();
        let refined: Vec<Result<FrameParams>> = used
            .par_iter()
            .map(|&f| {
                let mut p = FrameParams { beta: shape.clone(), ..initial_poses[j][f].clone() };
                refine_frame(
                    skeleton,
                    &base_cameras[j],
                    &detections.videos[j].frames[f],
                    &mut p,
                    config.init_refine_iters,
                    config.geman_sigma,
                    config.init_prior_weight,
                )
                .map_err(|e| Error::Input(format!("video {j}, frame {f}: {e}")))?;
                Ok(p)
            })
            .collect();
        let refined: Vec<FrameParams> = refined.into_iter().collect::<Result<_>>()?;
        let lookup = |f: usize| &refined[used.binary_search(&f).expect("frame is on the timeline")];
        theta.push(timeline.maps[j].iter().map(|&f| lookup(f).theta.clone()).collect::<Vec<_>>());
        gamma.push(timeline.maps[j].iter().map(|&f| lookup(f).gamma).collect::<Vec<_>>());
        beta.push(shape);
    }
    let mut params = MotionParams { theta, beta, gamma };

    let mut cameras = base_cameras;
    let ref_joints: Vec<Matrix3xX<f64>> = params.video_joints(skeleton, reference)?;
    for j in (0..m).filter(|&j| j != reference) {
        let joints = params.video_joints(skeleton, j)?;
        let (r, t) = rigid_init_relative_camera(&ref_joints, &joints).map_err(|e| match e {
            Error::Degenerate(msg) => Error::Degenerate(format!("video {j}: {msg}")),
            other => other,
        })?;
        cameras[j].rotation = r;
        cameras[j].translation = t;
        let r_inv = r.transpose();
        let t_inv = -(r_inv * t);
        for i in 0..n {
            let (th, be, ga) = (&mut params.theta[j][i], &params.beta[j], &mut params.gamma[j][i]);
            transform_body(skeleton, th, be, ga, &r_inv, &t_inv);
        }
    }
    if config.shared_motion {
        for j in (0..m).filter(|&j| j != reference) {
            params.theta[j] = params.theta[reference].clone();
            params.gamma[j] = params.gamma[reference].clone();
            params.beta[j] = params.beta[reference].clone();
        }
    }
    let aux = AuxiliaryVars::project_from(&params, config.pose_rank(), config.trajectory_rank());
    let objective = super::total_objective(&problem, &params, &cameras, &aux, config)?.total;
    Ok(MotionSolution { params, cameras, aux, objective_trace: vec![objective], warning: None })
}
