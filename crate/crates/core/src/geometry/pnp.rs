//! Camera pose refinement from 3D joints and 2D detections.
//!
//! Damped Gauss-Newton on the confidence-weighted Geman-McClure reprojection
//! cost, with iteratively reweighted normal equations and a backtracking
//! safeguard: a step is accepted only if the robust cost does not increase.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3xX, Vector3};

use super::camera::{nearest_rotation, CameraModel};
use crate::body::{exp_so3, skew};
use crate::detections::FrameKeypoints;
use crate::error::{Error, Result};
use crate::robust::{geman_mcclure_sq, geman_mcclure_weight};

#[derive(Debug, Clone)]
pub struct PnpOptions {
    /// Robust loss scale, pixels.
    pub sigma: f64,
    pub max_iters: usize,
    /// Also refine the focal length.
    pub refine_focal: bool,
}

impl Default for PnpOptions {
    fn default() -> Self {
        Self { sigma: 10.0, max_iters: 50, refine_focal: false }
    }
}

#[derive(Debug, Clone)]
pub struct PnpOutcome {
    pub camera: CameraModel,
    /// Robust cost before the first step and after every accepted step.
    pub cost_trace: Vec<f64>,
}

impl PnpOutcome {
    pub fn final_cost(&self) -> f64 {
        *self.cost_trace.last().expect("trace starts with the initial cost")
    }
}

/// Confidence-weighted robust reprojection cost; `None` on a cheirality violation.
pub fn robust_reprojection_cost(
    camera: &CameraModel,
    joints_per_frame: &[Matrix3xX<f64>],
    detections: &[&FrameKeypoints],
    sigma: f64,
) -> Option<f64> {
    let mut total = 0.0;
    for (joints, det) in joints_per_frame.iter().zip(detections) {
        for (k, p) in joints.column_iter().enumerate() {
            let c = det.confidence[k];
            if c == 0.0 {
                continue;
            }
            let pc = camera.to_camera(&p.into_owned());
            let uv = camera.project_camera_point(&pc)?;
            let r = uv - det.points.column(k);
            total += c * geman_mcclure_sq(r.norm_squared(), sigma);
        }
    }
    Some(total)
}

fn with_step(camera: &CameraModel, step: &DVector<f64>) -> CameraModel {
    let omega = Vector3::new(step[0], step[1], step[2]);
    let rotation = nearest_rotation(&(exp_so3(&omega) * camera.rotation));
    let translation = camera.translation + Vector3::new(step[3], step[4], step[5]);
    let focal = if step.len() > 6 { camera.focal + step[6] } else { camera.focal };
    CameraModel { rotation, translation, focal, principal_point: camera.principal_point }
}

/// Refines rotation and translation (and optionally focal) of one camera
/// against all frames of its video.
pub fn pnp_refine(
    camera_init: &CameraModel,
    joints_per_frame: &[Matrix3xX<f64>],
    detections: &[&FrameKeypoints],
    options: &PnpOptions,
) -> Result<PnpOutcome> {
    if joints_per_frame.len() != detections.len() {
        return Err(Error::Dimension(format!(
            "{} joint frames vs {} detection frames",
            joints_per_frame.len(),
            detections.len()
        )));
    }
    let active: usize = detections
        .iter()
        .map(|d| d.confidence.iter().filter(|&&c| c > 0.0).count())
        .sum();
    if active < 3 {
        return Err(Error::InsufficientConstraints(format!(
            "{active} keypoints with nonzero confidence, need 3"
        )));
    }
    let sigma = options.sigma;
    let dim = if options.refine_focal { 7 } else { 6 };

    let mut camera = camera_init.clone();
    let mut cost = robust_reprojection_cost(&camera, joints_per_frame, detections, sigma)
        .ok_or_else(|| Error::Input("initial camera sees joints behind it".into()))?;
    let mut trace = vec![cost];
    let mut damping = 1e-6;

    for _ in 0..options.max_iters {
        if cost == 0.0 {
            break;
        }
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut g = DVector::<f64>::zeros(dim);
        let mut jrow = DMatrix::<f64>::zeros(2, dim);
        for (joints, det) in joints_per_frame.iter().zip(detections) {
            for (k, p) in joints.column_iter().enumerate() {
                let c = det.confidence[k];
                if c == 0.0 {
                    continue;
                }
                let rp: Vector3<f64> = camera.rotation * p;
                let pc = rp + camera.translation;
                let Some(uv) = camera.project_camera_point(&pc) else {
                    return Err(Error::Cheirality { column: k, depth: pc.z });
                };
                let r = uv - det.points.column(k);
                let w = c * geman_mcclure_weight(r.norm_squared(), sigma);
                let dproj = camera.projection_jacobian(&pc);
                jrow.view_mut((0, 0), (2, 3)).copy_from(&(dproj * -skew(&rp)));
                jrow.view_mut((0, 3), (2, 3)).copy_from(&dproj);
                if options.refine_focal {
                    jrow[(0, 6)] = pc.x / pc.z;
                    jrow[(1, 6)] = pc.y / pc.z;
                }
                h += jrow.transpose() * &jrow * (2.0 * w);
                g += jrow.transpose() * r * (2.0 * w);
            }
        }
        if g.norm() < 1e-300 {
            break;
        }

        let mut accepted = false;
        for _ in 0..12 {
            let mut damped = h.clone();
            for d in 0..dim {
                damped[(d, d)] += damping * (h[(d, d)] + 1e-12);
            }
            let Some(chol) = damped.cholesky() else {
                damping *= 10.0;
                continue;
            };
            let step = -chol.solve(&g);
            let mut scale = 1.0;
            for _ in 0..8 {
                let candidate = with_step(&camera, &(&step * scale));
                if candidate.focal > 0.0 {
                    if let Some(c) =
                        robust_reprojection_cost(&candidate, joints_per_frame, detections, sigma)
                    {
                        if c < cost {
                            camera = candidate;
                            cost = c;
                            accepted = true;
                            break;
                        }
                    }
                }
                scale *= 0.5;
            }
            if accepted {
                damping = (damping / 3.0).max(1e-12);
                break;
            }
            damping *= 10.0;
        }
        if !accepted {
            break;
        }
        let prev = *trace.last().expect("nonempty");
        trace.push(cost);
        if prev - cost <= 1e-15 * prev {
            break;
        }
    }
    Ok(PnpOutcome { camera, cost_trace: trace })
}

/// Orthonormality error `|R^T R - I|_max` of a rotation.
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).abs().max()
}
