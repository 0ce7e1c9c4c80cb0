use nalgebra::{DMatrix, DVector, Vector2};
use rayon::prelude::*;

use super::{AuxiliaryVars, MotionParams, SolverConfig};
use crate::body::{PosedBody, RootTranslation, ShapeVector, SkeletonSpec};
use crate::detections::{DetectionSet, FrameKeypoints};
use crate::error::{Error, Result};
use crate::geometry::CameraModel;
use crate::robust::{geman_mcclure_sq, geman_mcclure_weight};
use crate::sync::CommonTimeline;

/// Detections resolved onto the common timeline.
#[derive(Debug, Clone)]
pub struct Problem<'a> {
    pub skeleton: &'a SkeletonSpec,
    /// `frames[j][i]`: keypoints of video `j` shown at timeline frame `i`.
    pub frames: Vec<Vec<&'a FrameKeypoints>>,
    pub reference: usize,
    /// Sum of all confidences on the timeline; normalizes the reprojection term.
    pub confidence_sum: f64,
}

impl<'a> Problem<'a> {
    pub fn new(
        skeleton: &'a SkeletonSpec,
        detections: &'a DetectionSet,
        timeline: &CommonTimeline,
    ) -> Result<Self> {
        detections.validate(skeleton.joint_count())?;
        timeline.validate(&detections.frame_counts())?;
        let frames: Vec<Vec<&FrameKeypoints>> = timeline
            .maps
            .iter()
            .zip(&detections.videos)
            .map(|(map, video)| map.iter().map(|&f| &video.frames[f]).collect())
            .collect();
        let confidence_sum = frames.iter().flatten().map(|f| f.confidence.sum()).sum();
        Ok(Self { skeleton, frames, reference: timeline.reference, confidence_sum })
    }

    pub fn video_count(&self) -> usize {
        self.frames.len()
    }

    pub fn frame_count(&self) -> usize {
        self.frames.first().map_or(0, |f| f.len())
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout {
            videos: self.video_count(),
            frames: self.frame_count(),
            joints: self.skeleton.joint_count(),
        }
    }

    fn reprojection_scale(&self) -> f64 {
        if self.confidence_sum > 0.0 {
            1.0 / self.confidence_sum
        } else {
            0.0
        }
    }
}

/// Flat ordering of every parameter: per video, per frame `[theta, gamma]`,
/// then the video's shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub videos: usize,
    pub frames: usize,
    pub joints: usize,
}

impl ParamLayout {
    /// Width of one frame block `[theta, gamma]`.
    pub fn frame_dim(&self) -> usize {
        3 * self.joints + 3
    }

    pub fn video_dim(&self) -> usize {
        self.frames * self.frame_dim() + self.joints
    }

    pub fn dim(&self) -> usize {
        self.videos * self.video_dim()
    }

    pub fn frame_offset(&self, video: usize, frame: usize) -> usize {
        video * self.video_dim() + frame * self.frame_dim()
    }

    pub fn beta_offset(&self, video: usize) -> usize {
        video * self.video_dim() + self.frames * self.frame_dim()
    }

    pub fn flatten(&self, params: &MotionParams) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        let tj = 3 * self.joints;
        for j in 0..self.videos {
            for i in 0..self.frames {
                let o = self.frame_offset(j, i);
                out.rows_mut(o, tj).copy_from(&params.theta[j][i].0);
                out.rows_mut(o + tj, 3).copy_from(&params.gamma[j][i].0);
            }
            out.rows_mut(self.beta_offset(j), self.joints).copy_from(&params.beta[j].0);
        }
        out
    }

    /// `base + alpha * step`.
    pub fn offset_params(&self, base: &MotionParams, step: &DVector<f64>, alpha: f64) -> MotionParams {
        let mut out = base.clone();
        let tj = 3 * self.joints;
        for j in 0..self.videos {
            for i in 0..self.frames {
                let o = self.frame_offset(j, i);
                out.theta[j][i].0.axpy(alpha, &step.rows(o, tj), 1.0);
                out.gamma[j][i].0 += step.fixed_rows::<3>(o + tj) * alpha;
            }
            out.beta[j].0.axpy(alpha, &step.rows(self.beta_offset(j), self.joints), 1.0);
        }
        out
    }

    pub fn unflatten(&self, flat: &DVector<f64>) -> MotionParams {
        let zeros = MotionParams {
            theta: vec![vec![crate::body::PoseVector::zeros(self.joints); self.frames]; self.videos],
            beta: vec![ShapeVector::zeros(self.joints); self.videos],
            gamma: vec![vec![RootTranslation(nalgebra::Vector3::zeros()); self.frames]; self.videos],
        };
        debug_assert_eq!(flat.len(), self.dim());
        self.offset_params(&zeros, flat, 1.0)
    }
}

/// Local linearization of one frame's reprojection term.
///
/// Values are unnormalized sums of `c * rho`. Gradients and Gauss-Newton
/// blocks use the frame's `[theta, gamma]` ordering and the video's shape.
#[derive(Debug, Clone)]
pub(crate) struct FrameLinearization {
    pub value: f64,
    pub grad_frame: DVector<f64>,
    pub grad_beta: DVector<f64>,
    pub hessian: Option<FrameHessian>,
}

#[derive(Debug, Clone)]
pub(crate) struct FrameHessian {
    pub frame: DMatrix<f64>,
    pub cross: DMatrix<f64>,
    pub beta: DMatrix<f64>,
}

#[derive(Clone, Copy)]
enum Slot {
    Frame(usize),
    Beta(usize),
}

/// Reprojection value of one frame; `Err` on a point behind the camera.
pub(crate) fn frame_value(
    camera: &CameraModel,
    det: &FrameKeypoints,
    body: &PosedBody,
    sigma: f64,
) -> std::result::Result<f64, f64> {
    let mut total = 0.0;
    for (k, p) in body.joints.column_iter().enumerate() {
        let c = det.confidence[k];
        if c == 0.0 {
            continue;
        }
        let pc = camera.to_camera(&p.into_owned());
        let uv = camera.project_camera_point(&pc).ok_or(pc.z)?;
        total += c * geman_mcclure_sq((uv - det.points.column(k)).norm_squared(), sigma);
    }
    Ok(total)
}

pub(crate) fn linearize_frame(
    skeleton: &SkeletonSpec,
    camera: &CameraModel,
    det: &FrameKeypoints,
    body: &PosedBody,
    sigma: f64,
    with_hessian: bool,
) -> std::result::Result<FrameLinearization, f64> {
    let nj = skeleton.joint_count();
    let fd = 3 * nj + 3;
    let mut lin = FrameLinearization {
        value: 0.0,
        grad_frame: DVector::zeros(fd),
        grad_beta: DVector::zeros(nj),
        hessian: with_hessian.then(|| FrameHessian {
            frame: DMatrix::zeros(fd, fd),
            cross: DMatrix::zeros(fd, nj),
            beta: DMatrix::zeros(nj, nj),
        }),
    };
    let mut entries: Vec<(Slot, Vector2<f64>)> = Vec::with_capacity(64);
    for k in 0..nj {
        let c = det.confidence[k];
        if c == 0.0 {
            continue;
        }
        let p = body.joints.column(k).into_owned();
        let pc = camera.to_camera(&p);
        let uv = camera.project_camera_point(&pc).ok_or(pc.z)?;
        let r = uv - det.points.column(k);
        let s = r.norm_squared();
        lin.value += c * geman_mcclure_sq(s, sigma);
        let w = c * geman_mcclure_weight(s, sigma);
        if w == 0.0 {
            continue;
        }
        let a = camera.projection_jacobian(&pc) * camera.rotation;
        entries.clear();
        body.for_each_partial(skeleton, k, |col, block| {
            if col < 3 * nj {
                let jb = a * block;
                for d in 0..3 {
                    entries.push((Slot::Frame(col + d), jb.column(d).into_owned()));
                }
            } else if col < 4 * nj {
                entries.push((Slot::Beta(col - 3 * nj), a * block.column(0)));
            } else {
                for d in 0..3 {
                    entries.push((Slot::Frame(3 * nj + d), a.column(d).into_owned()));
                }
            }
        });
        for (slot, jc) in &entries {
            let g = 2.0 * w * r.dot(jc);
            match *slot {
                Slot::Frame(x) => lin.grad_frame[x] += g,
                Slot::Beta(x) => lin.grad_beta[x] += g,
            }
        }
        if let Some(h) = lin.hessian.as_mut() {
            for (sa, ja) in &entries {
                for (sb, jb) in &entries {
                    let v = 2.0 * w * ja.dot(jb);
                    match (*sa, *sb) {
                        (Slot::Frame(x), Slot::Frame(y)) => h.frame[(x, y)] += v,
                        (Slot::Frame(x), Slot::Beta(y)) => h.cross[(x, y)] += v,
                        (Slot::Beta(x), Slot::Beta(y)) => h.beta[(x, y)] += v,
                        (Slot::Beta(_), Slot::Frame(_)) => {}
                    }
                }
            }
        }
    }
    Ok(lin)
}

fn pose_all(problem: &Problem, params: &MotionParams) -> Result<Vec<PosedBody>> {
    let m = problem.video_count();
    let n = problem.frame_count();
    (0..m * n)
        .into_par_iter()
        .map(|idx| {
            let (j, i) = (idx / n, idx % n);
            PosedBody::new(problem.skeleton, &params.theta[j][i], &params.beta[j], &params.gamma[j][i])
        })
        .collect()
}

fn check_shapes(problem: &Problem, params: &MotionParams, cameras: &[CameraModel]) -> Result<()> {
    params.validate(problem.skeleton)?;
    if params.video_count() != problem.video_count()
        || params.frame_count() != problem.frame_count()
        || cameras.len() != problem.video_count()
    {
        return Err(Error::Dimension(format!(
            "parameters cover {} videos x {} frames with {} cameras, problem has {} x {}",
            params.video_count(),
            params.frame_count(),
            cameras.len(),
            problem.video_count(),
            problem.frame_count()
        )));
    }
    Ok(())
}

/// Normalized reprojection loss `sum c * rho(W - P(R F + T)) / sum c` and its
/// gradient in [`ParamLayout`] order. Zero when every confidence is zero.
pub fn reprojection_loss(
    problem: &Problem,
    params: &MotionParams,
    cameras: &[CameraModel],
    sigma: f64,
) -> Result<(f64, DVector<f64>)> {
    check_shapes(problem, params, cameras)?;
    let layout = problem.layout();
    let n = layout.frames;
    let bodies = pose_all(problem, params)?;
    let lins: Vec<std::result::Result<FrameLinearization, f64>> = (0..bodies.len())
        .into_par_iter()
        .map(|idx| {
            let (j, i) = (idx / n, idx % n);
            linearize_frame(problem.skeleton, &cameras[j], problem.frames[j][i], &bodies[idx], sigma, false)
        })
        .collect();
    let scale = problem.reprojection_scale();
    let mut value = 0.0;
    let mut grad = DVector::zeros(layout.dim());
    for (idx, lin) in lins.into_iter().enumerate() {
        let (j, i) = (idx / n, idx % n);
        let lin = lin.map_err(|depth| Error::CheiralityAt { video: j, frame: i, depth })?;
        value += lin.value;
        let o = layout.frame_offset(j, i);
        grad.rows_mut(o, layout.frame_dim()).axpy(scale, &lin.grad_frame, 1.0);
        grad.rows_mut(layout.beta_offset(j), layout.joints).axpy(scale, &lin.grad_beta, 1.0);
    }
    Ok((value * scale, grad))
}

/// Value-only reprojection loss, as in [`reprojection_loss`].
pub(crate) fn reprojection_value(
    problem: &Problem,
    params: &MotionParams,
    cameras: &[CameraModel],
    sigma: f64,
) -> Result<f64> {
    let n = problem.frame_count();
    let bodies = pose_all(problem, params)?;
    let values: Vec<std::result::Result<f64, f64>> = (0..bodies.len())
        .into_par_iter()
        .map(|idx| {
            let (j, i) = (idx / n, idx % n);
            frame_value(&cameras[j], problem.frames[j][i], &bodies[idx], sigma)
        })
        .collect();
    let mut total = 0.0;
    for (idx, v) in values.into_iter().enumerate() {
        total += v.map_err(|depth| Error::CheiralityAt { video: idx / n, frame: idx % n, depth })?;
    }
    Ok(total * problem.reprojection_scale())
}

/// `sum_i |theta_i - theta_{i+1}|_F^2` over the stacked pose matrices, with
/// its gradient in [`ParamLayout`] order.
pub fn temporal_loss(params: &MotionParams, layout: &ParamLayout) -> (f64, DVector<f64>) {
    let tj = 3 * layout.joints;
    let mut value = 0.0;
    let mut grad = DVector::zeros(layout.dim());
    for j in 0..layout.videos {
        for i in 1..layout.frames {
            let diff = &params.theta[j][i].0 - &params.theta[j][i - 1].0;
            value += diff.norm_squared();
            grad.rows_mut(layout.frame_offset(j, i), tj).axpy(2.0, &diff, 1.0);
            grad.rows_mut(layout.frame_offset(j, i - 1), tj).axpy(-2.0, &diff, 1.0);
        }
    }
    (value, grad)
}

/// `(sum_i |theta_i - Z_i|_F^2, |gamma - Y|_F^2)` and the gradient of
/// `w_pose * first + w_traj * second`.
pub fn coupling_losses(
    params: &MotionParams,
    aux: &AuxiliaryVars,
    layout: &ParamLayout,
    w_pose: f64,
    w_traj: f64,
) -> ((f64, f64), DVector<f64>) {
    let tj = 3 * layout.joints;
    let mut pose = 0.0;
    let mut traj = 0.0;
    let mut grad = DVector::zeros(layout.dim());
    for j in 0..layout.videos {
        for i in 0..layout.frames {
            let o = layout.frame_offset(j, i);
            let dz = &params.theta[j][i].0 - aux.z[i].row(j).transpose();
            pose += dz.norm_squared();
            grad.rows_mut(o, tj).axpy(2.0 * w_pose, &dz, 1.0);
            let dy = params.gamma[j][i].0 - aux.y.fixed_view::<1, 3>(j, 3 * i).transpose();
            traj += dy.norm_squared();
            grad.rows_mut(o + tj, 3).axpy(2.0 * w_traj, &dy, 1.0);
        }
    }
    ((pose, traj), grad)
}

/// The four terms of the objective and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveTerms {
    /// Normalized reprojection loss.
    pub reprojection: f64,
    /// Raw temporal smoothing sum.
    pub temporal: f64,
    /// Raw `sum_i |theta_i - Z_i|^2`.
    pub pose_coupling: f64,
    /// Raw `|gamma - Y|^2`.
    pub trajectory_coupling: f64,
    pub total: f64,
}

/// Term weights after normalization: temporal by `M * max(N - 1, 1)`,
/// coupling terms by `M * N`.
pub(crate) fn term_weights(layout: &ParamLayout, config: &SolverConfig) -> (f64, f64, f64) {
    let m = layout.videos.max(1) as f64;
    let n = layout.frames.max(1) as f64;
    let steps = (layout.frames.saturating_sub(1)).max(1) as f64;
    (
        config.lambda_t / (m * steps),
        config.lambda_r1 / (m * n),
        config.lambda_r2 / (m * n),
    )
}

pub(crate) fn combine(
    reprojection: f64,
    temporal: f64,
    pose: f64,
    traj: f64,
    layout: &ParamLayout,
    config: &SolverConfig,
) -> ObjectiveTerms {
    let (wt, wp, wy) = term_weights(layout, config);
    ObjectiveTerms {
        reprojection,
        temporal,
        pose_coupling: pose,
        trajectory_coupling: traj,
        total: reprojection + wt * temporal + wp * pose + wy * traj,
    }
}

/// `L_2d + w_t L_temp + w_r1 sum |theta_i - Z_i|^2 + w_r2 |gamma - Y|^2` with the
/// normalized weights of [`SolverConfig`].
pub fn total_objective(
    problem: &Problem,
    params: &MotionParams,
    cameras: &[CameraModel],
    aux: &AuxiliaryVars,
    config: &SolverConfig,
) -> Result<ObjectiveTerms> {
    check_shapes(problem, params, cameras)?;
    let layout = problem.layout();
    if aux.z.len() != layout.frames || aux.y.shape() != (layout.videos, 3 * layout.frames) {
        return Err(Error::Dimension("auxiliary variables do not match the parameters".into()));
    }
    let reprojection = reprojection_value(problem, params, cameras, config.geman_sigma)?;
    let (temporal, _) = temporal_loss(params, &layout);
    let ((pose, traj), _) = coupling_losses(params, aux, &layout, 0.0, 0.0);
    Ok(combine(reprojection, temporal, pose, traj, &layout, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::PoseVector;
    use crate::sync::CommonTimeline;
    use nalgebra::Vector3;

    fn two_frame_params(delta: f64) -> MotionParams {
        let sk = SkeletonSpec::default_smpl24();
        let j = sk.joint_count();
        let mut t1 = PoseVector::zeros(j);
        t1.0[5] = delta;
        MotionParams {
            theta: vec![vec![PoseVector::zeros(j), t1]],
            beta: vec![ShapeVector::zeros(j)],
            gamma: vec![vec![RootTranslation(Vector3::new(0.0, 0.0, 4.0)); 2]],
        }
    }

    #[test]
    fn temporal_loss_of_a_single_step() {
        let params = two_frame_params(0.3);
        let layout = ParamLayout { videos: 1, frames: 2, joints: 24 };
        let (v, _) = temporal_loss(&params, &layout);
        assert!((v - 0.09).abs() < 1e-15);
        let constant = two_frame_params(0.0);
        assert_eq!(temporal_loss(&constant, &layout).0, 0.0);
    }

    #[test]
    fn zero_confidence_costs_nothing() {
        let sk = SkeletonSpec::default_smpl24();
        let params = two_frame_params(0.3);
        let frame = FrameKeypoints::new(
            nalgebra::Matrix2xX::from_element(24, 123.0),
            DVector::zeros(24),
        )
        .unwrap();
        let dets = DetectionSet {
            videos: vec![crate::detections::VideoDetections::new(vec![frame.clone(), frame])],
        };
        let tl = CommonTimeline::identity(0, &[2]);
        let problem = Problem::new(&sk, &dets, &tl).unwrap();
        let cams = vec![CameraModel::identity(1000.0, Vector2::new(500.0, 500.0))];
        let (v, g) = reprojection_loss(&problem, &params, &cams, 10.0).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn flatten_round_trips() {
        let params = two_frame_params(0.7);
        let layout = ParamLayout { videos: 1, frames: 2, joints: 24 };
        assert_eq!(layout.unflatten(&layout.flatten(&params)), params);
    }
}
