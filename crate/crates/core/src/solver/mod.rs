//! Joint reconstruction of per-video motion and cameras from 2D keypoints.
//!
//! The objective combines a robust reprojection term, temporal smoothing and
//! quadratic coupling of the stacked pose and trajectory matrices to low-rank
//! auxiliary variables. Body parameters, auxiliary variables and cameras are
//! updated alternately.

mod alternate;
mod descent;
mod init;
mod lowrank;
mod objective;

pub use alternate::alternating_solve;
pub use init::{initialize, refine_frame};
pub use lowrank::lowrank_project;
pub use objective::{
    coupling_losses, reprojection_loss, temporal_loss, total_objective, ObjectiveTerms, ParamLayout,
    Problem,
};

use nalgebra::{DMatrix, Matrix3xX};
use serde::{Deserialize, Serialize};

use crate::body::{forward_kinematics, PoseVector, RootTranslation, ShapeVector, SkeletonSpec};
use crate::error::{Error, Result};
use crate::geometry::CameraModel;

/// Pose, shape and root translation of one body in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameParams {
    pub theta: PoseVector,
    pub beta: ShapeVector,
    pub gamma: RootTranslation,
}

impl FrameParams {
    pub fn joints(&self, skeleton: &SkeletonSpec) -> Result<Matrix3xX<f64>> {
        forward_kinematics(skeleton, &self.theta, &self.beta, &self.gamma)
    }
}

/// Motion of every video along the common timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    /// `theta[j][i]`: pose of video `j` at timeline frame `i`.
    pub theta: Vec<Vec<PoseVector>>,
    /// One shape per video.
    pub beta: Vec<ShapeVector>,
    pub gamma: Vec<Vec<RootTranslation>>,
}

impl MotionParams {
    pub fn video_count(&self) -> usize {
        self.beta.len()
    }

    pub fn frame_count(&self) -> usize {
        self.theta.first().map_or(0, |t| t.len())
    }

    pub fn validate(&self, skeleton: &SkeletonSpec) -> Result<()> {
        let m = self.video_count();
        let n = self.frame_count();
        let j = skeleton.joint_count();
        if self.theta.len() != m || self.gamma.len() != m {
            return Err(Error::Dimension(format!(
                "{} pose tracks, {} translation tracks, {} shapes",
                self.theta.len(),
                self.gamma.len(),
                m
            )));
        }
        for v in 0..m {
            if self.theta[v].len() != n || self.gamma[v].len() != n {
                return Err(Error::Dimension(format!("video {v} does not span {n} frames")));
            }
            if self.beta[v].0.len() != j || self.theta[v].iter().any(|t| t.0.len() != 3 * j) {
                return Err(Error::Dimension(format!("video {v} parameters do not match {j} joints")));
            }
        }
        Ok(())
    }

    pub fn frame(&self, video: usize, frame: usize) -> FrameParams {
        FrameParams {
            theta: self.theta[video][frame].clone(),
            beta: self.beta[video].clone(),
            gamma: self.gamma[video][frame],
        }
    }

    pub fn joints(&self, skeleton: &SkeletonSpec, video: usize, frame: usize) -> Result<Matrix3xX<f64>> {
        forward_kinematics(skeleton, &self.theta[video][frame], &self.beta[video], &self.gamma[video][frame])
    }

    /// Joints of every frame of one video.
    pub fn video_joints(&self, skeleton: &SkeletonSpec, video: usize) -> Result<Vec<Matrix3xX<f64>>> {
        (0..self.frame_count()).map(|i| self.joints(skeleton, video, i)).collect()
    }

    /// `M x 3J` matrix whose row `j` is video `j`'s pose at frame `i`.
    pub fn stacked_pose(&self, frame: usize) -> DMatrix<f64> {
        let m = self.video_count();
        let d = self.theta[0][frame].0.len();
        DMatrix::from_fn(m, d, |j, c| self.theta[j][frame].0[c])
    }

    /// `M x 3N` matrix of root trajectories.
    pub fn stacked_translation(&self) -> DMatrix<f64> {
        let m = self.video_count();
        let n = self.frame_count();
        DMatrix::from_fn(m, 3 * n, |j, c| self.gamma[j][c / 3].0[c % 3])
    }
}

/// Low-rank auxiliary copies of the stacked pose and trajectory matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryVars {
    /// One `M x 3J` matrix per timeline frame.
    pub z: Vec<DMatrix<f64>>,
    /// `M x 3N`.
    pub y: DMatrix<f64>,
}

impl AuxiliaryVars {
    /// Best rank-bounded approximations of the current parameters.
    pub fn project_from(params: &MotionParams, pose_rank: usize, trajectory_rank: usize) -> Self {
        let z = (0..params.frame_count())
            .map(|i| lowrank_project(&params.stacked_pose(i), pose_rank))
            .collect();
        let y = lowrank_project(&params.stacked_translation(), trajectory_rank);
        Self { z, y }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Rank bound `s` for both the pose and trajectory matrices.
    pub rank: usize,
    /// Overrides `rank` for the per-frame pose matrices.
    pub pose_rank: Option<usize>,
    /// Overrides `rank` for the trajectory matrix.
    pub trajectory_rank: Option<usize>,
    pub lambda_t: f64,
    pub lambda_r1: f64,
    pub lambda_r2: f64,
    /// Robust loss scale in pixels.
    pub geman_sigma: f64,
    /// Initial line-search step along the preconditioned direction.
    pub step_size: f64,
    pub max_outer_iters: usize,
    pub max_inner_iters: usize,
    pub convergence_tol: f64,
    pub pnp_iters: usize,
    pub refine_focal: bool,
    /// Per-frame refinement steps during initialization.
    pub init_refine_iters: usize,
    /// Pull of the per-frame refinement toward the initial pose estimate,
    /// px² per rad².
    pub init_prior_weight: f64,
    /// Force one parameter set shared by every video.
    pub shared_motion: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rank: 1,
            pose_rank: None,
            trajectory_rank: None,
            lambda_t: 0.1,
            lambda_r1: 100.0,
            lambda_r2: 100.0,
            geman_sigma: 10.0,
            step_size: 1.0,
            max_outer_iters: 20,
            max_inner_iters: 20,
            convergence_tol: 3e-3,
            pnp_iters: 50,
            refine_focal: false,
            init_refine_iters: 20,
            init_prior_weight: 100.0,
            shared_motion: false,
        }
    }
}

impl SolverConfig {
    pub fn pose_rank(&self) -> usize {
        self.pose_rank.unwrap_or(self.rank)
    }

    pub fn trajectory_rank(&self) -> usize {
        self.trajectory_rank.unwrap_or(self.rank)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pose_rank() < 1 || self.trajectory_rank() < 1 {
            return Err(Error::Config("rank bounds must be at least 1".into()));
        }
        for (name, v) in [("init_prior_weight", self.init_prior_weight), ("lambda_t", self.lambda_t), ("lambda_r1", self.lambda_r1), ("lambda_r2", self.lambda_r2)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        if !(self.geman_sigma > 0.0) || !self.geman_sigma.is_finite() {
            return Err(Error::Config(format!("geman_sigma must be positive, got {}", self.geman_sigma)));
        }
        if !(self.step_size > 0.0) || !(self.convergence_tol >= 0.0) {
            return Err(Error::Config("step_size must be positive and convergence_tol nonnegative".into()));
        }
        Ok(())
    }
}

/// Result of a solve.
#[derive(Debug, Clone)]
pub struct MotionSolution {
    pub params: MotionParams,
    pub cameras: Vec<CameraModel>,
    pub aux: AuxiliaryVars,
    /// Objective before the first outer iteration and after every one.
    pub objective_trace: Vec<f64>,
    /// Set when the solve stopped early without meeting the tolerance.
    pub warning: Option<String>,
}

impl MotionSolution {
    pub fn final_objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(f64::NAN)
    }
}
