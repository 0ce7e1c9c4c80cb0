//! Preconditioned descent on the body parameters with cameras held fixed.
//!
//! The search direction solves a damped Gauss-Newton system with the
//! structure of the problem: one dense block per (video, timeline frame) for
//! `[theta, gamma]`, one block per video shape, their cross terms, and the
//! coupling between videos that the low-rank terms induce at each frame.
//! Temporal coupling between frames contributes only its diagonal. Steps are
//! accepted by Armijo backtracking on the objective with the auxiliary
//! variables re-projected onto the rank bound.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::lowrank::leading_left_subspace;
use super::objective::{
    combine, coupling_losses, linearize_frame, reprojection_value, temporal_loss, term_weights, FrameLinearization,
    ParamLayout, Problem,
};
use super::{AuxiliaryVars, MotionParams, SolverConfig};
use crate::body::PosedBody;
use crate::error::{Error, Result};
use crate::geometry::CameraModel;

const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 30;

/// Total objective; `CheiralityAt` when a body point falls behind its camera.
pub(crate) fn objective_value(
    problem: &Problem,
    params: &MotionParams,
    cameras: &[CameraModel],
    aux: &AuxiliaryVars,
    config: &SolverConfig,
) -> Result<f64> {
    let layout = problem.layout();
    let reprojection = reprojection_value(problem, params, cameras, config.geman_sigma)?;
    let (temporal, _) = temporal_loss(params, &layout);
    let ((pose, traj), _) = coupling_losses(params, aux, &layout, 0.0, 0.0);
    Ok(combine(reprojection, temporal, pose, traj, &layout, config).total)
}

/// Gauss-Newton blocks of one video (or of all videos summed, in shared mode).
struct ArrowSystem {
    frame: Vec<DMatrix<f64>>,
    cross: Vec<DMatrix<f64>>,
    beta: DMatrix<f64>,
    g_frame: Vec<DVector<f64>>,
    g_beta: DVector<f64>,
}

impl ArrowSystem {
    fn zeros(frames: usize, fd: usize, nj: usize) -> Self {
        Self {
            frame: vec![DMatrix::zeros(fd, fd); frames],
            cross: vec![DMatrix::zeros(fd, nj); frames],
            beta: DMatrix::zeros(nj, nj),
            g_frame: vec![DVector::zeros(fd); frames],
            g_beta: DVector::zeros(nj),
        }
    }
}

/// Gauss-Newton model of the low-rank terms with the leading subspaces held
/// fixed: `w ‖(I - U U^T) X‖²` per frame for poses, and once for the whole
/// trajectory matrix.
struct Coupling {
    pose_weight: f64,
    traj_weight: f64,
    /// Leading left subspace of each frame's pose matrix; `None` when the
    /// rank bound is vacuous.
    pose_basis: Option<Vec<DMatrix<f64>>>,
    traj_basis: Option<DMatrix<f64>>,
}

impl Coupling {
    fn new(params: &MotionParams, config: &SolverConfig, wp: f64, wy: f64) -> Self {
        let m = params.video_count();
        let pose_active = wp > 0.0 && config.pose_rank() < m;
        let traj_active = wy > 0.0 && config.trajectory_rank() < m;
        Self {
            pose_weight: if pose_active { wp } else { 0.0 },
            traj_weight: if traj_active { wy } else { 0.0 },
            pose_basis: pose_active.then(|| {
                (0..params.frame_count())
                    .map(|i| leading_left_subspace(&params.stacked_pose(i), config.pose_rank()))
                    .collect()
            }),
            traj_basis: traj_active
                .then(|| leading_left_subspace(&params.stacked_translation(), config.trajectory_rank())),
        }
    }

    fn none() -> Self {
        Self { pose_weight: 0.0, traj_weight: 0.0, pose_basis: None, traj_basis: None }
    }

    /// Width of the subspace part of the coupling.
    fn width(&self) -> usize {
        let sp = self.pose_basis.as_ref().map_or(0, |b| b[0].ncols());
        let sy = self.traj_basis.as_ref().map_or(0, |u| u.ncols());
        sp.max(sy)
    }

    /// Diagonal of block `(video j, component k)` of `W`, where `W W^T` is
    /// the subspace part of frame `i`'s coupling Hessian.
    fn scales(&self, i: usize, j: usize, k: usize, fd: usize) -> DVector<f64> {
        let pd = fd - 3;
        let mut out = DVector::zeros(fd);
        if let Some(u) = self.pose_basis.as_ref().map(|b| &b[i]).filter(|u| k < u.ncols()) {
            out.rows_mut(0, pd).fill((2.0 * self.pose_weight).sqrt() * u[(j, k)]);
        }
        if let Some(u) = self.traj_basis.as_ref().filter(|u| k < u.ncols()) {
            out.rows_mut(pd, 3).fill((2.0 * self.traj_weight).sqrt() * u[(j, k)]);
        }
        out
    }
}

fn damp(m: &DMatrix<f64>, mu: f64) -> DMatrix<f64> {
    let mut out = m.clone();
    let top = m.diagonal().max().max(1e-300);
    for d in 0..m.nrows() {
        out[(d, d)] += mu * (m[(d, d)] + 1e-9 * top) + 1e-14 * top;
    }
    out
}

/// Per-video frame directions and shape directions.
type Direction = (Vec<Vec<DVector<f64>>>, Vec<DVector<f64>>);

/// One timeline frame after elimination: `H_i = D - W W^T` with `D` block
/// diagonal over videos.
struct EliminatedFrame {
    d_inv: Vec<DMatrix<f64>>,
    /// `D^-1 C` and `D^-1 g`, per video.
    x: Vec<DMatrix<f64>>,
    y: Vec<DVector<f64>>,
    /// `W` diagonals indexed `[j][k]` and the factor of `I - W^T D^-1 W`.
    scales: Vec<Vec<DVector<f64>>>,
    capacitance: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

impl EliminatedFrame {
    /// `H_i^-1 r` given `v = D^-1 r`.
    fn correct(&self, mut v: Vec<DVector<f64>>) -> Vec<DVector<f64>> {
        let Some(cap) = &self.capacitance else { return v };
        let fd = v[0].len();
        let width = self.scales[0].len();
        let mut t = DVector::zeros(fd * width);
        for (j, vj) in v.iter().enumerate() {
            for k in 0..width {
                t.rows_mut(k * fd, fd).axpy(1.0, &self.scales[j][k].component_mul(vj), 1.0);
            }
        }
        let q = cap.solve(&t);
        for (j, vj) in v.iter_mut().enumerate() {
            let mut acc = DVector::zeros(fd);
            for k in 0..width {
                acc += self.scales[j][k].component_mul(&q.rows(k * fd, fd));
            }
            *vj += &self.d_inv[j] * acc;
        }
        v
    }
}

/// Solves the damped system `(H + mu D) d = -g` over all videos at once,
/// eliminating frames first and shapes last. `None` if it is not positive
/// definite.
///
/// Within a frame the coupling is `D - W W^T` with `W` made of diagonal
/// blocks, so it is inverted by the Woodbury identity through a capacitance
/// matrix of size `fd x width`.
fn solve(systems: &[ArrowSystem], coupling: &Coupling, mu: f64) -> Option<Direction> {
    let m = systems.len();
    let n = systems[0].frame.len();
    let nj = systems[0].beta.nrows();
    let fd = systems[0].frame.first().map_or(0, |f| f.nrows());
    let pd = fd.saturating_sub(3);
    let width = coupling.width();

    let mut schur = DMatrix::zeros(m * nj, m * nj);
    let mut rhs = DVector::zeros(m * nj);
    for (j, sys) in systems.iter().enumerate() {
        schur.view_mut((j * nj, j * nj), (nj, nj)).copy_from(&damp(&sys.beta, mu));
        rhs.rows_mut(j * nj, nj).copy_from(&-&sys.g_beta);
    }

    let mut eliminated = Vec::with_capacity(n);
    for i in 0..n {
        let mut d_inv = Vec::with_capacity(m);
        let mut x = Vec::with_capacity(m);
        let mut y = Vec::with_capacity(m);
        for (j, sys) in systems.iter().enumerate() {
            let mut block = damp(&sys.frame[i], mu);
            for d in 0..pd {
                block[(d, d)] += 2.0 * coupling.pose_weight;
            }
            for d in pd..fd {
                block[(d, d)] += 2.0 * coupling.traj_weight;
            }
            let inv = block.cholesky()?.inverse();
            x.push(&inv * &sys.cross[i]);
            y.push(&inv * &sys.g_frame[i]);
            schur.view_mut((j * nj, j * nj), (nj, nj)).gemm_tr(-1.0, &sys.cross[i], &x[j], 1.0);
            rhs.rows_mut(j * nj, nj).axpy(1.0, &(sys.cross[i].transpose() * &y[j]), 1.0);
            d_inv.push(inv);
        }
        let scales: Vec<Vec<DVector<f64>>> =
            (0..m).map(|j| (0..width).map(|k| coupling.scales(i, j, k, fd)).collect()).collect();
        let mut capacitance = None;
        if width > 0 {
            let q = fd * width;
            let mut cap = DMatrix::identity(q, q);
            let mut t = DMatrix::zeros(q, m * nj);
            let mut t_g = DVector::zeros(q);
            for j in 0..m {
                for k in 0..width {
                    let sk = &scales[j][k];
                    for l in 0..width {
                        let sl = &scales[j][l];
                        let mut blk = cap.view_mut((k * fd, l * fd), (fd, fd));
                        for b in 0..fd {
                            for a in 0..fd {
                                blk[(a, b)] -= sk[a] * d_inv[j][(a, b)] * sl[b];
                            }
                        }
                    }
                    let mut tb = t.view_mut((k * fd, j * nj), (fd, nj));
                    for c in 0..nj {
                        tb.column_mut(c).copy_from(&sk.component_mul(&x[j].column(c)));
                    }
                    t_g.rows_mut(k * fd, fd).axpy(1.0, &sk.component_mul(&y[j]), 1.0);
                }
            }
            let cap = cap.cholesky()?;
            // C^T H^-1 C = C^T D^-1 C + T^T K^-1 T, likewise for the gradient.
            let mut lt = t.clone();
            cap.l_dirty().solve_lower_triangular_mut(&mut lt);
            let mut lt_g = t_g.clone();
            cap.l_dirty().solve_lower_triangular_mut(&mut lt_g);
            schur -= lt.transpose() * &lt;
            rhs += lt.transpose() * lt_g;
            capacitance = Some(cap);
        }
        eliminated.push(EliminatedFrame { d_inv, x, y, scales, capacitance });
    }

    let d_beta = schur.cholesky()?.solve(&rhs);
    let mut frames = vec![Vec::with_capacity(n); m];
    for e in eliminated {
        let v: Vec<DVector<f64>> =
            (0..m).map(|j| &e.y[j] + &e.x[j] * d_beta.rows(j * nj, nj)).collect();
        for (j, d) in e.correct(v).into_iter().enumerate() {
            frames[j].push(-d);
        }
    }
    let betas = (0..m).map(|j| d_beta.rows(j * nj, nj).into_owned()).collect();
    Some((frames, betas))
}

/// Full gradient plus the per-video arrow systems (data and temporal parts).
fn linearize(
    problem: &Problem,
    params: &MotionParams,
    cameras: &[CameraModel],
    aux: &AuxiliaryVars,
    config: &SolverConfig,
) -> Result<(DVector<f64>, Vec<ArrowSystem>)> {
    let layout = problem.layout();
    let (m, n, nj) = (layout.videos, layout.frames, layout.joints);
    let fd = layout.frame_dim();
    let lins: Vec<Result<FrameLinearization>> = (0..m * n)
        .into_par_iter()
        .map(|idx| {
            let (j, i) = (idx / n, idx % n);
            let body = PosedBody::new(problem.skeleton, &params.theta[j][i], &params.beta[j], &params.gamma[j][i])?;
            linearize_frame(problem.skeleton, &cameras[j], problem.frames[j][i], &body, config.geman_sigma, true)
                .map_err(|depth| Error::CheiralityAt { video: j, frame: i, depth })
        })
        .collect();

    let scale = if problem.confidence_sum > 0.0 { 1.0 / problem.confidence_sum } else { 0.0 };
    let (wt, wp, wy) = term_weights(&layout, config);
    let (_, g_temp) = temporal_loss(params, &layout);
    let (_, g_coup) = coupling_losses(params, aux, &layout, wp, wy);
    let mut grad = g_temp * wt + g_coup;

    let mut systems: Vec<ArrowSystem> = (0..m).map(|_| ArrowSystem::zeros(n, fd, nj)).collect();
    for (idx, lin) in lins.into_iter().enumerate() {
        let (j, i) = (idx / n, idx % n);
        let lin = lin?;
        let o = layout.frame_offset(j, i);
        grad.rows_mut(o, fd).axpy(scale, &lin.grad_frame, 1.0);
        grad.rows_mut(layout.beta_offset(j), nj).axpy(scale, &lin.grad_beta, 1.0);
        let h = lin.hessian.expect("requested Gauss-Newton blocks");
        let sys = &mut systems[j];
        sys.frame[i] = h.frame * scale;
        sys.cross[i] = h.cross * scale;
        sys.beta += h.beta * scale;
        let neighbors = (i > 0) as usize + (i + 1 < n) as usize;
        for d in 0..3 * nj {
            sys.frame[i][(d, d)] += 2.0 * wt * neighbors as f64;
        }
    }
    for (j, sys) in systems.iter_mut().enumerate() {
        for i in 0..n {
            sys.g_frame[i] = grad.rows(layout.frame_offset(j, i), fd).into_owned();
        }
        sys.g_beta = grad.rows(layout.beta_offset(j), nj).into_owned();
    }
    Ok((grad, systems))
}

fn sum_systems(systems: Vec<ArrowSystem>) -> ArrowSystem {
    let mut it = systems.into_iter();
    let mut acc = it.next().expect("at least one video");
    for s in it {
        for i in 0..acc.frame.len() {
            acc.frame[i] += &s.frame[i];
            acc.cross[i] += &s.cross[i];
            acc.g_frame[i] += &s.g_frame[i];
        }
        acc.beta += &s.beta;
        acc.g_beta += &s.g_beta;
    }
    acc
}

fn scatter(layout: &ParamLayout, video: usize, frames: &[DVector<f64>], beta: &DVector<f64>, out: &mut DVector<f64>) {
    let fd = layout.frame_dim();
    for (i, d) in frames.iter().enumerate() {
        out.rows_mut(layout.frame_offset(video, i), fd).copy_from(d);
    }
    out.rows_mut(layout.beta_offset(video), layout.joints).copy_from(beta);
}

/// Outcome of one backtracking step.
pub(crate) enum StepOutcome {
    /// `aux` is the projection of `params`.
    Accepted { params: MotionParams, aux: AuxiliaryVars, objective: f64 },
    /// No decrease found along the direction.
    Stalled,
}

/// One damped Gauss-Newton-preconditioned step with Armijo backtracking.
///
/// `aux` must be the projection of `params`, and `current` their objective.
/// `damping` is adapted in place. In shared mode every video receives the
/// same direction, computed from the summed systems.
pub(crate) fn descent_step(
    problem: &Problem,
    params: &MotionParams,
    cameras: &[CameraModel],
    aux: &AuxiliaryVars,
    config: &SolverConfig,
    current: f64,
    damping: &mut f64,
) -> Result<StepOutcome> {
    let layout = problem.layout();
    let (grad, systems) = linearize(problem, params, cameras, aux, config)?;
    if grad.iter().all(|g| *g == 0.0) {
        return Ok(StepOutcome::Stalled);
    }
    let shared = config.shared_motion && layout.videos > 1;
    let (systems, coupling) = if shared {
        (vec![sum_systems(systems)], Coupling::none())
    } else {
        let (_, wp, wy) = term_weights(&layout, config);
        let coupling = Coupling::new(params, config, wp, wy);
        (systems, coupling)
    };

    for _ in 0..8 {
        let Some((d_frames, d_betas)) = solve(&systems, &coupling, *damping) else {
            *damping = (*damping * 10.0).max(1e-6);
            continue;
        };
        let mut direction = DVector::zeros(layout.dim());
        if shared {
            for v in 0..layout.videos {
                scatter(&layout, v, &d_frames[0], &d_betas[0], &mut direction);
            }
        } else {
            for (j, (f, b)) in d_frames.iter().zip(&d_betas).enumerate() {
                scatter(&layout, j, f, b, &mut direction);
            }
        }
        let slope = grad.dot(&direction);
        if !(slope < 0.0) {
            *damping = (*damping * 10.0).max(1e-6);
            continue;
        }
        let mut alpha = config.step_size;
        for halving in 0..MAX_HALVINGS {
            let candidate = layout.offset_params(params, &direction, alpha);
            let cand_aux = AuxiliaryVars::project_from(&candidate, config.pose_rank(), config.trajectory_rank());
            match objective_value(problem, &candidate, cameras, &cand_aux, config) {
                Ok(f) if f < current && f <= current + ARMIJO_C * alpha * slope => {
                    if halving == 0 {
                        *damping = (*damping / 3.0).max(1e-9);
                    } else {
                        *damping = (*damping * 2.0).min(1e6);
                    }
                    return Ok(StepOutcome::Accepted { params: candidate, aux: cand_aux, objective: f });
                }
                Ok(_) | Err(Error::CheiralityAt { .. }) => {}
                Err(e) => return Err(e),
            }
            alpha *= 0.5;
        }
        *damping = (*damping * 10.0).max(1e-6);
    }
    Ok(StepOutcome::Stalled)
}
