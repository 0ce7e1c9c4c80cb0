//! Outer loop alternating synchronization and reconstruction.
//!
//! Round 1 synchronizes the initial pose estimates, initializes and solves.
//! Every later round re-synchronizes from the reconstructed joints, carries
//! the previous solution over to the new timeline and solves again. The
//! reference video is fixed by round 1 so every round shares a world frame.

use std::time::Instant;

use nalgebra::Matrix3xX;
use serde::{Deserialize, Serialize};

use crate::body::SkeletonSpec;
use crate::detections::DetectionSet;
use crate::error::{Error, Result};
use crate::solver::{
    alternating_solve, initialize, refine_frame, FrameParams, MotionParams, MotionSolution, SolverConfig,
};
use crate::sync::{synchronize, CommonTimeline, SyncConfig, SyncResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub sync: SyncConfig,
    pub solver: SolverConfig,
    pub outer_rounds: usize,
    /// Stop before the round limit once re-synchronization reproduces the
    /// previous timeline; that round keeps the previous solution unsolved.
    pub stop_on_fixed_timeline: bool,
    /// Fixes the reference video; chosen from the round-1 affinities when absent.
    pub reference: Option<usize>,
    /// Recorded with the outputs; the pipeline itself draws no random numbers.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sync: SyncConfig::default(),
            solver: SolverConfig::default(),
            outer_rounds: 2,
            stop_on_fixed_timeline: true,
            reference: None,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_rounds < 1 {
            return Err(Error::Config("outer_rounds must be at least 1".into()));
        }
        self.solver.validate()
    }
}

/// What one round did.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundDiagnostics {
    /// 1-based.
    pub round: usize,
    pub timeline: CommonTimeline,
    /// False when the round reproduced the previous round's timeline.
    pub timeline_changed: bool,
    pub denoise_iterations: Option<usize>,
    pub denoise_converged: Option<bool>,
    pub objective_trace: Vec<f64>,
    pub final_objective: f64,
    pub sync_seconds: f64,
    pub solve_seconds: f64,
    pub warning: Option<String>,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub solution: MotionSolution,
    pub timeline: CommonTimeline,
    pub rounds: Vec<RoundDiagnostics>,
    /// Solution of every completed round, in order.
    pub round_solutions: Vec<MotionSolution>,
    /// 1-based index of the round whose solution is returned.
    pub selected_round: usize,
    /// Synchronization output of the selected round.
    pub sync: SyncResult,
    /// Set when a later round failed and an earlier result was kept.
    pub warning: Option<String>,
}

/// Failure of round 1, with whatever it produced before failing.
#[derive(Debug)]
pub struct PipelineError {
    pub error: Error,
    /// Round-1 timeline, when synchronization succeeded.
    pub timeline: Option<CommonTimeline>,
    /// Initialization on that timeline, when it succeeded.
    pub initial: Option<MotionSolution>,
}

impl From<Error> for PipelineError {
    fn from(error: Error) -> Self {
        Self { error, timeline: None, initial: None }
    }
}

impl From<PipelineError> for Error {
    fn from(e: PipelineError) -> Self {
        e.error
    }
}

impl std::fmt::Display for PipelineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for PipelineError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Per-video, per-own-frame bodies in the world frame, taken from a solution
/// on `timeline`. Frames the timeline skips copy the nearest shown frame and
/// are refined against their own keypoints with the solved camera.
pub fn carry_to_own_frames(
    skeleton: &SkeletonSpec,
    detections: &DetectionSet,
    timeline: &CommonTimeline,
    solution: &MotionSolution,
    config: &SolverConfig,
) -> Result<Vec<Vec<FrameParams>>> {
    let params = &solution.params;
    let mut out = Vec::with_capacity(detections.video_count());
    for (j, video) in detections.videos.iter().enumerate() {
        let mut source: Vec<Option<usize>> = vec![None; video.len()];
        for (i, &f) in timeline.maps[j].iter().enumerate() {
            source[f].get_or_insert(i);
        }
        let shown: Vec<(usize, usize)> = source.iter().enumerate().filter_map(|(f, s)| s.map(|i| (f, i))).collect();
        if shown.is_empty() {
            return Err(Error::Input(format!("timeline shows no frame of video {j}")));
        }
        let mut frames = Vec::with_capacity(video.len());
        for (f, s) in source.iter().enumerate() {
            let frame = match s {
                Some(i) => params.frame(j, *i),
                None => {
                    let k = shown.partition_point(|&(g, _)| g < f);
                    let nearest = match (k.checked_sub(1).map(|k| shown[k]), shown.get(k)) {
                        (Some(a), Some(b)) => if f - a.0 <= b.0 - f { a } else { *b },
                        (Some(a), None) => a,
                        (None, Some(b)) => *b,
                        (None, None) => unreachable!("at least one frame is shown"),
                    };
                    let mut p = params.frame(j, nearest.1);
                    refine_frame(
                        skeleton,
                        &solution.cameras[j],
                        &video.frames[f],
                        &mut p,
                        config.init_refine_iters,
                        config.geman_sigma,
                        config.init_prior_weight,
                    )?;
                    p
                }
            };
            frames.push(frame);
        }
        out.push(frames);
    }
    Ok(out)
}

/// Re-indexes per-own-frame bodies onto `timeline`.
fn warm_start(
    own: &[Vec<FrameParams>],
    previous: &MotionSolution,
    timeline: &CommonTimeline,
    shared: bool,
) -> MotionSolution {
    let m = own.len();
    let pick = |j: usize| if shared { timeline.reference } else { j };
    let theta = (0..m)
        .map(|j| timeline.maps[pick(j)].iter().map(|&f| own[pick(j)][f].theta.clone()).collect())
        .collect();
    let gamma = (0..m)
        .map(|j| timeline.maps[pick(j)].iter().map(|&f| own[pick(j)][f].gamma).collect())
        .collect();
    let beta = (0..m).map(|j| previous.params.beta[pick(j)].clone()).collect();
    MotionSolution {
        params: MotionParams { theta, beta, gamma },
        cameras: previous.cameras.clone(),
        aux: previous.aux.clone(),
        objective_trace: Vec::new(),
        warning: None,
    }
}

fn joints_of(skeleton: &SkeletonSpec, bodies: &[Vec<FrameParams>]) -> Result<Vec<Vec<Matrix3xX<f64>>>> {
    bodies.iter().map(|v| v.iter().map(|p| p.joints(skeleton)).collect()).collect()
}

struct Round {
    solution: MotionSolution,
    sync: SyncResult,
}

/// Runs `config.outer_rounds` rounds of synchronization and reconstruction.
///
/// `initial_poses[j][f]` is the body estimate for frame `f` of video `j` in
/// its own camera frame. The returned solution is the round with the lowest
/// final objective, earliest on ties. An error in round 1 is returned with
/// the partial results of that round; an error in a later round keeps the
/// best earlier round and sets `warning`.
pub fn run_iterative(
    skeleton: &SkeletonSpec,
    detections: &DetectionSet,
    initial_poses: &[Vec<FrameParams>],
    config: &PipelineConfig,
) -> std::result::Result<PipelineResult, PipelineError> {
    config.validate()?;
    detections.validate(skeleton.joint_count())?;
    let m = detections.video_count();
    if initial_poses.len() != m {
        return Err(Error::Input(format!("{} initial pose tracks for {m} videos", initial_poses.len())).into());
    }

    let mut partial: (Option<CommonTimeline>, Option<MotionSolution>) = (None, None);
    let mut rounds: Vec<RoundDiagnostics> = Vec::new();
    let mut round_solutions = Vec::new();
    let mut best: Option<(usize, Round)> = None;
    let mut previous: Option<Round> = None;
    let mut reference = config.reference;
    let mut warning = None;

    for round in 1..=config.outer_rounds {
        let attempt = (|| -> Result<(Round, RoundDiagnostics)> {
            let t_sync = Instant::now();
            let (poses, carried) = match &previous {
                None => (joints_of(skeleton, initial_poses)?, None),
                Some(prev) => {
                    let own = carry_to_own_frames(skeleton, detections, &prev.sync.timeline, &prev.solution, &config.solver)?;
                    (joints_of(skeleton, &own)?, Some(own))
                }
            };
            let sync = synchronize(&poses, reference, &config.sync)?;
            let sync_seconds = t_sync.elapsed().as_secs_f64();
            let timeline = sync.timeline.clone();
            if previous.is_none() {
                partial.0 = Some(timeline.clone());
            }
            let timeline_changed = previous.as_ref().is_none_or(|p| p.sync.timeline != timeline);

            let t_solve = Instant::now();
            let solution = match (&previous, &carried) {
                (Some(prev), _) if !timeline_changed && config.stop_on_fixed_timeline => prev.solution.clone(),
                (Some(prev), Some(own)) => {
                    let start = warm_start(own, &prev.solution, &timeline, config.solver.shared_motion);
                    alternating_solve(skeleton, detections, &timeline, start, &config.solver)?
                }
                _ => {
                    let start = initialize(skeleton, initial_poses, detections, &timeline, &config.solver)?;
                    partial.1 = Some(start.clone());
                    alternating_solve(skeleton, detections, &timeline, start, &config.solver)?
                }
            };
            let diag = RoundDiagnostics {
                round,
                timeline,
                timeline_changed,
                denoise_iterations: sync.denoised.as_ref().map(|d| d.objective_trace.len() - 1),
                denoise_converged: sync.denoised.as_ref().map(|d| d.converged),
                objective_trace: solution.objective_trace.clone(),
                final_objective: solution.final_objective(),
                sync_seconds,
                solve_seconds: t_solve.elapsed().as_secs_f64(),
                warning: solution.warning.clone(),
            };
            Ok((Round { solution, sync }, diag))
        })();

        let (current, diag) = match attempt {
            Ok(ok) => ok,
            Err(error) if round == 1 => {
                return Err(PipelineError { error, timeline: partial.0, initial: partial.1 });
            }
            Err(e) => {
                let msg = format!("round {round} failed, keeping round {}: {e}", best.as_ref().map_or(0, |b| b.0));
                log::warn!("{msg}");
                warning = Some(msg);
                break;
            }
        };
        reference = Some(current.sync.timeline.reference);
        let fixed = !diag.timeline_changed;
        let objective = diag.final_objective;
        rounds.push(diag);
        round_solutions.push(current.solution.clone());
        if best.as_ref().is_none_or(|(_, b)| objective < b.solution.final_objective()) {
            best = Some((round, Round { solution: current.solution.clone(), sync: current.sync.clone() }));
        }
        previous = Some(current);
        if fixed && config.stop_on_fixed_timeline {
            break;
        }
    }

    let (selected_round, chosen) = best.expect("round 1 either succeeded or returned");
    Ok(PipelineResult {
        timeline: chosen.sync.timeline.clone(),
        solution: chosen.solution,
        rounds,
        round_solutions,
        selected_round,
        sync: chosen.sync,
        warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rounds_are_rejected() {
        let config = PipelineConfig { outer_rounds: 0, ..PipelineConfig::default() };
        assert!(matches!(config.validate(), Err(Error::Config(_))));
    }
}
