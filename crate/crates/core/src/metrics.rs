//! Reconstruction and synchronization error metrics.

use nalgebra::Matrix3xX;
use serde::{Deserialize, Serialize};

use crate::body::SkeletonSpec;
use crate::error::{Error, Result};
use crate::geometry::{procrustes_align, AlignScale};
use crate::solver::MotionParams;
use crate::sync::CommonTimeline;
use crate::synth::GroundTruth;

fn check_pairs(pred: &[Matrix3xX<f64>], truth: &[Matrix3xX<f64>]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!("{} predicted frames vs {} true frames", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::Input("no frames to evaluate".into()));
    }
    if let Some(f) = pred.iter().zip(truth).position(|(p, t)| p.ncols() != t.ncols()) {
        return Err(Error::Dimension(format!("frame {f}: joint counts differ")));
    }
    Ok(())
}

fn mean_joint_error(pairs: impl Iterator<Item = (Matrix3xX<f64>, Matrix3xX<f64>)>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, t) in pairs {
        for (a, b) in p.column_iter().zip(t.column_iter()) {
            sum += (a - b).norm();
            count += 1;
        }
    }
    sum / count.max(1) as f64
}

/// Mean per-joint position error in millimeters (inputs in meters).
///
/// With `root_relative`, both skeletons are translated so their root joints
/// coincide in every frame.
pub fn mpjpe(pred: &[Matrix3xX<f64>], truth: &[Matrix3xX<f64>], root_relative: bool) -> Result<f64> {
    check_pairs(pred, truth)?;
    let centered = |m: &Matrix3xX<f64>| {
        if root_relative {
            let root = m.column(0).into_owned();
            let mut out = m.clone();
            for mut c in out.column_iter_mut() {
                c -= root;
            }
            out
        } else {
            m.clone()
        }
    };
    Ok(1000.0 * mean_joint_error(pred.iter().zip(truth).map(|(p, t)| (centered(p), centered(t)))))
}

/// Mean per-joint error after aligning each predicted frame to the truth by
/// a similarity transform, millimeters.
pub fn p_mpjpe(pred: &[Matrix3xX<f64>], truth: &[Matrix3xX<f64>]) -> Result<f64> {
    check_pairs(pred, truth)?;
    let aligned: Vec<(Matrix3xX<f64>, Matrix3xX<f64>)> = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| Ok((procrustes_align(p, t, AlignScale::Similarity)?.apply(p), t.clone())))
        .collect::<Result<_>>()?;
    Ok(1000.0 * mean_joint_error(aligned.into_iter()))
}

/// Root-trajectory error after one similarity alignment of the whole
/// trajectory, millimeters. Falls back to translation-only alignment when
/// the trajectory spans less than a plane.
pub fn trajectory_rmse_mm(pred_roots: &Matrix3xX<f64>, truth_roots: &Matrix3xX<f64>) -> Result<f64> {
    if pred_roots.ncols() != truth_roots.ncols() || pred_roots.ncols() == 0 {
        return Err(Error::Dimension("trajectories must be nonempty and equally long".into()));
    }
    let aligned = match procrustes_align(pred_roots, truth_roots, AlignScale::Similarity) {
        Ok(tf) => tf.apply(pred_roots),
        Err(Error::Degenerate(_)) => {
            let shift = truth_roots.column_mean() - pred_roots.column_mean();
            let mut out = pred_roots.clone();
            for mut c in out.column_iter_mut() {
                c += shift;
            }
            out
        }
        Err(e) => return Err(e),
    };
    let n = pred_roots.ncols() as f64;
    Ok(1000.0 * ((aligned - truth_roots).norm_squared() / n).sqrt())
}

/// Acceptable frames of each video for every reference frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthTimeline {
    pub reference: usize,
    /// `windows[j][i] = (lo, hi)`: frames of video `j` that are correct
    /// matches for reference frame `i`.
    pub windows: Vec<Vec<(usize, usize)>>,
    pub clip_lengths: Vec<usize>,
}

impl TruthTimeline {
    /// Exact truth from known frame maps.
    pub fn from_maps(timeline: &CommonTimeline, clip_lengths: &[usize]) -> Self {
        Self {
            reference: timeline.reference,
            windows: timeline.maps.iter().map(|m| m.iter().map(|&f| (f, f)).collect()).collect(),
            clip_lengths: clip_lengths.to_vec(),
        }
    }

    /// Truth from the underlying time of every frame: the correct matches
    /// for a reference frame are the frames nearest to it in time (all of
    /// them when several are equally near).
    pub fn from_frame_times(frame_times: &[Vec<usize>], reference: usize) -> Self {
        let windows = frame_times
            .iter()
            .map(|times| {
                frame_times[reference]
                    .iter()
                    .map(|&t| {
                        let dist = |f: usize| times[f].abs_diff(t);
                        let best = (0..times.len()).map(dist).min().expect("nonempty video");
                        let lo = (0..times.len()).find(|&f| dist(f) == best).expect("minimum exists");
                        let hi = (0..times.len()).rev().find(|&f| dist(f) == best).expect("minimum exists");
                        (lo, hi)
                    })
                    .collect()
            })
            .collect();
        Self { reference, windows, clip_lengths: frame_times.iter().map(|t| t.len()).collect() }
    }
}

/// Per-video synchronization error: mean frame distance to the correct
/// window, divided by the video's length. Zero for the reference video.
pub fn sync_error_per_video(timeline: &CommonTimeline, truth: &TruthTimeline) -> Result<Vec<f64>> {
    if timeline.reference != truth.reference {
        return Err(Error::Input(format!(
            "timeline reference {} differs from truth reference {}",
            timeline.reference, truth.reference
        )));
    }
    if timeline.maps.len() != truth.windows.len() {
        return Err(Error::Dimension("timeline and truth cover different videos".into()));
    }
    timeline
        .maps
        .iter()
        .zip(&truth.windows)
        .zip(&truth.clip_lengths)
        .enumerate()
        .map(|(j, ((map, windows), &len))| {
            if map.len() != windows.len() {
                return Err(Error::Dimension(format!("video {j}: timeline length differs from truth")));
            }
            if j == timeline.reference || map.is_empty() {
                return Ok(0.0);
            }
            let total: usize = map
                .iter()
                .zip(windows)
                .map(|(&f, &(lo, hi))| if f < lo { lo - f } else { f.saturating_sub(hi) })
                .sum();
            Ok(total as f64 / map.len() as f64 / len as f64)
        })
        .collect()
}

/// Mean over non-reference videos of [`sync_error_per_video`]; zero with a
/// single video.
pub fn sync_error(timeline: &CommonTimeline, truth: &TruthTimeline) -> Result<f64> {
    let per_video = sync_error_per_video(timeline, truth)?;
    let others = per_video.len().saturating_sub(1);
    if others == 0 {
        return Ok(0.0);
    }
    Ok(per_video.iter().sum::<f64>() / others as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub mpjpe_root_relative: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { mpjpe_root_relative: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub video: usize,
    pub mpjpe_mm: f64,
    pub p_mpjpe_mm: f64,
    pub sync_error_fraction: f64,
    pub trajectory_rmse_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mpjpe_mm: f64,
    pub p_mpjpe_mm: f64,
    pub sync_error_fraction: f64,
    pub trajectory_rmse_mm: f64,
    pub per_video: Vec<VideoMetrics>,
}

/// Predicted and true joints of every timeline frame of one video.
pub fn matched_joints(
    skeleton: &SkeletonSpec,
    params: &MotionParams,
    timeline: &CommonTimeline,
    truth: &GroundTruth,
    video: usize,
) -> Result<(Vec<Matrix3xX<f64>>, Vec<Matrix3xX<f64>>)> {
    let pred = params.video_joints(skeleton, video)?;
    let gt = timeline.maps[video]
        .iter()
        .map(|&f| truth.frame_params(video, f).joints(skeleton))
        .collect::<Result<Vec<_>>>()?;
    Ok((pred, gt))
}

/// Scores a reconstruction against ground truth.
///
/// The solution lives in the reference camera's frame, so MPJPE first maps
/// each video's predicted joints onto the truth with one similarity
/// transform fitted over all its frames.
pub fn evaluate(
    skeleton: &SkeletonSpec,
    params: &MotionParams,
    timeline: &CommonTimeline,
    truth: &GroundTruth,
    config: &MetricsConfig,
) -> Result<Metrics> {
    if truth.video_count() != timeline.video_count() || params.video_count() != timeline.video_count() {
        return Err(Error::Dimension("solution, timeline and truth cover different videos".into()));
    }
    let truth_tl = TruthTimeline::from_frame_times(&truth.frame_times, timeline.reference);
    let sync = sync_error_per_video(timeline, &truth_tl)?;
    let mut per_video = Vec::with_capacity(params.video_count());
    let mut all_pred = Vec::new();
    let mut all_truth = Vec::new();
    let mut all_aligned = Vec::new();
    for j in 0..params.video_count() {
        let (pred, gt) = matched_joints(skeleton, params, timeline, truth, j)?;
        let stack = |frames: &[Matrix3xX<f64>]| {
            let cols: Vec<_> = frames.iter().flat_map(|f| f.column_iter().map(|c| c.into_owned())).collect();
            Matrix3xX::from_columns(&cols)
        };
        let tf = procrustes_align(&stack(&pred), &stack(&gt), AlignScale::Similarity)?;
        let aligned: Vec<Matrix3xX<f64>> = pred.iter().map(|p| tf.apply(p)).collect();
        let roots = |frames: &[Matrix3xX<f64>]| {
            Matrix3xX::from_columns(&frames.iter().map(|f| f.column(0).into_owned()).collect::<Vec<_>>())
        };
        per_video.push(VideoMetrics {
            video: j,
            mpjpe_mm: mpjpe(&aligned, &gt, config.mpjpe_root_relative)?,
            p_mpjpe_mm: p_mpjpe(&pred, &gt)?,
            sync_error_fraction: sync[j],
            trajectory_rmse_mm: trajectory_rmse_mm(&roots(&pred), &roots(&gt))?,
        });
        all_pred.extend(pred);
        all_aligned.extend(aligned);
        all_truth.extend(gt);
    }
    let m = per_video.len() as f64;
    Ok(Metrics {
        mpjpe_mm: mpjpe(&all_aligned, &all_truth, config.mpjpe_root_relative)?,
        p_mpjpe_mm: p_mpjpe(&all_pred, &all_truth)?,
        sync_error_fraction: sync_error(timeline, &truth_tl)?,
        trajectory_rmse_mm: per_video.iter().map(|v| v.trajectory_rmse_mm).sum::<f64>() / m,
        per_video,
    })
}
