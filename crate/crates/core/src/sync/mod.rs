//! Pose-based synchronization of several videos of the same action.
//!
//! Per-frame 3D poses give pairwise affinity blocks, the stacked affinity
//! matrix is denoised toward a cycle-consistent low-rank matrix, and every
//! video is aligned to a reference video by max-affinity time warping.

mod affinity;
mod denoise;
mod dtw;
mod timeline;

pub use affinity::{
    affinity_matrix, pairwise_affinities, pose_distance, AffinityBlock, AffinityGrid, AffinityMap,
};
pub use denoise::{consistent_denoise, default_lambda, denoise_objective, DenoiseOptions, StackedCorrespondence};
pub use dtw::{dtw_align, WarpingPath};
pub use timeline::{build_common_timeline, CommonTimeline};

use nalgebra::Matrix3xX;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::AlignScale;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyncConfig {
    /// Scale-aware (`similarity`) or rigid Procrustes inside the pose distance.
    pub procrustes_scale: AlignScale,
    pub affinity_map: AffinityMap,
    /// Run cycle-consistent denoising before time warping.
    pub denoise: bool,
    pub denoise_options: DenoiseOptions,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self {
            procrustes_scale: AlignScale::Similarity,
            affinity_map: AffinityMap::Reciprocal,
            denoise: true,
            denoise_options: DenoiseOptions::default(),
        }
    }
}

/// Video with the largest off-diagonal affinity mass, lowest index on ties.
pub fn choose_reference(grid: &AffinityGrid) -> usize {
    let mass = grid.affinity_mass();
    let mut best = 0;
    for (j, &v) in mass.iter().enumerate() {
        if v > mass[best] {
            best = j;
        }
    }
    best
}

/// Everything produced by one synchronization pass.
#[derive(Debug, Clone)]
pub struct SyncResult {
    pub raw: AffinityGrid,
    pub denoised: Option<StackedCorrespondence>,
    pub paths: Vec<Option<WarpingPath>>,
    pub timeline: CommonTimeline,
}

impl SyncResult {
    /// Blocks the warping paths were decoded from.
    pub fn decoded_grid(&self) -> AffinityGrid {
        self.denoised.as_ref().map_or_else(|| self.raw.clone(), |d| d.to_grid())
    }
}

/// Synchronizes videos from per-frame 3D poses.
///
/// Warping paths come from the denoised blocks when denoising is on; a
/// reference frame matched to several frames keeps the one with the highest
/// raw affinity.
/// `reference` fixes the reference video; `None` picks it from the raw
/// affinities.
pub fn synchronize(
    poses: &[Vec<Matrix3xX<f64>>],
    reference: Option<usize>,
    config: &SyncConfig,
) -> Result<SyncResult> {
    let m = poses.len();
    if m == 0 {
        return Err(Error::Input("no videos to synchronize".into()));
    }
    if let Some(j) = poses.iter().position(|v| v.is_empty()) {
        return Err(Error::Input(format!("video {j} has no frames")));
    }
    let raw = pairwise_affinities(poses, config.procrustes_scale, config.affinity_map)?;
    let counts = raw.frame_counts();
    let reference = match reference {
        Some(r) if r < m => r,
        Some(r) => return Err(Error::Input(format!("reference video {r} out of range"))),
        None => choose_reference(&raw),
    };
    let denoised = if config.denoise && m > 1 {
        Some(consistent_denoise(&raw, &config.denoise_options)?)
    } else {
        None
    };
    let decode = denoised.as_ref().map_or_else(|| raw.clone(), |d| d.to_grid());
    let mut paths = vec![None; m];
    let mut blocks = vec![None; m];
    for j in (0..m).filter(|&j| j != reference) {
        paths[j] = Some(dtw_align(&decode.blocks[reference][j])?);
        blocks[j] = Some(raw.blocks[reference][j].clone());
    }
    let timeline = build_common_timeline(&paths, &blocks, reference, &counts)?;
    Ok(SyncResult { raw, denoised, paths, timeline })
}
