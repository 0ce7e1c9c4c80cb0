use nalgebra::{DMatrix, Matrix3xX};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{procrustes_align, AlignScale};

/// Map from Procrustes pose distance to an affinity in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffinityMap {
    /// `1 / (1 + d / sigma)`.
    #[default]
    Reciprocal,
    /// `exp(-d^2 / (2 sigma^2))`.
    Gaussian,
}

impl AffinityMap {
    pub fn apply(self, d: f64, sigma: f64) -> f64 {
        if d == 0.0 {
            return 1.0;
        }
        if sigma <= 0.0 {
            return 0.0;
        }
        match self {
            AffinityMap::Reciprocal => 1.0 / (1.0 + d / sigma),
            AffinityMap::Gaussian => (-d * d / (2.0 * sigma * sigma)).exp(),
        }
    }
}

/// Frame-to-frame affinities between video `pair.0` (rows) and `pair.1` (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityBlock {
    pub values: DMatrix<f64>,
    pub pair: (usize, usize),
}

impl AffinityBlock {
    pub fn transposed(&self) -> Self {
        Self { values: self.values.transpose(), pair: (self.pair.1, self.pair.0) }
    }
}

/// Residual RMSE of Procrustes-aligning `pose_a` onto `pose_b`.
pub fn pose_distance(
    pose_a: &Matrix3xX<f64>,
    pose_b: &Matrix3xX<f64>,
    mode: AlignScale,
) -> Result<f64> {
    Ok(procrustes_align(pose_a, pose_b, mode)?.residual_rmse)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Affinity between every frame of `poses_a` and every frame of `poses_b`.
///
/// The distance scale is the median over the block. Pairs whose distance is
/// undefined (a degenerate pose) get affinity 0; the call fails only when
/// every pair is undefined.
pub fn affinity_matrix(
    poses_a: &[Matrix3xX<f64>],
    poses_b: &[Matrix3xX<f64>],
    mode: AlignScale,
    map: AffinityMap,
) -> Result<AffinityBlock> {
    if poses_a.is_empty() || poses_b.is_empty() {
        return Err(Error::Input("affinity needs nonempty pose lists".into()));
    }
    let rows: Vec<Vec<Option<f64>>> = poses_a
        .par_iter()
        .map(|a| poses_b.iter().map(|b| pose_distance(a, b, mode).ok()).collect())
        .collect();
    let mut finite: Vec<f64> = rows.iter().flatten().filter_map(|d| *d).collect();
    if finite.is_empty() {
        return Err(Error::Degenerate("every pose pair is degenerate".into()));
    }
    let sigma = median(&mut finite);
    let values = DMatrix::from_fn(poses_a.len(), poses_b.len(), |p, q| {
        rows[p][q].map_or(0.0, |d| map.apply(d, sigma))
    });
    Ok(AffinityBlock { values, pair: (0, 1) })
}

/// Complete `M x M` grid of affinity blocks; diagonal blocks are identities.
#[derive(Debug, Clone)]
pub struct AffinityGrid {
    pub blocks: Vec<Vec<DMatrix<f64>>>,
}

impl AffinityGrid {
    pub fn video_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn frame_counts(&self) -> Vec<usize> {
        (0..self.video_count()).map(|j| self.blocks[j][j].nrows()).collect()
    }

    pub fn block(&self, j1: usize, j2: usize) -> AffinityBlock {
        AffinityBlock { values: self.blocks[j1][j2].clone(), pair: (j1, j2) }
    }

    /// Checks shapes and exact transpose symmetry.
    pub fn validate(&self) -> Result<()> {
        let m = self.video_count();
        if m == 0 {
            return Err(Error::Input("empty affinity grid".into()));
        }
        let counts: Vec<usize> = (0..m).map(|j| self.blocks[j].get(j).map_or(0, |b| b.nrows())).collect();
        for j1 in 0..m {
            if self.blocks[j1].len() != m {
                return Err(Error::Input(format!("row {j1} of the grid has {} blocks", self.blocks[j1].len())));
            }
            for j2 in 0..m {
                let b = &self.blocks[j1][j2];
                if b.shape() != (counts[j1], counts[j2]) {
                    return Err(Error::Input(format!(
                        "block ({j1}, {j2}) has shape {:?}, expected {:?}",
                        b.shape(),
                        (counts[j1], counts[j2])
                    )));
                }
                if *b != self.blocks[j2][j1].transpose() {
                    return Err(Error::Input(format!("block ({j1}, {j2}) is not the transpose of ({j2}, {j1})")));
                }
            }
        }
        Ok(())
    }

    /// Stacks the grid into one `N_a x N_a` matrix.
    pub fn assemble(&self) -> DMatrix<f64> {
        assemble(&self.blocks)
    }

    /// Sum of each video's off-diagonal affinity mass.
    pub fn affinity_mass(&self) -> Vec<f64> {
        let m = self.video_count();
        (0..m)
            .map(|j| (0..m).filter(|&k| k != j).map(|k| self.blocks[j][k].sum()).sum())
            .collect()
    }
}

pub(crate) fn assemble(blocks: &[Vec<DMatrix<f64>>]) -> DMatrix<f64> {
    let counts: Vec<usize> = (0..blocks.len()).map(|j| blocks[j][j].nrows()).collect();
    let offsets: Vec<usize> = counts
        .iter()
        .scan(0, |acc, &n| {
            let o = *acc;
            *acc += n;
            Some(o)
        })
        .collect();
    let total: usize = counts.iter().sum();
    let mut out = DMatrix::zeros(total, total);
    for (j1, row) in blocks.iter().enumerate() {
        for (j2, b) in row.iter().enumerate() {
            out.view_mut((offsets[j1], offsets[j2]), b.shape()).copy_from(b);
        }
    }
    out
}

/// Affinity blocks for every pair of videos from per-frame 3D poses.
///
/// Only `j1 < j2` blocks are computed; the lower triangle is their exact
/// transpose so the grid is symmetric by construction.
pub fn pairwise_affinities(
    poses: &[Vec<Matrix3xX<f64>>],
    mode: AlignScale,
    map: AffinityMap,
) -> Result<AffinityGrid> {
    let m = poses.len();
    let mut blocks: Vec<Vec<DMatrix<f64>>> = (0..m)
        .map(|_| (0..m).map(|_| DMatrix::zeros(0, 0)).collect())
        .collect();
    for j1 in 0..m {
        blocks[j1][j1] = DMatrix::identity(poses[j1].len(), poses[j1].len());
        for j2 in (j1 + 1)..m {
            let block = affinity_matrix(&poses[j1], &poses[j2], mode, map)?;
            blocks[j2][j1] = block.values.transpose();
            blocks[j1][j2] = block.values;
        }
    }
    Ok(AffinityGrid { blocks })
}
