use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::dtw::WarpingPath;
use crate::error::{Error, Result};

/// Frame index maps from the reference video's frames into every video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommonTimeline {
    pub reference: usize,
    /// `maps[j][i]` is the frame of video `j` shown at reference frame `i`.
    pub maps: Vec<Vec<usize>>,
}

impl CommonTimeline {
    pub fn identity(reference: usize, frame_counts: &[usize]) -> Self {
        let n = frame_counts[reference];
        Self {
            reference,
            maps: frame_counts.iter().map(|_| (0..n).collect()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.maps[self.reference].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn video_count(&self) -> usize {
        self.maps.len()
    }

    pub fn validate(&self, frame_counts: &[usize]) -> Result<()> {
        if self.maps.len() != frame_counts.len() {
            return Err(Error::Input(format!(
                "timeline has {} videos, dataset has {}",
                self.maps.len(),
                frame_counts.len()
            )));
        }
        if self.reference >= self.maps.len() {
            return Err(Error::Input(format!("reference video {} out of range", self.reference)));
        }
        let n = self.len();
        for (j, map) in self.maps.iter().enumerate() {
            if map.len() != n {
                return Err(Error::Input(format!("timeline map {j} has {} entries, expected {n}", map.len())));
            }
            if map.iter().any(|&f| f >= frame_counts[j]) {
                return Err(Error::Input(format!("timeline map {j} points past the end of the video")));
            }
            if map.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::Input(format!("timeline map {j} is not monotone")));
            }
        }
        Ok(())
    }
}

/// Resolves each reference frame to one frame per video.
///
/// `paths[j]` aligns the reference (first index) with video `j` and
/// `blocks[j]` holds the affinities the path was decoded from. When a
/// reference frame matches several frames the highest-affinity one wins,
/// lowest index on ties. Entries at the reference index are ignored.
pub fn build_common_timeline(
    paths: &[Option<WarpingPath>],
    blocks: &[Option<DMatrix<f64>>],
    reference: usize,
    frame_counts: &[usize],
) -> Result<CommonTimeline> {
    let m = frame_counts.len();
    if paths.len() != m || blocks.len() != m || reference >= m {
        return Err(Error::Input("timeline inputs do not match the video count".into()));
    }
    let n = frame_counts[reference];
    let mut maps = Vec::with_capacity(m);
    for j in 0..m {
        if j == reference {
            maps.push((0..n).collect());
            continue;
        }
        let (Some(path), Some(block)) = (&paths[j], &blocks[j]) else {
            return Err(Error::Input(format!("missing warping path for video {j}")));
        };
        if block.shape() != (n, frame_counts[j]) || !path.is_valid(n, frame_counts[j]) {
            return Err(Error::Input(format!(
                "warping path for video {j} does not span {n} x {} frames",
                frame_counts[j]
            )));
        }
        let mut map: Vec<Option<usize>> = vec![None; n];
        for &(i, f) in &path.pairs {
            let better = match map[i] {
                None => true,
                Some(cur) => block[(i, f)] > block[(i, cur)],
            };
            if better {
                map[i] = Some(f);
            }
        }
        maps.push(map.into_iter().map(|f| f.expect("path covers every row")).collect());
    }
    Ok(CommonTimeline { reference, maps })
}
