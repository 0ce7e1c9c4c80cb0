//! 2D keypoint detections with per-joint confidences.

use nalgebra::{DVector, Matrix2xX, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, DEFAULT_UNKNOWN_FOCAL};

/// Keypoints of one frame: 2 x J pixel coordinates and J confidences in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameKeypoints {
    pub points: Matrix2xX<f64>,
    pub confidence: DVector<f64>,
}

impl FrameKeypoints {
    pub fn new(points: Matrix2xX<f64>, confidence: DVector<f64>) -> Result<Self> {
        let kp = Self { points, confidence };
        kp.validate()?;
        Ok(kp)
    }

    pub fn joint_count(&self) -> usize {
        self.points.ncols()
    }

    /// Builds a frame from `[x, y, confidence]` triples.
    pub fn from_triples(triples: &[[f64; 3]]) -> Result<Self> {
        let points = Matrix2xX::from_fn(triples.len(), |r, c| triples[c][r]);
        let confidence = DVector::from_iterator(triples.len(), triples.iter().map(|t| t[2]));
        Self::new(points, confidence)
    }

    pub fn to_triples(&self) -> Vec<[f64; 3]> {
        (0..self.joint_count())
            .map(|k| [self.points[(0, k)], self.points[(1, k)], self.confidence[k]])
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.confidence.len() != self.points.ncols() {
            return Err(Error::Dimension(format!(
                "{} keypoints but {} confidences",
                self.points.ncols(),
                self.confidence.len()
            )));
        }
        if let Some(k) = self.points.column_iter().position(|c| !c.iter().all(|v| v.is_finite())) {
            return Err(Error::Input(format!("keypoint {k} has non-finite coordinates")));
        }
        if let Some(k) = self.confidence.iter().position(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Input(format!(
                "keypoint {k} confidence {} outside [0, 1]",
                self.confidence[k]
            )));
        }
        Ok(())
    }
}

/// Camera intrinsics known for a video, if any.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Intrinsics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focal: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub principal_point: Option<[f64; 2]>,
    /// Width and height in pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_size: Option<[f64; 2]>,
}

impl Intrinsics {
    /// Identity-pose camera with these intrinsics. Unknown focal lengths fall
    /// back to [`DEFAULT_UNKNOWN_FOCAL`], unknown principal points to the image
    /// center (or the origin without an image size).
    pub fn identity_camera(&self) -> CameraModel {
        let pp = match (self.principal_point, self.image_size) {
            (Some(p), _) => Vector2::new(p[0], p[1]),
            (None, Some(s)) => Vector2::new(0.5 * s[0], 0.5 * s[1]),
            (None, None) => Vector2::zeros(),
        };
        CameraModel::identity(self.focal.unwrap_or(DEFAULT_UNKNOWN_FOCAL), pp)
    }
}

/// All frames of one video, in the video's own frame order.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoDetections {
    pub frames: Vec<FrameKeypoints>,
    pub intrinsics: Intrinsics,
}

impl VideoDetections {
    pub fn new(frames: Vec<FrameKeypoints>) -> Self {
        Self { frames, intrinsics: Intrinsics::default() }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Per-video detections.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub videos: Vec<VideoDetections>,
}

impl DetectionSet {
    pub fn video_count(&self) -> usize {
        self.videos.len()
    }

    pub fn frame_counts(&self) -> Vec<usize> {
        self.videos.iter().map(|v| v.len()).collect()
    }

    pub fn validate(&self, joint_count: usize) -> Result<()> {
        for (j, v) in self.videos.iter().enumerate() {
            if v.is_empty() {
                return Err(Error::Input(format!("video {j} has no frames")));
            }
            if let Some(f) = v.intrinsics.focal {
                if !(f > 0.0) || !f.is_finite() {
                    return Err(Error::Input(format!("video {j}: focal length {f} must be positive")));
                }
            }
            for (i, f) in v.frames.iter().enumerate() {
                f.validate().map_err(|e| Error::Input(format!("video {j}, frame {i}: {e}")))?;
                if f.joint_count() != joint_count {
                    return Err(Error::Dimension(format!(
                        "video {j}, frame {i}: {} keypoints, skeleton has {joint_count}",
                        f.joint_count()
                    )));
                }
            }
        }
        Ok(())
    }
}
