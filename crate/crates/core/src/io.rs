//! On-disk formats.
//!
//! A dataset directory holds `scene.json` (skeleton and generator config
//! echo), one `video_<j>.json` per video, optionally `init_poses.json` with
//! per-frame body estimates in each video's camera frame, and optionally
//! `truth.json`. Rotations are written as 9 floats, row-major. Every write
//! goes to a temporary file in the target directory and is renamed into
//! place, so a failed command never leaves a partial file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::body::{PoseVector, RootTranslation, ShapeVector, SkeletonFile, SkeletonSpec};
use crate::detections::{DetectionSet, FrameKeypoints, Intrinsics, VideoDetections};
use crate::error::{Error, Result};
use crate::geometry::CameraModel;
use crate::solver::{AuxiliaryVars, FrameParams, MotionParams, MotionSolution};
use crate::sync::{AffinityGrid, CommonTimeline};
use crate::synth::{GroundTruth, SceneConfig, SyntheticScene};

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_error(dir, e))?;
    tmp.write_all(bytes).map_err(|e| io_error(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_error(path, e))?;
    tmp.persist(path).map_err(|e| io_error(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Schema {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Reads and parses a JSON file; parse errors carry line, column and field.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema { path: path.display().to_string(), message: e.to_string() })
}

fn schema(path: &Path, message: impl Into<String>) -> Error {
    Error::Schema { path: path.display().to_string(), message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    /// Row-major world-to-camera rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub focal: f64,
    pub principal_point: [f64; 2],
}

impl From<&CameraModel> for CameraRecord {
    fn from(c: &CameraModel) -> Self {
        let r = &c.rotation;
        Self {
            rotation: [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            translation: [c.translation.x, c.translation.y, c.translation.z],
            focal: c.focal,
            principal_point: [c.principal_point.x, c.principal_point.y],
        }
    }
}

impl CameraRecord {
    pub fn to_camera(&self) -> Result<CameraModel> {
        let camera = CameraModel {
            rotation: Matrix3::from_row_slice(&self.rotation),
            translation: Vector3::from(self.translation),
            focal: self.focal,
            principal_point: Vector2::from(self.principal_point),
        };
        camera.validate()?;
        Ok(camera)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyRecord {
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: [f64; 3],
}

impl From<&FrameParams> for BodyRecord {
    fn from(p: &FrameParams) -> Self {
        Self {
            theta: p.theta.0.as_slice().to_vec(),
            beta: p.beta.0.as_slice().to_vec(),
            gamma: [p.gamma.0.x, p.gamma.0.y, p.gamma.0.z],
        }
    }
}

impl BodyRecord {
    fn to_params(&self, joints: usize) -> std::result::Result<FrameParams, String> {
        if self.theta.len() != 3 * joints || self.beta.len() != joints {
            return Err(format!(
                "theta has {} and beta {} entries, skeleton needs {} and {joints}",
                self.theta.len(),
                self.beta.len(),
                3 * joints
            ));
        }
        if self.theta.iter().chain(&self.beta).chain(&self.gamma).any(|v| !v.is_finite()) {
            return Err("non-finite body parameter".into());
        }
        Ok(FrameParams {
            theta: PoseVector(DVector::from_vec(self.theta.clone())),
            beta: ShapeVector(DVector::from_vec(self.beta.clone())),
            gamma: RootTranslation(Vector3::from(self.gamma)),
        })
    }
}

fn bodies_from_records(path: &Path, records: &[Vec<BodyRecord>], joints: usize) -> Result<Vec<Vec<FrameParams>>> {
    records
        .iter()
        .enumerate()
        .map(|(j, video)| {
            video
                .iter()
                .enumerate()
                .map(|(f, r)| r.to_params(joints).map_err(|m| schema(path, format!("video {j}, frame {f}: {m}"))))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneFile {
    pub skeleton: SkeletonFile,
    pub videos: usize,
    /// Generator settings when the dataset is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<SceneConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoFile {
    #[serde(default)]
    pub intrinsics: Intrinsics,
    /// Per frame, per joint `[x, y, confidence]`.
    pub frames: Vec<Vec<[f64; 3]>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitPosesFile {
    /// Per video, per own frame, in that video's camera frame.
    pub videos: Vec<Vec<BodyRecord>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthFile {
    /// Per video, per base time, in world coordinates.
    pub base_motion: Vec<Vec<BodyRecord>>,
    pub cameras: Vec<CameraRecord>,
    /// Base time shown in every frame of every video.
    pub frame_times: Vec<Vec<usize>>,
}

/// A dataset directory loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub skeleton: SkeletonSpec,
    pub detections: DetectionSet,
    pub initial_poses: Option<Vec<Vec<FrameParams>>>,
    pub truth: Option<GroundTruth>,
    pub config: Option<SceneConfig>,
}

pub fn video_path(dir: &Path, j: usize) -> PathBuf {
    dir.join(format!("video_{j}.json"))
}

pub fn write_dataset(dir: &Path, scene: &SyntheticScene, config: Option<&SceneConfig>) -> Result<()> {
    write_json(
        &dir.join("scene.json"),
        &SceneFile { skeleton: scene.skeleton.to_file(), videos: scene.detections.video_count(), config: config.cloned() },
    )?;
    for (j, video) in scene.detections.videos.iter().enumerate() {
        let file = VideoFile { intrinsics: video.intrinsics, frames: video.frames.iter().map(|f| f.to_triples()).collect() };
        write_json(&video_path(dir, j), &file)?;
    }
    let init = InitPosesFile {
        videos: scene.initial_poses.iter().map(|v| v.iter().map(BodyRecord::from).collect()).collect(),
    };
    write_json(&dir.join("init_poses.json"), &init)?;
    write_json(&dir.join("truth.json"), &truth_file(&scene.truth))
}

pub fn truth_file(truth: &GroundTruth) -> TruthFile {
    TruthFile {
        base_motion: truth.base_motion.iter().map(|v| v.iter().map(BodyRecord::from).collect()).collect(),
        cameras: truth.cameras.iter().map(CameraRecord::from).collect(),
        frame_times: truth.frame_times.clone(),
    }
}

pub fn read_truth(path: &Path, joints: usize) -> Result<GroundTruth> {
    let file: TruthFile = read_json(path)?;
    let m = file.frame_times.len();
    if file.base_motion.len() != m || file.cameras.len() != m {
        return Err(schema(path, "base_motion, cameras and frame_times must cover the same videos"));
    }
    for (j, times) in file.frame_times.iter().enumerate() {
        if let Some(&t) = times.iter().find(|&&t| t >= file.base_motion[j].len()) {
            return Err(schema(path, format!("video {j}: frame time {t} is past the base motion")));
        }
    }
    let cameras = file
        .cameras
        .iter()
        .enumerate()
        .map(|(j, c)| c.to_camera().map_err(|e| schema(path, format!("camera {j}: {e}"))))
        .collect::<Result<_>>()?;
    Ok(GroundTruth {
        base_motion: bodies_from_records(path, &file.base_motion, joints)?,
        cameras,
        frame_times: file.frame_times,
    })
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let scene_path = dir.join("scene.json");
    let scene: SceneFile = read_json(&scene_path)?;
    let skeleton = SkeletonSpec::try_from(scene.skeleton).map_err(|e| schema(&scene_path, e.to_string()))?;
    let nj = skeleton.joint_count();
    if scene.videos == 0 {
        return Err(schema(&scene_path, "dataset needs at least one video"));
    }
    let mut videos = Vec::with_capacity(scene.videos);
    for j in 0..scene.videos {
        let path = video_path(dir, j);
        let file: VideoFile = read_json(&path)?;
        if file.frames.is_empty() {
            return Err(schema(&path, "field `frames` is empty"));
        }
        let frames = file
            .frames
            .iter()
            .enumerate()
            .map(|(f, triples)| {
                if triples.len() != nj {
                    return Err(schema(&path, format!("frames[{f}] has {} keypoints, skeleton has {nj}", triples.len())));
                }
                FrameKeypoints::from_triples(triples).map_err(|e| schema(&path, format!("frames[{f}]: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        videos.push(VideoDetections { frames, intrinsics: file.intrinsics });
    }
    let detections = DetectionSet { videos };
    detections.validate(nj)?;

    let init_path = dir.join("init_poses.json");
    let initial_poses = if init_path.exists() {
        let file: InitPosesFile = read_json(&init_path)?;
        if file.videos.len() != scene.videos {
            return Err(schema(&init_path, format!("{} videos, dataset has {}", file.videos.len(), scene.videos)));
        }
        for (j, v) in file.videos.iter().enumerate() {
            if v.len() != detections.videos[j].len() {
                return Err(schema(
                    &init_path,
                    format!("video {j}: {} poses for {} frames", v.len(), detections.videos[j].len()),
                ));
            }
        }
        Some(bodies_from_records(&init_path, &file.videos, nj)?)
    } else {
        None
    };

    let truth_path = dir.join("truth.json");
    let truth = if truth_path.exists() {
        let truth = read_truth(&truth_path, nj)?;
        if truth.video_count() != scene.videos
            || truth.frame_times.iter().zip(&detections.videos).any(|(t, v)| t.len() != v.len())
        {
            return Err(schema(&truth_path, "frame_times do not match the videos"));
        }
        Some(truth)
    } else {
        None
    };
    Ok(Dataset { skeleton, detections, initial_poses, truth, config: scene.config })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoSolutionRecord {
    pub camera: CameraRecord,
    pub beta: Vec<f64>,
    /// Per timeline frame.
    pub theta: Vec<Vec<f64>>,
    pub gamma: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionFile {
    pub timeline: CommonTimeline,
    pub videos: Vec<VideoSolutionRecord>,
    pub objective_trace: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl SolutionFile {
    pub fn new(solution: &MotionSolution, timeline: &CommonTimeline) -> Self {
        let p = &solution.params;
        let videos = (0..p.video_count())
            .map(|j| VideoSolutionRecord {
                camera: CameraRecord::from(&solution.cameras[j]),
                beta: p.beta[j].0.as_slice().to_vec(),
                theta: p.theta[j].iter().map(|t| t.0.as_slice().to_vec()).collect(),
                gamma: p.gamma[j].iter().map(|g| [g.0.x, g.0.y, g.0.z]).collect(),
            })
            .collect();
        Self {
            timeline: timeline.clone(),
            videos,
            objective_trace: solution.objective_trace.clone(),
            warning: solution.warning.clone(),
        }
    }

    /// Rebuilds the solution; auxiliary variables are re-projected at `rank`.
    pub fn to_solution(&self, path: &Path, joints: usize, rank: usize) -> Result<MotionSolution> {
        let n = self.timeline.len();
        if self.videos.len() != self.timeline.video_count() {
            return Err(schema(path, "videos and timeline disagree on the video count"));
        }
        let mut theta = Vec::new();
        let mut beta = Vec::new();
        let mut gamma = Vec::new();
        let mut cameras = Vec::new();
        for (j, v) in self.videos.iter().enumerate() {
            if v.theta.len() != n || v.gamma.len() != n {
                return Err(schema(path, format!("video {j} does not span the {n} timeline frames")));
            }
            if v.beta.len() != joints || v.theta.iter().any(|t| t.len() != 3 * joints) {
                return Err(schema(path, format!("video {j} does not match the {joints}-joint skeleton")));
            }
            theta.push(v.theta.iter().map(|t| PoseVector(DVector::from_vec(t.clone()))).collect());
            gamma.push(v.gamma.iter().map(|g| RootTranslation(Vector3::from(*g))).collect());
            beta.push(ShapeVector(DVector::from_vec(v.beta.clone())));
            cameras.push(v.camera.to_camera().map_err(|e| schema(path, format!("video {j} camera: {e}")))?);
        }
        let params = MotionParams { theta, beta, gamma };
        let aux = AuxiliaryVars::project_from(&params, rank, rank);
        Ok(MotionSolution {
            params,
            cameras,
            aux,
            objective_trace: self.objective_trace.clone(),
            warning: self.warning.clone(),
        })
    }
}

fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in m.row_iter() {
        writer
            .write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| schema(path, e.to_string()))?;
    }
    let bytes = writer.into_inner().map_err(|e| schema(path, e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Writes every off-diagonal block `j1 < j2` as `<prefix>_<j1>_<j2>.csv`.
pub fn dump_affinity(dir: &Path, prefix: &str, grid: &AffinityGrid) -> Result<()> {
    let m = grid.video_count();
    for j1 in 0..m {
        for j2 in (j1 + 1)..m {
            write_matrix_csv(&dir.join(format!("{prefix}_{j1}_{j2}.csv")), &grid.blocks[j1][j2])?;
        }
    }
    Ok(())
}
