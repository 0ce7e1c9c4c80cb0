//! Synthetic multi-video scenes with known motion, cameras and timing.
//!
//! A base motion of sinusoidal joint-angle trajectories is mixed with
//! `s_true - 1` perturbation trajectories per video, so the stacked poses of
//! any base time have rank at most `s_true`. Cameras sit on a ring around the
//! actor; each video is optionally resampled in time by [`desynchronize`].

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::body::{exp_so3, log_so3, transform_body, PoseVector, RootTranslation, ShapeVector, SkeletonFile, SkeletonSpec};
use crate::detections::{DetectionSet, FrameKeypoints, Intrinsics, VideoDetections};
use crate::error::{Error, Result};
use crate::geometry::{project, CameraModel};
use crate::linalg::numerical_rank;
use crate::solver::FrameParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DesyncConfig {
    pub n_s1: usize,
    pub n_s2: usize,
}

impl Default for DesyncConfig {
    fn default() -> Self {
        Self { n_s1: 30, n_s2: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub videos: usize,
    pub base_frames: usize,
    /// Custom skeleton; the default 24-joint tree when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skeleton: Option<SkeletonFile>,
    /// Amplitude of the base joint-angle sinusoids, radians.
    pub motion_amplitude: f64,
    /// Rank bound of the stacked per-frame poses.
    pub s_true: usize,
    /// Amplitude of each per-video pose perturbation, degrees.
    pub perturbation_deg: f64,
    /// Amplitude of each per-video root-trajectory perturbation, meters.
    pub trajectory_perturbation_m: f64,
    pub camera_radius: f64,
    /// Camera height along the world y axis (y points down).
    pub camera_height: f64,
    /// Cameras spread over `[-camera_spread_deg, camera_spread_deg]` around the actor.
    pub camera_spread_deg: f64,
    pub focal: f64,
    pub image_size: [f64; 2],
    /// Detection noise standard deviation, pixels.
    pub noise_px: f64,
    /// Probability that a keypoint's confidence drops to zero.
    pub occlusion_rate: f64,
    /// Temporal resampling; every video shows every base frame when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub desync: Option<DesyncConfig>,
    /// Rotation applied to every joint of the initial pose estimates, degrees.
    pub init_perturbation_deg: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            videos: 4,
            base_frames: 150,
            skeleton: None,
            motion_amplitude: 0.35,
            s_true: 1,
            perturbation_deg: 0.0,
            trajectory_perturbation_m: 0.0,
            camera_radius: 4.0,
            camera_height: -0.3,
            camera_spread_deg: 60.0,
            focal: 1000.0,
            image_size: [1000.0, 1000.0],
            noise_px: 0.0,
            occlusion_rate: 0.0,
            desync: Some(DesyncConfig::default()),
            init_perturbation_deg: 0.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.videos == 0 {
            return Err(Error::Config("scene needs at least one video".into()));
        }
        if self.s_true == 0 {
            return Err(Error::Config("s_true must be at least 1".into()));
        }
        if self.base_frames < 2 {
            return Err(Error::Config("scene needs at least two base frames".into()));
        }
        for (name, v) in [
            ("noise_px", self.noise_px),
            ("perturbation_deg", self.perturbation_deg),
            ("trajectory_perturbation_m", self.trajectory_perturbation_m),
            ("init_perturbation_deg", self.init_perturbation_deg),
            ("motion_amplitude", self.motion_amplitude),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return Err(Error::Config(format!("occlusion_rate {} outside [0, 1]", self.occlusion_rate)));
        }
        if !(self.focal > 0.0) || !(self.camera_radius > 0.0) {
            return Err(Error::Config("focal and camera_radius must be positive".into()));
        }
        if let Some(d) = &self.desync {
            check_desync(self.base_frames, d.n_s1, d.n_s2).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn skeleton(&self) -> Result<SkeletonSpec> {
        match &self.skeleton {
            Some(file) => SkeletonSpec::try_from(file.clone()),
            None => Ok(SkeletonSpec::default_smpl24()),
        }
    }
}

/// Everything the generator knows about a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// `base_motion[j][t]`: world-frame body of video `j` at base time `t`.
    pub base_motion: Vec<Vec<FrameParams>>,
    pub cameras: Vec<CameraModel>,
    /// `frame_times[j][f]`: base time shown in frame `f` of video `j`.
    pub frame_times: Vec<Vec<usize>>,
}

impl GroundTruth {
    pub fn video_count(&self) -> usize {
        self.frame_times.len()
    }

    /// World-frame body shown in frame `f` of video `j`.
    pub fn frame_params(&self, video: usize, frame: usize) -> &FrameParams {
        &self.base_motion[video][self.frame_times[video][frame]]
    }

    /// `M x 3J` matrix of every video's pose at one base time.
    pub fn stacked_base_pose(&self, t: usize) -> DMatrix<f64> {
        let m = self.video_count();
        let d = self.base_motion[0][t].theta.0.len();
        DMatrix::from_fn(m, d, |j, c| self.base_motion[j][t].theta.0[c])
    }
}

/// A generated dataset together with its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub skeleton: SkeletonSpec,
    pub detections: DetectionSet,
    /// Per video, per frame body estimates in that video's camera frame.
    pub initial_poses: Vec<Vec<FrameParams>>,
    pub truth: GroundTruth,
}

impl SyntheticScene {
    /// The scene restricted to `videos`, in the given order.
    pub fn subset(&self, videos: &[usize]) -> Result<Self> {
        let m = self.detections.video_count();
        if videos.is_empty() || videos.iter().any(|&j| j >= m) {
            return Err(Error::Input(format!("video subset {videos:?} of a {m}-video scene")));
        }
        Ok(Self {
            skeleton: self.skeleton.clone(),
            detections: DetectionSet { videos: videos.iter().map(|&j| self.detections.videos[j].clone()).collect() },
            initial_poses: videos.iter().map(|&j| self.initial_poses[j].clone()).collect(),
            truth: GroundTruth {
                base_motion: videos.iter().map(|&j| self.truth.base_motion[j].clone()).collect(),
                cameras: videos.iter().map(|&j| self.truth.cameras[j].clone()).collect(),
                frame_times: videos.iter().map(|&j| self.truth.frame_times[j].clone()).collect(),
            },
        })
    }
}

fn check_desync(len: usize, n_s1: usize, n_s2: usize) -> Result<()> {
    if n_s1 < 2 {
        return Err(Error::Input(format!("N_s1 = {n_s1} must be at least 2")));
    }
    if n_s2 > n_s1 - 1 {
        return Err(Error::Input(format!("N_s2 = {n_s2} exceeds the {} segments", n_s1 - 1)));
    }
    if len < n_s1 {
        return Err(Error::Input(format!("sequence of {len} frames is shorter than N_s1 = {n_s1}")));
    }
    Ok(())
}

/// Resamples `0..len` in time.
///
/// `n_s1` equally spaced anchors split the sequence into `n_s1 - 1` segments.
/// `n_s2` of them are drawn without replacement and from each a uniform
/// number (1 up to the segment's interior size) of interior frames is kept.
/// The result is the sorted union of anchors and kept frames.
pub fn desynchronize(len: usize, n_s1: usize, n_s2: usize, seed: u64) -> Result<Vec<usize>> {
    check_desync(len, n_s1, n_s2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchors: Vec<usize> = (0..n_s1)
        .map(|k| ((k * (len - 1)) as f64 / (n_s1 - 1) as f64).round() as usize)
        .collect();
    let mut out = anchors.clone();
    let segments = sample(&mut rng, n_s1 - 1, n_s2).into_vec();
    let mut segments = segments;
    segments.sort_unstable();
    for s in segments {
        let (lo, hi) = (anchors[s], anchors[s + 1]);
        let interior = hi - lo - 1;
        if interior == 0 {
            continue;
        }
        let count = rng.random_range(1..=interior);
        out.extend(sample(&mut rng, interior, count).into_iter().map(|k| lo + 1 + k));
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Sum of sinusoids with random frequencies and phases.
struct Wave {
    bias: f64,
    terms: Vec<(f64, f64, f64)>,
}

impl Wave {
    fn random(rng: &mut ChaCha8Rng, bias: f64, amplitude: f64, harmonics: usize) -> Self {
        let terms = (0..harmonics)
            .map(|_| {
                let a = amplitude * rng.random_range(0.5..1.0);
                let f = rng.random_range(0.5..2.5);
                let phase = rng.random_range(0.0..TAU);
                (a, f, phase)
            })
            .collect();
        Self { bias, terms }
    }

    fn at(&self, u: f64) -> f64 {
        self.bias + self.terms.iter().map(|(a, f, p)| a * (TAU * f * u + p).sin()).sum::<f64>()
    }
}

fn video_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03)) ^ 0x5851_F42D_4C95_7F2D
}

/// Camera on a horizontal ring looking at the origin.
fn ring_camera(angle: f64, radius: f64, height: f64, focal: f64, pp: Vector2<f64>) -> CameraModel {
    let center = Vector3::new(radius * angle.sin(), height, -radius * angle.cos());
    let forward = (-center).normalize();
    let down = Vector3::new(0.0, 1.0, 0.0);
    let x = down.cross(&forward).normalize();
    let y = forward.cross(&x);
    let rotation = nalgebra::Matrix3::from_rows(&[x.transpose(), y.transpose(), forward.transpose()]);
    CameraModel { rotation, translation: -(rotation * center), focal, principal_point: pp }
}

fn perturb_joints(theta: &PoseVector, angle: f64, rng: &mut ChaCha8Rng) -> PoseVector {
    let mut out = theta.clone();
    for k in 0..theta.0.len() / 3 {
        let axis: [f64; 3] = UnitSphere.sample(rng);
        let delta = exp_so3(&(Vector3::from(axis) * angle));
        out.set_joint(k, &log_so3(&(exp_so3(&theta.joint(k)) * delta)));
    }
    out
}

/// Generates a scene; deterministic per `config.seed`.
pub fn generate_scene(config: &SceneConfig) -> Result<SyntheticScene> {
    config.validate()?;
    let skeleton = config.skeleton()?;
    let nj = skeleton.joint_count();
    let m = config.videos;
    let b = config.base_frames;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let base_waves: Vec<Wave> = (0..3 * nj)
        .map(|c| {
            let root = c < 3;
            let amp = config.motion_amplitude * if root { 0.4 } else { 1.0 };
            let bias = if root { 0.0 } else { rng.random_range(-0.3..0.3) };
            Wave::random(&mut rng, bias, amp, 2)
        })
        .collect();
    let root_waves: Vec<Wave> = (0..3)
        .map(|d| Wave::random(&mut rng, 0.0, if d == 1 { 0.03 } else { 0.25 }, 1))
        .collect();
    let extra = config.s_true - 1;
    let pert_amp = config.perturbation_deg.to_radians();
    let pose_modes: Vec<Vec<Wave>> = (0..extra)
        .map(|_| (0..3 * nj).map(|_| Wave::random(&mut rng, 0.0, pert_amp, 1)).collect())
        .collect();
    let traj_modes: Vec<Vec<Wave>> = (0..extra)
        .map(|_| (0..3).map(|_| Wave::random(&mut rng, 0.0, config.trajectory_perturbation_m, 1)).collect())
        .collect();
    let weights: Vec<Vec<f64>> = (0..m).map(|_| (0..extra).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let beta = ShapeVector(DVector::from_fn(nj, |_, _| rng.random_range(-0.1..0.1)));

    let base_motion: Vec<Vec<FrameParams>> = (0..m)
        .map(|j| {
            (0..b)
                .map(|t| {
                    let u = t as f64 / (b - 1) as f64;
                    let theta = DVector::from_fn(3 * nj, |c, _| {
                        base_waves[c].at(u)
                            + (0..extra).map(|k| weights[j][k] * pose_modes[k][c].at(u)).sum::<f64>()
                    });
                    let gamma = Vector3::from_fn(|d, _| {
                        root_waves[d].at(u) + (0..extra).map(|k| weights[j][k] * traj_modes[k][d].at(u)).sum::<f64>()
                    });
                    FrameParams { theta: PoseVector(theta), beta: beta.clone(), gamma: RootTranslation(gamma) }
                })
                .collect()
        })
        .collect();

    let spread = config.camera_spread_deg.to_radians();
    let pp = Vector2::new(0.5 * config.image_size[0], 0.5 * config.image_size[1]);
    let cameras: Vec<CameraModel> = (0..m)
        .map(|j| {
            let nominal = if m == 1 { 0.0 } else { -spread + 2.0 * spread * j as f64 / (m - 1) as f64 };
            let jitter = rng.random_range(-5.0f64..5.0).to_radians();
            ring_camera(nominal + jitter, config.camera_radius, config.camera_height, config.focal, pp)
        })
        .collect();

    let frame_times: Vec<Vec<usize>> = (0..m)
        .map(|j| match &config.desync {
            Some(d) => desynchronize(b, d.n_s1, d.n_s2, video_seed(config.seed, j as u64 + 1)),
            None => Ok((0..b).collect()),
        })
        .collect::<Result<_>>()?;

    let noise = Normal::new(0.0, config.noise_px.max(f64::MIN_POSITIVE)).expect("valid std");
    let init_angle = config.init_perturbation_deg.to_radians();
    let mut videos = Vec::with_capacity(m);
    let mut initial_poses = Vec::with_capacity(m);
    for j in 0..m {
        let mut vrng = ChaCha8Rng::seed_from_u64(video_seed(config.seed, 1000 + j as u64));
        let cam = &cameras[j];
        let mut frames = Vec::with_capacity(frame_times[j].len());
        let mut inits = Vec::with_capacity(frame_times[j].len());
        for &t in &frame_times[j] {
            let p = &base_motion[j][t];
            let joints = p.joints(&skeleton)?;
            let mut uv = project(cam, &joints).map_err(|e| Error::Config(format!("camera {j} cannot see the actor: {e}")))?;
            if config.noise_px > 0.0 {
                uv.apply(|v| *v += noise.sample(&mut vrng));
            }
            let confidence = DVector::from_fn(nj, |_, _| {
                if config.occlusion_rate > 0.0 && vrng.random_bool(config.occlusion_rate) {
                    0.0
                } else {
                    1.0
                }
            });
            frames.push(FrameKeypoints::new(uv, confidence)?);

            let mut init = p.clone();
            transform_body(&skeleton, &mut init.theta, &init.beta, &mut init.gamma, &cam.rotation, &cam.translation);
            if init_angle > 0.0 {
                init.theta = perturb_joints(&init.theta, init_angle, &mut vrng);
            }
            inits.push(init);
        }
        videos.push(VideoDetections {
            frames,
            intrinsics: Intrinsics {
                focal: Some(config.focal),
                principal_point: Some([pp.x, pp.y]),
                image_size: Some(config.image_size),
            },
        });
        initial_poses.push(inits);
    }

    let truth = GroundTruth { base_motion, cameras, frame_times };
    for t in 0..b {
        let rank = numerical_rank(&truth.stacked_base_pose(t), 1e-9);
        if rank > config.s_true {
            return Err(Error::Degenerate(format!("base time {t}: stacked pose rank {rank} exceeds s_true")));
        }
    }
    Ok(SyntheticScene { skeleton, detections: DetectionSet { videos }, initial_poses, truth })
}
