#![allow(dead_code)]

use multicap::body::{transform_body, PoseVector};
use multicap::geometry::CameraModel;
use multicap::solver::{coupling_losses, reprojection_loss, temporal_loss, AuxiliaryVars, MotionParams, Problem};
use multicap::sync::CommonTimeline;
use multicap::synth::{generate_scene, SceneConfig, SyntheticScene};
use nalgebra::{DMatrix, DVector, Matrix3, Quaternion, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Uniformly distributed rotation (normalized Gaussian quaternion).
pub fn uniform_rotation<R: Rng>(rng: &mut R) -> Matrix3<f64> {
    let mut q = [0.0f64; 4];
    for v in &mut q {
        *v = StandardNormal.sample(rng);
    }
    UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3])).to_rotation_matrix().into_inner()
}

/// Ground-truth motion on `timeline`, expressed in the reference camera's
/// frame, with the matching cameras.
pub fn truth_solution(scene: &SyntheticScene, timeline: &CommonTimeline) -> (MotionParams, Vec<CameraModel>) {
    let r = timeline.reference;
    let (rr, tr) = (scene.truth.cameras[r].rotation, scene.truth.cameras[r].translation);
    let mut theta = Vec::new();
    let mut gamma = Vec::new();
    let mut beta = Vec::new();
    let mut cameras = Vec::new();
    for j in 0..timeline.video_count() {
        let mut th = Vec::new();
        let mut ga = Vec::new();
        for &f in &timeline.maps[j] {
            let mut p = scene.truth.frame_params(j, f).clone();
            transform_body(&scene.skeleton, &mut p.theta, &p.beta, &mut p.gamma, &rr, &tr);
            th.push(p.theta);
            ga.push(p.gamma);
        }
        theta.push(th);
        gamma.push(ga);
        beta.push(scene.truth.frame_params(j, 0).beta.clone());
        let truth_cam = &scene.truth.cameras[j];
        let rel = truth_cam.rotation * rr.transpose();
        cameras.push(CameraModel {
            rotation: rel,
            translation: truth_cam.translation - rel * tr,
            ..truth_cam.clone()
        });
    }
    (MotionParams { theta, beta, gamma }, cameras)
}

/// Best max-sum warping score by enumerating every monotone path.
pub fn brute_force_dtw(block: &DMatrix<f64>) -> f64 {
    fn walk(block: &DMatrix<f64>, p: usize, q: usize, acc: f64) -> f64 {
        let acc = acc + block[(p, q)];
        let (n1, n2) = block.shape();
        if p + 1 == n1 && q + 1 == n2 {
            return acc;
        }
        let mut best = f64::NEG_INFINITY;
        if p + 1 < n1 && q + 1 < n2 {
            best = best.max(walk(block, p + 1, q + 1, acc));
        }
        if p + 1 < n1 {
            best = best.max(walk(block, p + 1, q, acc));
        }
        if q + 1 < n2 {
            best = best.max(walk(block, p, q + 1, acc));
        }
        best
    }
    walk(block, 0, 0, 0.0)
}

struct Instance {
    problem_scene: SyntheticScene,
    timeline: CommonTimeline,
}

fn instance(seed: u64) -> Instance {
    let config = SceneConfig {
        videos: 3,
        base_frames: 6,
        desync: None,
        noise_px: 3.0,
        perturbation_deg: 5.0,
        s_true: 2,
        seed,
        ..Default::default()
    };
    let scene = generate_scene(&config).unwrap();
    let timeline = CommonTimeline::identity(0, &[6, 6, 6]);
    Instance { problem_scene: scene, timeline }
}

fn perturbed_truth(scene: &SyntheticScene, rng: &mut ChaCha8Rng) -> (MotionParams, Vec<multicap::geometry::CameraModel>) {
    let m = scene.truth.video_count();
    let n = scene.detections.videos[0].len();
    let mut theta = Vec::new();
    let mut beta = Vec::new();
    let mut gamma = Vec::new();
    for j in 0..m {
        let frames: Vec<_> = (0..n).map(|f| scene.truth.frame_params(j, f).clone()).collect();
        theta.push(frames.iter().map(|p| PoseVector(p.theta.0.map(|v| v + rng.random_range(-0.05..0.05)))).collect());
        gamma.push(frames.iter().map(|p| p.gamma).collect());
        beta.push(frames[0].beta.clone());
    }
    (MotionParams { theta, beta, gamma }, scene.truth.cameras.clone())
}

/// Directional derivative by central differences along `dir`.
fn directional<F: Fn(&MotionParams) -> f64>(
    f: F,
    layout: &multicap::solver::ParamLayout,
    base: &MotionParams,
    dir: &DVector<f64>,
) -> f64 {
    let h = 1e-6;
    (f(&layout.offset_params(base, dir, h)) - f(&layout.offset_params(base, dir, -h))) / (2.0 * h)
}

fn relative_gap(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / scale
}

/// Worst relative gap between analytic directional derivatives of the
/// objective terms and central differences, over `instances` random cases.
pub fn worst_gradient_error(instances: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let inst = instance(k % 10);
        let scene = &inst.problem_scene;
        let problem = Problem::new(&scene.skeleton, &scene.detections, &inst.timeline).unwrap();
        let layout = problem.layout();
        let (params, cameras) = perturbed_truth(scene, &mut rng);
        let dir = DVector::from_fn(layout.dim(), |_, _| rng.random_range(-1.0..1.0));
        let sigma = 10.0;

        let (_, grad) = reprojection_loss(&problem, &params, &cameras, sigma).unwrap();
        let numeric = directional(
            |p| reprojection_loss(&problem, p, &cameras, sigma).unwrap().0,
            &layout,
            &params,
            &dir,
        );
        worst = worst.max(relative_gap(grad.dot(&dir), numeric));

        let (_, grad) = temporal_loss(&params, &layout);
        let numeric = directional(|p| temporal_loss(p, &layout).0, &layout, &params, &dir);
        worst = worst.max(relative_gap(grad.dot(&dir), numeric));

        let aux = AuxiliaryVars::project_from(&params, 1, 1);
        let (wp, wy) = (0.7, 1.3);
        let (_, grad) = coupling_losses(&params, &aux, &layout, wp, wy);
        let numeric = directional(
            |p| {
                let ((a, b), _) = coupling_losses(p, &aux, &layout, 0.0, 0.0);
                wp * a + wy * b
            },
            &layout,
            &params,
            &dir,
        );
        worst = worst.max(relative_gap(grad.dot(&dir), numeric));
    }
    worst
}

/// As [`worst_gradient_error`], for the quadratic temporal term alone.
pub fn worst_temporal_gradient_error(instances: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let inst = instance(k % 10);
        let problem = Problem::new(&inst.problem_scene.skeleton, &inst.problem_scene.detections, &inst.timeline).unwrap();
        let layout = problem.layout();
        let (params, _) = perturbed_truth(&inst.problem_scene, &mut rng);
        let dir = DVector::from_fn(layout.dim(), |_, _| rng.random_range(-1.0..1.0));
        let (_, grad) = temporal_loss(&params, &layout);
        let numeric = directional(|p| temporal_loss(p, &layout).0, &layout, &params, &dir);
        worst = worst.max(relative_gap(grad.dot(&dir), numeric));
    }
    worst
}
