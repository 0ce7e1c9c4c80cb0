use multicap::metrics::{sync_error, TruthTimeline};
use multicap::pipeline::{carry_to_own_frames, run_iterative, PipelineConfig};
use multicap::solver::{alternating_solve, initialize, SolverConfig};
use multicap::sync::CommonTimeline;
use multicap::synth::{generate_scene, DesyncConfig, SceneConfig};

#[test]
fn single_video_pipeline_equals_one_solve() {
    let scene = generate_scene(&SceneConfig { videos: 1, base_frames: 40, noise_px: 1.0, init_perturbation_deg: 5.0, desync: Some(DesyncConfig { n_s1: 10, n_s2: 3 }), ..SceneConfig::default() }).unwrap();
    let config = PipelineConfig::default();
    let out = run_iterative(&scene.skeleton, &scene.detections, &scene.initial_poses, &config).unwrap();
    let timeline = CommonTimeline::identity(0, &scene.detections.frame_counts());
    assert_eq!(out.timeline, timeline);
    let init = initialize(&scene.skeleton, &scene.initial_poses, &scene.detections, &timeline, &config.solver).unwrap();
    let direct = alternating_solve(&scene.skeleton, &scene.detections, &timeline, init, &config.solver).unwrap();
    assert_eq!(out.solution.params, direct.params);
    assert_eq!(out.solution.objective_trace, direct.objective_trace);
    // The second round reproduces the timeline and stops.
    assert_eq!(out.rounds.len(), 2);
    assert!(!out.rounds[1].timeline_changed);
    assert_eq!(out.selected_round, 1);
}

#[test]
fn exact_poses_synchronize_exactly_and_stay_fixed() {
    let scene = generate_scene(&SceneConfig::default()).unwrap();
    let mut config = PipelineConfig::default();
    config.solver.rank = 2;
    let out = run_iterative(&scene.skeleton, &scene.detections, &scene.initial_poses, &config).unwrap();
    let first = &out.rounds[0].timeline;
    let truth = TruthTimeline::from_frame_times(&scene.truth.frame_times, first.reference);
    assert_eq!(sync_error(first, &truth).unwrap(), 0.0);
    assert_eq!(out.rounds.len(), 2);
    assert!(!out.rounds[1].timeline_changed);
    assert_eq!(&out.timeline, first);
}

#[test]
fn carried_bodies_reproduce_shown_frames() {
    let scene = generate_scene(&SceneConfig { videos: 2, base_frames: 30, desync: None, ..SceneConfig::default() }).unwrap();
    // Video 1 shows only its even frames.
    let timeline = CommonTimeline { reference: 0, maps: vec![(0..30).collect(), (0..30).map(|i| i - i % 2).collect()] };
    let config = SolverConfig::default();
    let init = initialize(&scene.skeleton, &scene.initial_poses, &scene.detections, &timeline, &config).unwrap();
    let own = carry_to_own_frames(&scene.skeleton, &scene.detections, &timeline, &init, &config).unwrap();
    assert_eq!(own[1].len(), 30);
    for i in (0..30).step_by(2) {
        assert_eq!(own[1][i], init.params.frame(1, i));
    }
    // Skipped frames are refit to their own keypoints, so they move off the copy.
    assert_ne!(own[1][1].theta, init.params.frame(1, 0).theta);
}

#[test]
fn mismatched_inputs_fail_before_synchronizing() {
    let scene = generate_scene(&SceneConfig { videos: 2, base_frames: 20, desync: None, ..SceneConfig::default() }).unwrap();
    let err = run_iterative(&scene.skeleton, &scene.detections, &scene.initial_poses[..1], &PipelineConfig::default()).unwrap_err();
    assert!(err.error.is_input_error());
    assert!(err.timeline.is_none() && err.initial.is_none());
}

#[test]
fn pipeline_is_deterministic() {
    let scene = generate_scene(&SceneConfig {
        videos: 3,
        base_frames: 40,
        desync: Some(DesyncConfig { n_s1: 10, n_s2: 3 }),
        noise_px: 2.0,
        init_perturbation_deg: 5.0,
        seed: 3,
        ..SceneConfig::default()
    })
    .unwrap();
    let run = || run_iterative(&scene.skeleton, &scene.detections, &scene.initial_poses, &PipelineConfig::default()).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.timeline, b.timeline);
    assert_eq!(a.solution.params, b.solution.params);
    assert_eq!(a.solution.objective_trace, b.solution.objective_trace);
}
