use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::Matrix3xX;
use serde::{Deserialize, Serialize};

use multicap::io::{self, Dataset, SolutionFile};
use multicap::metrics::{evaluate, sync_error_per_video, Metrics, MetricsConfig, TruthTimeline};
use multicap::pipeline::{run_iterative, PipelineConfig, RoundDiagnostics};
use multicap::solver::{alternating_solve, initialize, FrameParams, MotionSolution};
use multicap::sync::{synchronize, CommonTimeline};
use multicap::synth::{generate_scene, SceneConfig};
use multicap::Error;

#[derive(Parser)]
#[command(name = "multicap", version, about = "Synchronize, calibrate and reconstruct motion from multiple 2D keypoint videos")]
struct Cli {
    /// Run configuration (TOML, or JSON by extension); missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the scene and pipeline seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// On numerical failure, still write the best iterate reached.
    #[arg(long, global = true)]
    keep_partial: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Synchronize a dataset from its initial pose estimates.
    Sync {
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write raw and denoised affinity blocks as CSV here.
        #[arg(long)]
        dump_affinity: Option<PathBuf>,
    },
    /// Reconstruct motion and cameras on a given timeline.
    Solve {
        dataset: PathBuf,
        #[arg(long)]
        timeline: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Alternate synchronization and reconstruction.
    Pipeline {
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dump_affinity: Option<PathBuf>,
    },
    /// Score a solution against a dataset's ground truth.
    Eval {
        #[arg(long)]
        solution: PathBuf,
        /// Dataset directory holding `scene.json` and `truth.json`.
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    scene: SceneConfig,
    pipeline: PipelineConfig,
    metrics: MetricsConfig,
}

impl RunConfig {
    fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self, Error> {
        let mut config = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.display().to_string(), source: e })?;
                let schema = |message: String| Error::Schema { path: p.display().to_string(), message };
                let mut unknown = Vec::new();
                let parsed: RunConfig = if p.extension().is_some_and(|e| e == "json") {
                    let mut de = serde_json::Deserializer::from_str(&text);
                    serde_ignored::deserialize(&mut de, |key| unknown.push(key.to_string())).map_err(|e| schema(e.to_string()))?
                } else {
                    let de = toml::Deserializer::new(&text);
                    serde_ignored::deserialize(de, |key| unknown.push(key.to_string())).map_err(|e| schema(e.to_string()))?
                };
                if !unknown.is_empty() {
                    return Err(schema(format!("unknown field(s): {}", unknown.join(", "))));
                }
                parsed
            }
        };
        if let Some(s) = seed {
            config.scene.seed = s;
            config.pipeline.seed = s;
        }
        config.scene.validate()?;
        config.pipeline.validate()?;
        Ok(config)
    }
}

#[derive(Serialize)]
struct SyncReport {
    reference: usize,
    sync_error_fraction: f64,
    per_video: Vec<f64>,
}

#[derive(Serialize)]
struct RoundReport<'a> {
    #[serde(flatten)]
    diagnostics: &'a RoundDiagnostics,
    #[serde(skip_serializing_if = "Option::is_none")]
    sync_error_fraction: Option<f64>,
}

#[derive(Serialize)]
struct DiagnosticsReport<'a> {
    selected_round: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    warning: Option<&'a str>,
    rounds: Vec<RoundReport<'a>>,
}

fn initial_poses(dataset: &Dataset, dir: &Path) -> Result<Vec<Vec<FrameParams>>, Error> {
    dataset
        .initial_poses
        .clone()
        .ok_or_else(|| Error::Input(format!("{} has no init_poses.json", dir.display())))
}

fn pose_joints(dataset: &Dataset, poses: &[Vec<FrameParams>]) -> Result<Vec<Vec<Matrix3xX<f64>>>, Error> {
    poses.iter().map(|v| v.iter().map(|p| p.joints(&dataset.skeleton)).collect()).collect()
}

fn sync_report(dataset: &Dataset, timeline: &CommonTimeline) -> Result<Option<SyncReport>, Error> {
    let Some(truth) = &dataset.truth else { return Ok(None) };
    let truth_tl = TruthTimeline::from_frame_times(&truth.frame_times, timeline.reference);
    let per_video = sync_error_per_video(timeline, &truth_tl)?;
    let others = per_video.len().saturating_sub(1).max(1);
    Ok(Some(SyncReport {
        reference: timeline.reference,
        sync_error_fraction: per_video.iter().sum::<f64>() / others as f64,
        per_video,
    }))
}

fn metrics_for(dataset: &Dataset, solution: &MotionSolution, timeline: &CommonTimeline, config: &MetricsConfig) -> Result<Option<Metrics>, Error> {
    match &dataset.truth {
        Some(truth) => Ok(Some(evaluate(&dataset.skeleton, &solution.params, timeline, truth, config)?)),
        None => Ok(None),
    }
}

fn write_solution(out: &Path, solution: &MotionSolution, timeline: &CommonTimeline) -> Result<(), Error> {
    io::write_json(&out.join("timeline.json"), timeline)?;
    io::write_json(&out.join("solution.json"), &SolutionFile::new(solution, timeline))
}

/// Marks a best-iterate solution written after a failure.
fn partial(mut solution: MotionSolution, error: &Error) -> MotionSolution {
    solution.warning = Some(format!("partial result: {error}"));
    solution
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let config = RunConfig::load(cli.config.as_deref(), cli.seed)?;

    match cli.command {
        Command::Synth { out } => {
            let scene = generate_scene(&config.scene)?;
            io::write_dataset(&out, &scene, Some(&config.scene))?;
            io::write_json(&out.join("config.json"), &config)?;
            println!("wrote {} videos to {}", scene.detections.video_count(), out.display());
        }
        Command::Sync { dataset: dir, out, dump_affinity } => {
            let dataset = io::read_dataset(&dir)?;
            let poses = pose_joints(&dataset, &initial_poses(&dataset, &dir)?)?;
            let result = synchronize(&poses, config.pipeline.reference, &config.pipeline.sync)?;
            io::write_json(&out.join("timeline.json"), &result.timeline)?;
            io::write_json(&out.join("config.json"), &config)?;
            if let Some(report) = sync_report(&dataset, &result.timeline)? {
                println!("sync error {:.5}", report.sync_error_fraction);
                io::write_json(&out.join("sync_metrics.json"), &report)?;
            }
            if let Some(dump) = dump_affinity {
                io::dump_affinity(&dump, "A", &result.raw)?;
                if let Some(d) = &result.denoised {
                    io::dump_affinity(&dump, "X", &d.to_grid())?;
                }
            }
        }
        Command::Solve { dataset: dir, timeline, out } => {
            let dataset = io::read_dataset(&dir)?;
            let poses = initial_poses(&dataset, &dir)?;
            let timeline: CommonTimeline = io::read_json(&timeline)?;
            timeline.validate(&dataset.detections.frame_counts())?;
            let solver = &config.pipeline.solver;
            io::write_json(&out.join("config.json"), &config)?;
            let init = initialize(&dataset.skeleton, &poses, &dataset.detections, &timeline, solver)?;
            let solution = match alternating_solve(&dataset.skeleton, &dataset.detections, &timeline, init.clone(), solver) {
                Ok(s) => s,
                Err(e) if cli.keep_partial && !e.is_input_error() => {
                    write_solution(&out, &partial(init, &e), &timeline)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            write_solution(&out, &solution, &timeline)?;
            if let Some(m) = metrics_for(&dataset, &solution, &timeline, &config.metrics)? {
                io::write_json(&out.join("metrics.json"), &m)?;
            }
            println!("final objective {:.6}", solution.final_objective());
        }
        Command::Pipeline { dataset: dir, out, dump_affinity } => {
            let dataset = io::read_dataset(&dir)?;
            let poses = initial_poses(&dataset, &dir)?;
            io::write_json(&out.join("config.json"), &config)?;
            let result = match run_iterative(&dataset.skeleton, &dataset.detections, &poses, &config.pipeline) {
                Ok(r) => r,
                Err(failure) => {
                    if cli.keep_partial && !failure.error.is_input_error() {
                        if let Some(tl) = &failure.timeline {
                            io::write_json(&out.join("timeline.json"), tl)?;
                            if let Some(init) = failure.initial.clone() {
                                write_solution(&out, &partial(init, &failure.error), tl)?;
                            }
                        }
                    }
                    return Err(failure.error);
                }
            };
            write_solution(&out, &result.solution, &result.timeline)?;
            let rounds = result
                .rounds
                .iter()
                .map(|d| {
                    Ok(RoundReport {
                        diagnostics: d,
                        sync_error_fraction: sync_report(&dataset, &d.timeline)?.map(|r| r.sync_error_fraction),
                    })
                })
                .collect::<Result<Vec<_>, Error>>()?;
            let report = DiagnosticsReport { selected_round: result.selected_round, warning: result.warning.as_deref(), rounds };
            io::write_json(&out.join("diagnostics.json"), &report)?;
            if let Some(m) = metrics_for(&dataset, &result.solution, &result.timeline, &config.metrics)? {
                println!("p_mpjpe_mm {:.3} sync_error {:.5}", m.p_mpjpe_mm, m.sync_error_fraction);
                io::write_json(&out.join("metrics.json"), &m)?;
            }
            if let Some(dump) = dump_affinity {
                io::dump_affinity(&dump, "A", &result.sync.raw)?;
                if let Some(d) = &result.sync.denoised {
                    io::dump_affinity(&dump, "X", &d.to_grid())?;
                }
            }
        }
        Command::Eval { solution, dataset: dir, out } => {
            let dataset = io::read_dataset(&dir)?;
            if dataset.truth.is_none() {
                return Err(Error::Input(format!("{} has no truth.json", dir.display())));
            }
            let file: SolutionFile = io::read_json(&solution)?;
            let sol = file.to_solution(&solution, dataset.skeleton.joint_count(), config.pipeline.solver.pose_rank())?;
            file.timeline.validate(&dataset.detections.frame_counts())?;
            let m = metrics_for(&dataset, &sol, &file.timeline, &config.metrics)?.expect("truth is present");
            io::write_json(&out.join("metrics.json"), &m)?;
            println!("p_mpjpe_mm {:.3} mpjpe_mm {:.3} sync_error {:.5}", m.p_mpjpe_mm, m.mpjpe_mm, m.sync_error_fraction);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 3 })
        }
    }
}
