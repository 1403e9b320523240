use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gsfusion::io::{self, load_tum, write_tum_sequence, IoError};
use gsfusion::pipeline::{self, evaluate_run, extract_mesh, run_dataset, write_run, EvalOptions, PipelineError, RunDir};
use gsfusion::synth::preset;
use gsfusion::{Config, Pose};
use log::info;

/// Environment variable that overrides the configured worker count.
const THREADS_ENV: &str = "GSFUSION_THREADS";

#[derive(Parser)]
#[command(name = "gsfusion", version, about = "Gaussian-surfel RGB-D reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reconstruct a TUM-layout RGB-D sequence.
    Run {
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        /// Stop after this many frames.
        #[arg(long)]
        max_frames: Option<usize>,
    },
    /// Write a synthetic scene to disk in the TUM layout.
    Synth {
        /// One of plane-box, room, two-stage.
        spec: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the number of frames.
        #[arg(long)]
        frames: Option<usize>,
        /// Disable depth noise.
        #[arg(long)]
        clean: bool,
        #[arg(long, default_value_t = 4)]
        sphere_level: usize,
    },
    /// Extract a voxel-masked TSDF mesh from a finished run.
    Mesh {
        run_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render color and depth PNGs of a finished run.
    Render {
        run_dir: PathBuf,
        /// Camera-to-world pose `tx ty tz qx qy qz qw`.
        #[arg(long, conflicts_with = "frame", allow_hyphen_values = true)]
        pose: Option<String>,
        /// Use the estimated pose of this frame.
        #[arg(long)]
        frame: Option<usize>,
        /// Output prefix; writes `<prefix>_color.png` and `<prefix>_depth.png`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a run against a ground-truth dataset.
    Eval {
        run_dir: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 200_000)]
        samples: usize,
        #[arg(long, default_value_t = 10)]
        view_stride: usize,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Io(IoError::Config(m)) => Failure::Usage(format!("invalid config: {m}")),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        PipelineError::from(e).into()
    }
}

fn parse_pose(s: &str) -> Result<Pose, Failure> {
    let line = format!("0 {s}\n");
    let t = io::parse_trajectory(&line, Path::new("--pose")).map_err(|_| Failure::Usage("--pose expects `tx ty tz qx qy qz qw`".into()))?;
    Ok(t.entries()[0].1)
}

fn env_threads() -> Result<Option<usize>, Failure> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Failure::Usage(format!("{THREADS_ENV} must be a non-negative integer"))),
        Err(_) => Ok(None),
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { dataset, config, out, seed, threads, max_frames } => {
            let mut cfg = match config {
                Some(p) => Config::load(&p)?,
                None => Config::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(t) = threads.map(Some).unwrap_or(env_threads()?) {
                cfg.threads = t;
            }
            if let Some(m) = max_frames {
                cfg.pipeline.max_frames = m;
            }
            let ds = load_tum(&dataset)?;
            info!("{} frames from {}", ds.len(), dataset.display());
            let result = run_dataset(&ds, &cfg)?;
            let manifest = write_run(&result, &ds, &cfg, &out)?;
            println!("processed {} frames, {} keyframes, {} surfels -> {}", manifest.frames, manifest.keyframes.len(), manifest.surfels, out.display());
        }
        Command::Synth { spec, out, seed, frames, clean, sphere_level } => {
            let mut s = preset(&spec).map_err(|e| Failure::Usage(e.to_string()))?;
            if let Some(n) = frames {
                if n < 2 {
                    return Err(Failure::Usage("--frames must be at least 2".into()));
                }
                s.frames = n;
            }
            if clean {
                s.noise = gsfusion::synth::NoiseSpec::none();
            }
            write_tum_sequence(&s, &out, seed, sphere_level)?;
            println!("wrote {} frames of `{spec}` to {}", s.frames, out.display());
        }
        Command::Mesh { run_dir, out } => {
            let run = RunDir::open(&run_dir)?;
            let ds = load_tum(&run.manifest.dataset)?;
            let mesh = pipeline::with_threads(run.config.threads, || extract_mesh(&run, &ds))??;
            let path = out.unwrap_or_else(|| run_dir.join(pipeline::MESH_FILE));
            io::write_mesh_ply(&mesh, &path)?;
            println!("{} vertices, {} faces -> {}", mesh.vertices.len(), mesh.faces.len(), path.display());
        }
        Command::Render { run_dir, pose, frame, out } => {
            let run = RunDir::open(&run_dir)?;
            let ds = load_tum(&run.manifest.dataset)?;
            let pose = match (pose, frame) {
                (Some(p), _) => parse_pose(&p)?,
                (None, Some(i)) => run.trajectory.entries().get(i).map(|e| e.1).ok_or_else(|| Failure::Usage(format!("frame {i} is not in the trajectory")))?,
                (None, None) => return Err(Failure::Usage("render needs --pose or --frame".into())),
            };
            let r = pipeline::with_threads(run.config.threads, || run.render(&pose, &ds.intrinsics))?;
            let prefix = out.unwrap_or_else(|| run_dir.join("render"));
            let name = |suffix: &str| {
                let mut s = prefix.clone().into_os_string();
                s.push(suffix);
                PathBuf::from(s)
            };
            io::write_float_png(&r.color, &name("_color.png"))?;
            io::write_depth_png(&r.depth, ds.intrinsics.depth_scale, &name("_depth.png"))?;
            println!("wrote {} and {}", name("_color.png").display(), name("_depth.png").display());
        }
        Command::Eval { run_dir, gt, samples, view_stride } => {
            let run = RunDir::open(&run_dir)?;
            let ds = load_tum(&gt)?;
            let opts = EvalOptions { samples, view_stride, seed: run.config.seed };
            let report = pipeline::with_threads(run.config.threads, || evaluate_run(&run, &ds, &opts))??;
            let text = report.to_text();
            io::write_text(&run_dir.join(pipeline::REPORT_FILE), &text)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
