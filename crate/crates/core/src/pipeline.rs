//! Frame-by-frame orchestration: preprocessing, tracking, fusion, surfel
//! spawning and windowed batch refinement, plus the offline stages that
//! consume a finished run (meshing, novel views, evaluation).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{self, ate_rmse, recon_metrics, sample_surfel_points, EvalError, Prediction, ReconReport, Trajectory};
use crate::frame::{color_to_f64, FrameError, ProcessedFrame, RawFrame};
use crate::fusion::fuse_frame;
use crate::geometry::{Intrinsics, Pose, Vec3};
use crate::io::{self, read_mesh_ply, read_surfels_ply, write_surfels_ply, Config, DatasetHandle, IoError};
use crate::meshing::{build_occupancy, integrate_depth, marching_cubes, Lattice, Mesh, TsdfVolume};
use crate::optim::{optimize_batch, KeyframeWindow, OptimizerState};
use crate::raster::{render_tiled, RenderOutput};
use crate::surfel::{initialize_surfels, SurfelMap};
use crate::tracking::Tracker;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("frame {index}: {source}")]
    Frame { index: usize, source: FrameError },
    #[error("evaluation: {0}")]
    Eval(#[from] EvalError),
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Edge-preserving depth smoothing before everything else.
    pub filter_depth: bool,
    /// Frames between batch refinements of the recent-frame window.
    pub optimize_every: usize,
    /// Extra refinement rounds over the keyframes after the last frame.
    pub final_rounds: usize,
    /// Spawning stops once the map holds this many surfels.
    pub max_surfels: usize,
    /// Start from the ground-truth pose of the first frame when the dataset
    /// has one, so maps share the ground-truth world frame.
    pub anchor_to_groundtruth: bool,
    /// Process at most this many frames (0 means all).
    pub max_frames: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            filter_depth: true,
            optimize_every: 8,
            final_rounds: 0,
            max_surfels: 100_000,
            anchor_to_groundtruth: true,
            max_frames: 0,
        }
    }
}

/// Wall-clock milliseconds per stage for one frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameTiming {
    pub frame_id: usize,
    pub timestamp: f64,
    pub load_ms: f64,
    pub preprocess_ms: f64,
    pub tracking_ms: f64,
    pub fusion_ms: f64,
    pub init_ms: f64,
    pub optimize_ms: f64,
    pub total_ms: f64,
    pub keyframe: bool,
    pub surfels: usize,
}

pub const TIMING_HEADER: &str = "frame_id,timestamp,load_ms,preprocess_ms,tracking_ms,fusion_ms,init_ms,optimize_ms,total_ms,keyframe,surfels";

pub fn timing_csv(rows: &[FrameTiming]) -> String {
    let mut s = String::from(TIMING_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{:.6},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{},{}",
            r.frame_id,
            r.timestamp,
            r.load_ms,
            r.preprocess_ms,
            r.tracking_ms,
            r.fusion_ms,
            r.init_ms,
            r.optimize_ms,
            r.total_ms,
            r.keyframe as u8,
            r.surfels
        )
        .expect("string write");
    }
    s
}

#[derive(Clone, Debug, Default)]
pub struct FrameReport {
    pub pose: Pose,
    pub keyframe: bool,
    pub tracking_accepted: bool,
    pub fused: usize,
    pub spawned: usize,
    pub optimized: bool,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Online state of one reconstruction.
pub struct Pipeline {
    cfg: Config,
    k: Intrinsics,
    map: SurfelMap,
    tracker: Tracker,
    window: KeyframeWindow,
    keyframes: Vec<(usize, Arc<ProcessedFrame>, Pose)>,
    opt_state: OptimizerState,
    rng: ChaCha8Rng,
    trajectory: Vec<(f64, Pose)>,
    timings: Vec<FrameTiming>,
    losses: Vec<f64>,
    since_opt: usize,
}

impl Pipeline {
    pub fn new(cfg: Config, k: Intrinsics) -> Self {
        let map = SurfelMap::new(cfg.surfel.cell_size);
        let tracker = Tracker::new(cfg.tracking.clone());
        let window = KeyframeWindow::new(cfg.optim.n_batch);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self {
            cfg,
            k,
            map,
            tracker,
            window,
            keyframes: Vec::new(),
            opt_state: OptimizerState::new(),
            rng,
            trajectory: Vec::new(),
            timings: Vec::new(),
            losses: Vec::new(),
            since_opt: 0,
        }
    }

    pub fn map(&self) -> &SurfelMap {
        &self.map
    }

    pub fn trajectory(&self) -> &[(f64, Pose)] {
        &self.trajectory
    }

    pub fn timings(&self) -> &[FrameTiming] {
        &self.timings
    }

    pub fn keyframe_ids(&self) -> Vec<usize> {
        self.keyframes.iter().map(|k| k.0).collect()
    }

    /// Optimization losses, one per refinement iteration.
    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    fn render(&self, pose: &Pose) -> RenderOutput {
        render_tiled(&self.map, pose, &self.k, &self.cfg.render, self.cfg.render.tile_size)
    }

    /// Processes one frame. `initial_pose` anchors the first frame and is
    /// ignored afterwards.
    pub fn process(&mut self, raw: RawFrame, initial_pose: Option<Pose>, load_ms: f64) -> Result<FrameReport, PipelineError> {
        let t_total = Instant::now();
        let index = raw.frame_id;
        let timestamp = raw.timestamp;
        let levels = self.cfg.tracking.pyramid_levels;
        let t = Instant::now();
        let frame = if self.cfg.pipeline.filter_depth {
            ProcessedFrame::new(raw, &self.k, levels)
        } else {
            ProcessedFrame::unfiltered(raw, &self.k, levels)
        }
        .map_err(|source| PipelineError::Frame { index, source })?;
        let frame = Arc::new(frame);
        let preprocess_ms = ms(t);

        let t = Instant::now();
        let tracked = if self.trajectory.is_empty() {
            self.tracker.initialize(&frame, initial_pose.unwrap_or_else(Pose::identity))
        } else {
            let (map, k, opts) = (&self.map, &self.k, &self.cfg.render);
            self.tracker.track(&frame, |p| render_tiled(map, p, k, opts, opts.tile_size))
        };
        let pose = tracked.result.pose;
        let tracking_ms = ms(t);

        let t = Instant::now();
        let render = self.render(&pose);
        let stats = fuse_frame(&mut self.map, &frame, &pose, &render, &self.cfg.noise, &self.cfg.fusion);
        let fusion_ms = ms(t);

        let t = Instant::now();
        let mut spawned = 0;
        let room = self.cfg.pipeline.max_surfels.saturating_sub(self.map.len());
        if room > 0 {
            let mut fresh = initialize_surfels(&frame, &pose, &render, &self.cfg.noise, &self.cfg.surfel);
            fresh.truncate(room);
            spawned = self.map.extend(fresh);
        }
        let init_ms = ms(t);

        if tracked.keyframe {
            self.keyframes.push((index, frame.clone(), pose));
        }
        self.window.push(frame, pose);
        self.since_opt += 1;
        let t = Instant::now();
        let mut optimized = false;
        if self.since_opt >= self.cfg.pipeline.optimize_every {
            self.refine_window();
            optimized = true;
        }
        let optimize_ms = ms(t);

        self.trajectory.push((timestamp, pose));
        self.timings.push(FrameTiming {
            frame_id: index,
            timestamp,
            load_ms,
            preprocess_ms,
            tracking_ms,
            fusion_ms,
            init_ms,
            optimize_ms,
            total_ms: ms(t_total) + load_ms,
            keyframe: tracked.keyframe,
            surfels: self.map.len(),
        });
        debug!(
            "frame {index}: accepted={} keyframe={} fused={} spawned={spawned} surfels={}",
            tracked.result.accepted,
            tracked.keyframe,
            stats.fused,
            self.map.len()
        );
        Ok(FrameReport { pose, keyframe: tracked.keyframe, tracking_accepted: tracked.result.accepted, fused: stats.fused, spawned, optimized })
    }

    fn refine_window(&mut self) {
        let o = optimize_batch(&mut self.map, &self.window, self.cfg.optim.m, &mut self.opt_state, &self.cfg.optim, &self.cfg.render, &mut self.rng);
        self.losses.extend(o.losses);
        self.since_opt = 0;
    }

    /// Flushes the pending window and runs the configured final rounds over
    /// the keyframes.
    pub fn finish(&mut self) {
        if self.since_opt > 0 {
            self.refine_window();
        }
        if self.cfg.pipeline.final_rounds > 0 && !self.keyframes.is_empty() {
            let mut kf = KeyframeWindow::new(self.keyframes.len());
            for (_, f, p) in &self.keyframes {
                kf.push(f.clone(), *p);
            }
            for _ in 0..self.cfg.pipeline.final_rounds {
                let o = optimize_batch(&mut self.map, &kf, self.cfg.optim.m, &mut self.opt_state, &self.cfg.optim, &self.cfg.render, &mut self.rng);
                self.losses.extend(o.losses);
            }
        }
    }
}

/// Result of a full run over a dataset.
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub keyframes: Vec<usize>,
    pub timings: Vec<FrameTiming>,
    pub map: SurfelMap,
    pub losses: Vec<f64>,
}

/// Runs `f` on a pool with `threads` workers (0: pool default).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| PipelineError::ThreadPool(e.to_string()))?;
    Ok(pool.install(f))
}

fn nearest_pose(traj: &Trajectory, t: f64) -> Option<Pose> {
    traj.entries()
        .iter()
        .min_by(|a, b| (a.0 - t).abs().total_cmp(&(b.0 - t).abs()))
        .filter(|e| (e.0 - t).abs() <= eval::ASSOCIATION_TOLERANCE)
        .map(|e| e.1)
}

pub fn run_dataset(dataset: &DatasetHandle, cfg: &Config) -> Result<RunOutput, PipelineError> {
    let n = match cfg.pipeline.max_frames {
        0 => dataset.len(),
        m => m.min(dataset.len()),
    };
    with_threads(cfg.threads, || {
        let mut p = Pipeline::new(cfg.clone(), dataset.intrinsics);
        let anchor = if cfg.pipeline.anchor_to_groundtruth {
            dataset.groundtruth.as_ref().and_then(|g| nearest_pose(g, dataset.frames[0].timestamp))
        } else {
            None
        };
        for i in 0..n {
            let t = Instant::now();
            let raw = dataset.load_frame(i)?;
            p.process(raw, anchor, ms(t))?;
            if (i + 1) % 20 == 0 {
                info!("processed {}/{n} frames, {} surfels", i + 1, p.map().len());
            }
        }
        let t = Instant::now();
        p.finish();
        if let Some(last) = p.timings.last_mut() {
            last.optimize_ms += ms(t);
            last.total_ms += ms(t);
        }
        let trajectory = Trajectory::new(p.trajectory.clone())?;
        Ok(RunOutput { trajectory, keyframes: p.keyframe_ids(), timings: p.timings.clone(), map: p.map.clone(), losses: p.losses.clone() })
    })?
}

/// Bookkeeping that lets offline stages find the inputs of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub dataset: PathBuf,
    pub frames: usize,
    pub keyframes: Vec<usize>,
    pub surfels: usize,
    pub exported_surfels: usize,
}

pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const SURFELS_FILE: &str = "surfels.ply";
pub const TIMING_FILE: &str = "timing.csv";
pub const LOSS_FILE: &str = "losses.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "run.toml";
pub const MESH_FILE: &str = "mesh.ply";
pub const REPORT_FILE: &str = "report.txt";
pub const GT_MESH_FILE: &str = "gt_mesh.ply";

pub fn write_run(out: &RunOutput, dataset: &DatasetHandle, cfg: &Config, dir: &Path) -> Result<RunManifest, PipelineError> {
    io::write_trajectory(&out.trajectory, &dir.join(TRAJECTORY_FILE))?;
    let exported = write_surfels_ply(&out.map, &dir.join(SURFELS_FILE), cfg.export.tau_conf)?;
    io::write_text(&dir.join(TIMING_FILE), &timing_csv(&out.timings))?;
    let mut losses = String::from("iteration,loss\n");
    for (i, l) in out.losses.iter().enumerate() {
        writeln!(losses, "{i},{l}").expect("string write");
    }
    io::write_text(&dir.join(LOSS_FILE), &losses)?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    let root = std::fs::canonicalize(&dataset.root).unwrap_or_else(|_| dataset.root.clone());
    let manifest = RunManifest { dataset: root, frames: out.trajectory.len(), keyframes: out.keyframes.clone(), surfels: out.map.len(), exported_surfels: exported };
    io::write_text(&dir.join(MANIFEST_FILE), &toml::to_string(&manifest).expect("manifest serializes"))?;
    Ok(manifest)
}

/// A finished run reloaded from disk.
pub struct RunDir {
    pub dir: PathBuf,
    pub config: Config,
    pub manifest: RunManifest,
    pub trajectory: Trajectory,
    pub map: SurfelMap,
}

impl RunDir {
    pub fn open(dir: &Path) -> Result<Self, PipelineError> {
        let config = Config::load(&dir.join(CONFIG_FILE))?;
        let mpath = dir.join(MANIFEST_FILE);
        let manifest: RunManifest = toml::from_str(&io::read_text(&mpath)?).map_err(|e| IoError::format(&mpath, e.message().to_string()))?;
        let trajectory = io::read_trajectory(&dir.join(TRAJECTORY_FILE))?;
        let map = read_surfels_ply(&dir.join(SURFELS_FILE), config.surfel.cell_size)?;
        Ok(Self { dir: dir.to_path_buf(), config, manifest, trajectory, map })
    }

    pub fn render(&self, pose: &Pose, k: &Intrinsics) -> RenderOutput {
        render_tiled(&self.map, pose, k, &self.config.render, self.config.render.tile_size)
    }
}

/// Voxel-masked TSDF fusion of the keyframes followed by marching cubes.
/// Depth comes from the surfel renders unless `meshing.raw_depth` is set.
pub fn extract_mesh(run: &RunDir, dataset: &DatasetHandle) -> Result<Mesh, PipelineError> {
    let mc = &run.config.meshing;
    let lattice = Lattice::new(Vec3::zeros(), mc.voxel_size);
    let mask = mc.use_mask.then(|| build_occupancy(&run.map, lattice, mc.dilation));
    let mut vol = TsdfVolume::new(lattice, mc.truncation);
    let k = dataset.intrinsics;
    let entries = run.trajectory.entries();
    for &i in &run.manifest.keyframes {
        let Some(&(_, pose)) = entries.get(i) else {
            return Err(PipelineError::Invalid(format!("keyframe {i} has no trajectory entry")));
        };
        let depth = if mc.raw_depth { dataset.load_frame(i)?.depth } else { run.render(&pose, &k).depth };
        integrate_depth(&mut vol, &depth, &pose, &k, mask.as_ref());
    }
    Ok(marching_cubes(&vol))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub ate_cm: Option<f64>,
    pub recon: Option<ReconReport>,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub views: usize,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>, prec: usize| v.map_or("n/a".to_string(), |x| format!("{x:.prec$}"));
        writeln!(s, "ate_rmse_cm {}", opt(self.ate_cm, 2)).unwrap();
        if let Some(r) = &self.recon {
            writeln!(s, "accuracy_cm {:.3}", r.accuracy_cm).unwrap();
            writeln!(s, "accuracy_ratio_pct {:.2}", r.accuracy_ratio_pct).unwrap();
            writeln!(s, "completeness_cm {:.3}", r.completeness_cm).unwrap();
            writeln!(s, "completeness_ratio_pct {:.2}", r.completeness_ratio_pct).unwrap();
        }
        writeln!(s, "psnr_db {}", opt(self.psnr_db, 2)).unwrap();
        writeln!(s, "ssim {}", opt(self.ssim, 4)).unwrap();
        writeln!(s, "views {}", self.views).unwrap();
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    /// Surfel samples for the reconstruction metrics.
    pub samples: usize,
    /// Every `view_stride`-th frame is a render-quality test view.
    pub view_stride: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { samples: 200_000, view_stride: 10, seed: 0 }
    }
}

/// Mean PSNR/SSIM of renders at the estimated poses against the dataset's
/// color images.
pub fn view_quality(map: &SurfelMap, cfg: &Config, dataset: &DatasetHandle, traj: &Trajectory, stride: usize) -> Result<(f64, f64, usize), PipelineError> {
    let k = dataset.intrinsics;
    let (mut psnr, mut ssim, mut n) = (0.0, 0.0, 0usize);
    for (i, (_, pose)) in traj.entries().iter().enumerate().step_by(stride.max(1)) {
        if i >= dataset.len() {
            break;
        }
        let target = dataset.load_frame(i)?.color.map_par(color_to_f64);
        let r = render_tiled(map, pose, &k, &cfg.render, cfg.render.tile_size);
        psnr += eval::psnr(&r.color, &target)?;
        ssim += eval::ssim(&r.color, &target)?;
        n += 1;
    }
    if n == 0 {
        return Err(PipelineError::Eval(EvalError::Empty("evaluation views")));
    }
    Ok((psnr / n as f64, ssim / n as f64, n))
}

/// Trajectory error against the dataset's ground truth, surfel accuracy
/// against `gt_mesh.ply` in the dataset directory, and render quality.
pub fn evaluate_run(run: &RunDir, gt: &DatasetHandle, opts: &EvalOptions) -> Result<EvalReport, PipelineError> {
    let mut report = EvalReport::default();
    if let Some(g) = &gt.groundtruth {
        report.ate_cm = Some(ate_rmse(&run.trajectory, g)?);
    }
    let mesh_path = gt.root.join(GT_MESH_FILE);
    if mesh_path.exists() && !run.map.is_empty() {
        let gt_mesh = read_mesh_ply(&mesh_path)?;
        let pts = sample_surfel_points(&run.map, opts.samples, opts.seed)?;
        report.recon = Some(recon_metrics(Prediction::Points(&pts), &gt_mesh, eval::RECON_TAU, opts.samples, opts.seed)?);
    }
    if !run.map.is_empty() {
        let (p, s, n) = view_quality(&run.map, &run.config, gt, &run.trajectory, opts.view_stride)?;
        report.psnr_db = Some(p);
        report.ssim = Some(s);
        report.views = n;
    }
    Ok(report)
}
