//! Camera tracking: sparse feature-based initialization refined by dense
//! frame-to-model alignment, plus keyframe selection and the landmark map.

pub mod dense;
pub mod features;
pub mod sparse;

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{is_valid_depth, ProcessedFrame};
use crate::geometry::{log_se3, Pose, Twist};
use crate::raster::RenderOutput;

pub use dense::{dense_align, ModelPyramid};
pub use features::{detect_and_describe, Descriptor, FeatureConfig, Features, Keypoint};
pub use sparse::{match_2d3d, sparse_pose_init, Correspondence, CorrespondenceSet, Landmark, SparseResult};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackingError {
    #[error("{0} correspondences, at least 4 required")]
    TooFewCorrespondences(usize),
    #[error("{0} inliers after robust fit")]
    TooFewInliers(usize),
    #[error("pose estimate diverged")]
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackingConfig {
    pub features: FeatureConfig,
    /// Half-width of the square match window, pixels.
    pub search_radius: usize,
    pub max_hamming: u32,
    pub ratio: f64,
    pub huber_px: f64,
    pub inlier_px: f64,
    pub min_inliers: usize,
    pub sparse_max_iters: usize,
    pub pyramid_levels: usize,
    /// Damped Gauss-Newton iterations per pyramid level.
    pub n_pyr: usize,
    /// Overrides `n_pyr` at the finest level when set.
    pub finest_iters: Option<usize>,
    /// Leave a level once the step norm drops below `tau_step`.
    pub early_stop: bool,
    pub lambda_photo: f64,
    pub lambda_init: f64,
    /// Meters.
    pub max_assoc_dist: f64,
    /// Degrees.
    pub max_assoc_angle: f64,
    pub tau_step: f64,
    pub min_associations: usize,
    /// Keyframe translation threshold, meters.
    pub t_k: f64,
    /// Keyframe rotation threshold, degrees.
    pub theta_k: f64,
    pub max_landmarks: usize,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            features: FeatureConfig::default(),
            search_radius: 20,
            max_hamming: 64,
            ratio: 0.8,
            huber_px: 3.0,
            inlier_px: 5.0,
            min_inliers: 10,
            sparse_max_iters: 30,
            pyramid_levels: 3,
            n_pyr: 2,
            finest_iters: None,
            early_stop: true,
            lambda_photo: 0.1,
            lambda_init: 1e-4,
            max_assoc_dist: 0.1,
            max_assoc_angle: 30.0,
            tau_step: 1e-4,
            min_associations: 100,
            t_k: 0.3,
            theta_k: 20.0,
            max_landmarks: 20_000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageResiduals {
    /// RMS reprojection error over sparse inliers, pixels.
    pub sparse_rms: Option<f64>,
    pub icp_initial: f64,
    pub icp_final: f64,
    pub photo_initial: f64,
    pub photo_final: f64,
    pub joint_initial: f64,
    pub joint_final: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackResult {
    pub pose: Pose,
    /// Left increment from the stage's starting pose.
    pub twist: Twist,
    pub inliers: usize,
    pub residuals: StageResiduals,
    pub accepted: bool,
    /// Finest-level associations at the returned pose.
    pub associations: usize,
    pub iterations: usize,
    /// Finest-level joint cost: initial, after each accepted finest step, final.
    pub trajectory: Vec<f64>,
    /// Norm of the applied increment per iteration, zero when rejected.
    pub step_norms: Vec<f64>,
}

/// Solves `(H + lambda I) x = -g`.
pub fn solve_damped(h: &Matrix6<f64>, g: &Vector6<f64>, lambda: f64) -> Option<Vector6<f64>> {
    let a = h + Matrix6::identity() * lambda;
    let x = match a.cholesky() {
        Some(c) => c.solve(&(-g)),
        None => a.lu().solve(&(-g))?,
    };
    x.iter().all(|v| v.is_finite()).then_some(x)
}

pub fn convergence_check(trajectory: &[f64], step_norms: &[f64], associations: usize, cfg: &TrackingConfig) -> bool {
    let (Some(first), Some(last), Some(step)) = (trajectory.first(), trajectory.last(), step_norms.last()) else {
        return false;
    };
    last <= first && *step < cfg.tau_step && associations >= cfg.min_associations
}

pub fn keyframe_decision(pose: &Pose, last_keyframe: Option<&Pose>, t_k: f64, theta_k_deg: f64) -> bool {
    let Some(kf) = last_keyframe else { return true };
    let rel = kf.inverse() * *pose;
    rel.translation().norm() > t_k || rel.quaternion().angle() > theta_k_deg.to_radians()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LandmarkUpdate {
    pub matched: usize,
    pub inserted: usize,
    pub evicted: usize,
}

/// Matches keyframe features against the map at `pose`, bumps matched
/// landmarks, inserts the unmatched ones that have valid depth and evicts
/// the least recently observed landmarks beyond the cap.
pub fn update_landmarks(
    landmarks: &mut Vec<Landmark>,
    features: &Features,
    frame: &ProcessedFrame,
    pose: &Pose,
    next_id: &mut u64,
    cfg: &TrackingConfig,
) -> LandmarkUpdate {
    let mut out = LandmarkUpdate::default();
    if cfg.max_landmarks == 0 {
        out.evicted = landmarks.len();
        landmarks.clear();
        return out;
    }
    let m = match_2d3d(features, landmarks, pose, &frame.intrinsics, cfg);
    let mut matched = vec![false; features.len()];
    for c in &m.pairs {
        matched[c.keypoint] = true;
        let lm = &mut landmarks[c.landmark];
        lm.observations += 1;
        lm.last_seen = frame.frame_id();
    }
    out.matched = m.len();
    for (i, kp) in features.keypoints.iter().enumerate() {
        if matched[i] || !is_valid_depth(*frame.depth.get(kp.x, kp.y)) {
            continue;
        }
        landmarks.push(Landmark {
            position: pose.transform_point(frame.vertex.get(kp.x, kp.y)),
            descriptor: features.descriptors[i],
            observations: 1,
            last_seen: frame.frame_id(),
            id: *next_id,
        });
        *next_id += 1;
        out.inserted += 1;
    }
    if landmarks.len() > cfg.max_landmarks {
        let excess = landmarks.len() - cfg.max_landmarks;
        let mut order: Vec<usize> = (0..landmarks.len()).collect();
        order.sort_by_key(|&i| (landmarks[i].last_seen, landmarks[i].id));
        let mut drop = vec![false; landmarks.len()];
        for &i in &order[..excess] {
            drop[i] = true;
        }
        let mut i = 0;
        landmarks.retain(|_| {
            i += 1;
            !drop[i - 1]
        });
        out.evicted = excess;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameTracking {
    pub result: TrackResult,
    pub keyframe: bool,
    pub sparse_ok: bool,
    pub features: usize,
    pub matches: usize,
    pub landmarks: LandmarkUpdate,
}

/// Per-sequence tracking state.
#[derive(Clone, Debug)]
pub struct Tracker {
    pub cfg: TrackingConfig,
    landmarks: Vec<Landmark>,
    history: Vec<Pose>,
    last_keyframe: Option<Pose>,
    next_id: u64,
}

impl Tracker {
    pub fn new(cfg: TrackingConfig) -> Self {
        Self { cfg, landmarks: Vec::new(), history: Vec::new(), last_keyframe: None, next_id: 0 }
    }

    pub fn landmarks(&self) -> &[Landmark] {
        &self.landmarks
    }

    pub fn poses(&self) -> &[Pose] {
        &self.history
    }

    /// Constant-velocity prediction from the last two poses.
    pub fn predict(&self) -> Pose {
        match self.history.as_slice() {
            [] => Pose::identity(),
            [p] => *p,
            [.., a, b] => *b * (a.inverse() * *b),
        }
    }

    /// Anchors the first frame at `pose`; it is always a keyframe.
    pub fn initialize(&mut self, frame: &ProcessedFrame, pose: Pose) -> FrameTracking {
        let feats = detect_and_describe(&frame.pyramid[0].intensity, &self.cfg.features);
        let upd = update_landmarks(&mut self.landmarks, &feats, frame, &pose, &mut self.next_id, &self.cfg);
        self.history.push(pose);
        self.last_keyframe = Some(pose);
        FrameTracking {
            result: TrackResult {
                pose,
                twist: Twist::zero(),
                inliers: 0,
                residuals: StageResiduals::default(),
                accepted: true,
                associations: 0,
                iterations: 0,
                trajectory: Vec::new(),
                step_norms: Vec::new(),
            },
            keyframe: true,
            sparse_ok: false,
            features: feats.len(),
            matches: 0,
            landmarks: upd,
        }
    }

    /// Tracks one frame. `render_model` renders the current map at the
    /// given pose; it is called once, at the constant-velocity prediction.
    pub fn track<F>(&mut self, frame: &ProcessedFrame, render_model: F) -> FrameTracking
    where
        F: FnOnce(&Pose) -> RenderOutput,
    {
        if self.history.is_empty() {
            return self.initialize(frame, Pose::identity());
        }
        let cfg = &self.cfg;
        let pred = self.predict();
        let k = &frame.intrinsics;
        let feats = detect_and_describe(&frame.pyramid[0].intensity, &cfg.features);
        let m = match_2d3d(&feats, &self.landmarks, &pred, k, cfg);
        let sparse = sparse_pose_init(&m, &pred, k, cfg).ok();
        let init = sparse.as_ref().map_or(pred, |s| s.pose);
        let render = render_model(&pred);
        let dense = ModelPyramid::from_render(&render, &pred, k, cfg.pyramid_levels.min(frame.pyramid.len()))
            .map(|model| dense_align(frame, &model, &init, cfg));
        if let Some(d) = &dense {
            log::trace!("dense steps {:?} cost {:?}", d.step_norms, d.trajectory);
        }
        let mut result = match dense {
            Some(d) if d.accepted && pose_is_finite(&d.pose) => d,
            Some(d) => TrackResult { pose: init, accepted: false, ..d },
            None => TrackResult {
                pose: init,
                twist: Twist::zero(),
                inliers: 0,
                residuals: StageResiduals::default(),
                accepted: false,
                associations: 0,
                iterations: 0,
                trajectory: Vec::new(),
                step_norms: Vec::new(),
            },
        };
        if !pose_is_finite(&result.pose) {
            result.pose = pred;
        }
        result.twist = log_se3(&(result.pose * pred.inverse())).unwrap_or(Twist::zero());
        result.inliers = sparse.as_ref().map_or(0, |s| s.inliers.len());
        result.residuals.sparse_rms = sparse.as_ref().map(|s| s.rms);
        let pose = result.pose;
        let keyframe = keyframe_decision(&pose, self.last_keyframe.as_ref(), cfg.t_k, cfg.theta_k);
        let upd = if keyframe {
            self.last_keyframe = Some(pose);
            update_landmarks(&mut self.landmarks, &feats, frame, &pose, &mut self.next_id, &self.cfg)
        } else {
            LandmarkUpdate::default()
        };
        self.history.push(pose);
        FrameTracking {
            result,
            keyframe,
            sparse_ok: sparse.is_some(),
            features: feats.len(),
            matches: m.len(),
            landmarks: upd,
        }
    }
}

fn pose_is_finite(p: &Pose) -> bool {
    p.translation().iter().all(|v| v.is_finite()) && p.quaternion().coords.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_se3, rodrigues, Intrinsics, Vec3};
    use crate::image::Image;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn keyframe_examples() {
        let p = Pose::identity();
        assert!(keyframe_decision(&p, None, 0.3, 20.0));
        assert!(!keyframe_decision(&p, Some(&p), 0.3, 20.0));
        let t = Pose::from_translation(Vec3::new(0.31, 0.0, 0.0));
        assert!(keyframe_decision(&t, Some(&p), 0.3, 20.0));
        let t = Pose::from_translation(Vec3::new(0.29, 0.0, 0.0));
        assert!(!keyframe_decision(&t, Some(&p), 0.3, 20.0));
        let r = Pose::from_matrix(&rodrigues(&Vec3::z(), 25f64.to_radians()).unwrap(), Vec3::zeros());
        assert!(keyframe_decision(&r, Some(&p), 0.3, 20.0));
        let r = Pose::from_matrix(&rodrigues(&Vec3::z(), 15f64.to_radians()).unwrap(), Vec3::zeros());
        assert!(!keyframe_decision(&r, Some(&p), 0.3, 20.0));
    }

    #[test]
    fn convergence_examples() {
        let cfg = TrackingConfig::default();
        assert!(convergence_check(&[1.0, 0.5, 0.2, 0.1], &[1e-2, 1e-4, 1e-6], 500, &cfg));
        assert!(!convergence_check(&[1.0, 2.0], &[1e-6], 500, &cfg));
        assert!(!convergence_check(&[1.0, 0.5, 1.5, 0.8, 1.1], &[1e-2, 1e-3, 1e-6], 500, &cfg));
        assert!(!convergence_check(&[1.0, 0.5], &[1e-3], 500, &cfg));
        assert!(!convergence_check(&[1.0, 0.5], &[1e-6], 99, &cfg));
        assert!(!convergence_check(&[1.0], &[], 500, &cfg));
    }

    #[test]
    fn undamped_step_solves_quadratic_exactly() {
        // Linear residual r(x) = A x - b; one Gauss-Newton step from any x0
        // reaches the least-squares minimizer.
        let a = DMatrix::from_fn(12, 6, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0 + if i == j { 10.0 } else { 0.0 });
        let b = DVector::from_fn(12, |i, _| (i as f64 * 0.37).sin());
        let x0 = Vector6::new(0.3, -1.0, 2.0, 0.1, 0.0, -0.5);
        let r0 = &a * DVector::from_column_slice(x0.as_slice()) - &b;
        let jtj = a.transpose() * &a;
        let jtr = a.transpose() * r0;
        let h = Matrix6::from_iterator(jtj.iter().cloned());
        let g = Vector6::from_iterator(jtr.iter().cloned());
        let x1 = x0 + solve_damped(&h, &g, 0.0).unwrap();
        let xs = a.clone().svd(true, true).solve(&b, 1e-14).unwrap();
        for i in 0..6 {
            assert!((x1[i] - xs[i]).abs() < 1e-8, "{} vs {}", x1[i], xs[i]);
        }
    }

    /// Blocky pseudo-random texture, so corners are plentiful but distinct.
    fn textured_frame(id: usize) -> ProcessedFrame {
        let k = Intrinsics::new(200.0, 200.0, 79.5, 59.5, 160, 120, 5000.0).unwrap();
        let color = Image::from_fn_par(160, 120, |x, y| {
            let h = ((x / 7) as u64 * 73_856_093) ^ ((y / 7) as u64 * 19_349_663);
            let v = 0.1 + 0.8 * ((h.wrapping_mul(2_654_435_761) >> 7) % 1000) as f64 / 1000.0;
            Vec3::new(v, v, v)
        });
        let depth = Image::new(160, 120, 2.0);
        ProcessedFrame::from_float(color, depth, &k, 3, id as f64, id).unwrap()
    }

    #[test]
    fn first_keyframe_inserts_every_keypoint_with_depth() {
        let f = textured_frame(0);
        let feats = detect_and_describe(&f.pyramid[0].intensity, &FeatureConfig::default());
        let mut lms = Vec::new();
        let mut id = 0;
        let upd = update_landmarks(&mut lms, &feats, &f, &Pose::identity(), &mut id, &TrackingConfig::default());
        assert!(!feats.is_empty());
        assert_eq!(lms.len(), feats.len());
        assert_eq!(upd.inserted, feats.len());
    }

    #[test]
    fn reobservation_adds_almost_nothing() {
        let f = textured_frame(0);
        let g = textured_frame(1);
        let cfg = TrackingConfig::default();
        let fa = detect_and_describe(&f.pyramid[0].intensity, &cfg.features);
        let mut lms = Vec::new();
        let mut id = 0;
        update_landmarks(&mut lms, &fa, &f, &Pose::identity(), &mut id, &cfg);
        let n0 = lms.len();
        let upd = update_landmarks(&mut lms, &fa, &g, &Pose::identity(), &mut id, &cfg);
        assert!(upd.inserted as f64 <= 0.05 * n0 as f64, "{} new of {n0}", upd.inserted);
        assert!(lms.iter().any(|l| l.observations == 2 && l.last_seen == 1));
    }

    #[test]
    fn zero_cap_keeps_map_empty() {
        let f = textured_frame(0);
        let cfg = TrackingConfig { max_landmarks: 0, ..Default::default() };
        let mut tr = Tracker::new(cfg);
        tr.initialize(&f, Pose::identity());
        assert!(tr.landmarks().is_empty());
        let out = tr.track(&textured_frame(1), |_| RenderOutput::empty(160, 120));
        assert!(!out.sparse_ok);
        assert!(tr.landmarks().is_empty());
    }

    #[test]
    fn cap_evicts_oldest_unobserved() {
        let f = textured_frame(10);
        let cfg = TrackingConfig { max_landmarks: 5, ..Default::default() };
        let feats = detect_and_describe(&f.pyramid[0].intensity, &cfg.features);
        let mut lms: Vec<Landmark> = (0..5)
            .map(|i| Landmark {
                position: Vec3::new(100.0, 0.0, 0.0),
                descriptor: [0; 4],
                observations: 1,
                last_seen: i,
                id: i as u64,
            })
            .collect();
        let mut id = 5;
        update_landmarks(&mut lms, &feats, &f, &Pose::identity(), &mut id, &cfg);
        assert_eq!(lms.len(), 5);
        assert!(lms.iter().all(|l| l.last_seen == 10));
    }

    #[test]
    fn constant_velocity_prediction() {
        let mut tr = Tracker::new(TrackingConfig::default());
        let a = Pose::from_translation(Vec3::new(0.0, 0.0, 0.0));
        let step = exp_se3(&Twist::new(Vec3::new(0.01, 0.0, 0.0), Vec3::new(0.0, 0.01, 0.0)));
        let b = a * step;
        tr.history = vec![a, b];
        assert!(tr.predict().distance_to(&(b * step)) < 1e-12);
        assert!(tr.predict().angle_to(&(b * step)) < 1e-12);
    }

    #[test]
    fn failed_stages_return_finite_prediction() {
        let mut tr = Tracker::new(TrackingConfig::default());
        tr.initialize(&textured_frame(0), Pose::identity());
        let out = tr.track(&textured_frame(1), |_| RenderOutput::empty(160, 120));
        assert!(!out.result.accepted);
        assert!(pose_is_finite(&out.result.pose));
    }
}
