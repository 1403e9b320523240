//! 2D-3D matching against the landmark map and robust reprojection pose
//! initialization.

use nalgebra::{Matrix2x3, Matrix2x6, Matrix6, Vector2, Vector6};

use super::features::{hamming, Descriptor, Features};
use super::{solve_damped, TrackingConfig, TrackingError};
use crate::geometry::{exp_se3, log_se3, skew, Intrinsics, Pose, Twist, Vec2, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub struct Landmark {
    pub position: Vec3,
    pub descriptor: Descriptor,
    pub observations: u32,
    /// Frame id of the most recent observation.
    pub last_seen: usize,
    /// Insertion order; breaks eviction ties.
    pub id: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub u: Vec2,
    pub x_w: Vec3,
    pub landmark: usize,
    pub keypoint: usize,
    pub distance: u32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseResult {
    pub pose: Pose,
    /// Left increment from the prior: `pose = exp(twist) * prior`.
    pub twist: Twist,
    /// Indices into the correspondence set.
    pub inliers: Vec<usize>,
    /// RMS reprojection error over inliers, pixels.
    pub rms: f64,
}

/// Projects every landmark with `prior` and matches it to the keypoint with
/// the smallest Hamming distance inside a square search window. A keypoint
/// is assigned to at most one landmark, best distance first.
pub fn match_2d3d(
    features: &Features,
    landmarks: &[Landmark],
    prior: &Pose,
    k: &Intrinsics,
    cfg: &TrackingConfig,
) -> CorrespondenceSet {
    if landmarks.is_empty() || features.is_empty() {
        return CorrespondenceSet::default();
    }
    let w2c = prior.inverse();
    let r = cfg.search_radius as i64;
    let mut cands: Vec<(u32, usize, usize)> = Vec::new();
    for (li, lm) in landmarks.iter().enumerate() {
        let xc = w2c.transform_point(&lm.position);
        let Ok(u) = crate::geometry::project(k, &xc) else { continue };
        if !k.contains(&u) {
            continue;
        }
        let (px, py) = (u.x.round() as i64, u.y.round() as i64);
        let mut best = (u32::MAX, usize::MAX);
        let mut second = u32::MAX;
        for (ki, kp) in features.keypoints.iter().enumerate() {
            if (kp.x as i64 - px).abs() > r || (kp.y as i64 - py).abs() > r {
                continue;
            }
            let d = hamming(&lm.descriptor, &features.descriptors[ki]);
            if d < best.0 {
                second = best.0;
                best = (d, ki);
            } else if d < second {
                second = d;
            }
        }
        if best.1 == usize::MAX || best.0 > cfg.max_hamming {
            continue;
        }
        if second != u32::MAX && best.0 as f64 >= cfg.ratio * second as f64 {
            continue;
        }
        cands.push((best.0, li, best.1));
    }
    cands.sort_unstable();
    let mut used = vec![false; features.len()];
    let mut pairs = Vec::new();
    for (d, li, ki) in cands {
        if used[ki] {
            continue;
        }
        used[ki] = true;
        let kp = &features.keypoints[ki];
        pairs.push(Correspondence {
            u: Vec2::new(kp.x as f64, kp.y as f64),
            x_w: landmarks[li].position,
            landmark: li,
            keypoint: ki,
            distance: d,
        });
    }
    CorrespondenceSet { pairs }
}

fn huber_cost(e2: f64, tau: f64) -> f64 {
    if e2 <= tau * tau {
        e2
    } else {
        2.0 * tau * e2.sqrt() - tau * tau
    }
}

/// Residual `pi(T^-1 X) - u` and its Jacobian w.r.t. a left perturbation of
/// the camera-to-world pose `T`.
fn reproject(pose_w2c: &Pose, r_cw: &nalgebra::Matrix3<f64>, k: &Intrinsics, c: &Correspondence) -> Option<(Vector2<f64>, Matrix2x6<f64>)> {
    let xc = pose_w2c.transform_point(&c.x_w);
    if xc.z <= 1e-6 {
        return None;
    }
    let iz = 1.0 / xc.z;
    let u = Vector2::new(k.fx * xc.x * iz + k.cx, k.fy * xc.y * iz + k.cy);
    let jp = Matrix2x3::new(k.fx * iz, 0.0, -k.fx * xc.x * iz * iz, 0.0, k.fy * iz, -k.fy * xc.y * iz * iz);
    let mut j = Matrix2x6::zeros();
    j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jp * (-r_cw)));
    j.fixed_view_mut::<2, 3>(0, 3).copy_from(&(jp * r_cw * skew(&c.x_w)));
    Some((u - c.u, j))
}

/// Total robust cost and the number of points in front of the camera.
fn robust_cost(pose: &Pose, k: &Intrinsics, pairs: &[&Correspondence], tau: f64) -> f64 {
    let w2c = pose.inverse();
    pairs
        .iter()
        .map(|c| {
            let xc = w2c.transform_point(&c.x_w);
            if xc.z <= 1e-6 {
                // Points behind the camera cost as much as a far outlier.
                return huber_cost(1e8, tau);
            }
            let u = Vec2::new(k.fx * xc.x / xc.z + k.cx, k.fy * xc.y / xc.z + k.cy);
            huber_cost((u - c.u).norm_squared(), tau)
        })
        .sum()
}

fn lm_refine(start: &Pose, k: &Intrinsics, pairs: &[&Correspondence], tau: f64, cfg: &TrackingConfig) -> Pose {
    let mut pose = *start;
    let mut lambda = cfg.lambda_init;
    let mut cost = robust_cost(&pose, k, pairs, tau);
    for _ in 0..cfg.sparse_max_iters {
        let w2c = pose.inverse();
        let r_cw = w2c.rotation_matrix();
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for c in pairs {
            let Some((e, j)) = reproject(&w2c, &r_cw, k, c) else { continue };
            let n = e.norm();
            let w = if n <= tau { 1.0 } else { tau / n };
            h += j.transpose() * j * w;
            g += j.transpose() * e * w;
        }
        let Some(step) = solve_damped(&h, &g, lambda) else { break };
        let cand = exp_se3(&Twist(step)) * pose;
        let new_cost = robust_cost(&cand, k, pairs, tau);
        if new_cost < cost {
            pose = cand;
            cost = new_cost;
            lambda = (lambda / 10.0).max(1e-12);
        } else {
            lambda *= 10.0;
        }
        if step.norm() < 1e-12 || lambda > 1e8 {
            break;
        }
    }
    pose
}

/// Huber-robust LM on reprojection error, followed by a refit restricted to
/// the inliers of the robust solution.
pub fn sparse_pose_init(
    m: &CorrespondenceSet,
    prior: &Pose,
    k: &Intrinsics,
    cfg: &TrackingConfig,
) -> Result<SparseResult, TrackingError> {
    if m.len() < 4 {
        return Err(TrackingError::TooFewCorrespondences(m.len()));
    }
    let all: Vec<&Correspondence> = m.pairs.iter().collect();
    let robust = lm_refine(prior, k, &all, cfg.huber_px, cfg);
    let inliers_of = |pose: &Pose| -> Vec<usize> {
        let w2c = pose.inverse();
        m.pairs
            .iter()
            .enumerate()
            .filter(|(_, c)| {
                let xc = w2c.transform_point(&c.x_w);
                xc.z > 1e-6 && {
                    let u = Vec2::new(k.fx * xc.x / xc.z + k.cx, k.fy * xc.y / xc.z + k.cy);
                    (u - c.u).norm() < cfg.inlier_px
                }
            })
            .map(|(i, _)| i)
            .collect()
    };
    let inl = inliers_of(&robust);
    if inl.len() < cfg.min_inliers {
        return Err(TrackingError::TooFewInliers(inl.len()));
    }
    let subset: Vec<&Correspondence> = inl.iter().map(|&i| &m.pairs[i]).collect();
    let pose = lm_refine(&robust, k, &subset, f64::INFINITY, cfg);
    let inliers = inliers_of(&pose);
    if inliers.len() < cfg.min_inliers {
        return Err(TrackingError::TooFewInliers(inliers.len()));
    }
    let w2c = pose.inverse();
    let sq: f64 = inliers
        .iter()
        .map(|&i| {
            let c = &m.pairs[i];
            let xc = w2c.transform_point(&c.x_w);
            (Vec2::new(k.fx * xc.x / xc.z + k.cx, k.fy * xc.y / xc.z + k.cy) - c.u).norm_squared()
        })
        .sum();
    let twist = log_se3(&(pose * prior.inverse())).map_err(|_| TrackingError::Diverged)?;
    Ok(SparseResult { pose, twist, rms: (sq / inliers.len() as f64).sqrt(), inliers })
}
