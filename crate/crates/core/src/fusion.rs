//! Information-filter fusion of per-frame vertex/normal measurements into
//! surfel geometry.

use nalgebra::{Matrix6, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{is_valid_depth, ProcessedFrame};
use crate::geometry::{project, rotation_between_normals, Intrinsics, Pose, Vec2, Vec3, EPS_PARALLEL};
use crate::raster::RenderOutput;
use crate::surfel::{select_surface, select_visible, Surfel, SurfelMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("information matrix has a zero component")]
    Uninitialized,
    #[error("normal block of the state is zero")]
    DegenerateState,
    #[error("noise parameters must be positive")]
    InvalidNoise,
    #[error("measurement noise must be positive and per-block isotropic")]
    NonIsotropicNoise,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseParams {
    pub kappa_p: f64,
    pub kappa_n: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self { kappa_p: 0.002, kappa_n: 0.02 }
    }
}

impl NoiseParams {
    pub fn new(kappa_p: f64, kappa_n: f64) -> Result<Self, FusionError> {
        let np = Self { kappa_p, kappa_n };
        np.validate()?;
        Ok(np)
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if self.kappa_p > 0.0 && self.kappa_n > 0.0 && self.kappa_p.is_finite() && self.kappa_n.is_finite() {
            Ok(())
        } else {
            Err(FusionError::InvalidNoise)
        }
    }

    #[inline]
    pub fn sigma_p(&self, d: f64) -> f64 {
        self.kappa_p * d * d
    }

    #[inline]
    pub fn sigma_n(&self, d: f64) -> f64 {
        self.kappa_n * d * d
    }

    /// Diagonal of `Sigma_z^-1` at depth `d`.
    pub fn information(&self, d: f64) -> Vector6<f64> {
        noise_covariance(d, self).map(|v| 1.0 / v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Measurement {
    pub z: Vector6<f64>,
    pub u: Vec2,
    pub d: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterUpdate {
    pub lambda: Vector6<f64>,
    pub eta: Vector6<f64>,
    pub x_hat: Vector6<f64>,
    pub sigma_hat: Vector6<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Surface thickness for selection and re-measurement, meters.
    pub delta_s: f64,
    /// Use the dense `H^T Lambda_z H` update instead of the diagonal shortcut.
    pub full_information: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { delta_s: 0.03, full_information: false }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FusionStats {
    pub fused: usize,
    pub skipped_invalid: usize,
    pub skipped_occluded: usize,
    pub degenerate: usize,
    pub mean_position_change: f64,
}

/// `H = blockdiag(R, R)` and `t_bar = [t; 0]` for the world-to-camera
/// transform `[R | t]` of a camera-to-world pose.
pub fn observation_matrix(pose: &Pose) -> (Matrix6<f64>, Vector6<f64>) {
    let w2c = pose.inverse();
    let r = w2c.rotation_matrix();
    let mut h = Matrix6::zeros();
    h.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    h.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    let mut t = Vector6::zeros();
    t.fixed_rows_mut::<3>(0).copy_from(&w2c.translation());
    (h, t)
}

/// Variances `[kp^2 d^4 x3, kn^2 d^4 x3]`.
pub fn noise_covariance(d: f64, np: &NoiseParams) -> Vector6<f64> {
    let vp = np.sigma_p(d).powi(2);
    let vn = np.sigma_n(d).powi(2);
    Vector6::new(vp, vp, vp, vn, vn, vn)
}

fn block_isotropic(s: &Vector6<f64>) -> bool {
    s.iter().all(|v| *v > 0.0 && v.is_finite()) && s[0] == s[1] && s[1] == s[2] && s[3] == s[4] && s[4] == s[5]
}

fn solve_diag(lambda: Vector6<f64>, eta: Vector6<f64>) -> Result<FilterUpdate, FusionError> {
    if lambda.iter().any(|l| *l <= 0.0) {
        return Err(FusionError::Uninitialized);
    }
    Ok(FilterUpdate { lambda, eta, x_hat: eta.component_div(&lambda), sigma_hat: lambda.map(|l| 1.0 / l) })
}

/// Diagonal information update for per-block isotropic noise with a
/// block-rotation observation matrix.
pub fn info_update(
    lambda: &Vector6<f64>,
    eta: &Vector6<f64>,
    z: &Measurement,
    h: &Matrix6<f64>,
    t_bar: &Vector6<f64>,
    sigma_z: &Vector6<f64>,
) -> Result<FilterUpdate, FusionError> {
    if !block_isotropic(sigma_z) {
        return Err(FusionError::NonIsotropicNoise);
    }
    let lz = sigma_z.map(|v| 1.0 / v);
    let innov = h.transpose() * lz.component_mul(&(z.z - t_bar));
    solve_diag(lambda + lz, eta + innov)
}

/// Dense update `Lambda + H^T Lambda_z H` on a full 6x6 information matrix.
pub fn info_update_full(
    lambda: &Matrix6<f64>,
    eta: &Vector6<f64>,
    z: &Measurement,
    h: &Matrix6<f64>,
    t_bar: &Vector6<f64>,
    sigma_z: &Vector6<f64>,
) -> Result<(Matrix6<f64>, Vector6<f64>, Vector6<f64>), FusionError> {
    if sigma_z.iter().any(|v| !(*v > 0.0)) {
        return Err(FusionError::NonIsotropicNoise);
    }
    let lz = Matrix6::from_diagonal(&sigma_z.map(|v| 1.0 / v));
    let l2 = lambda + h.transpose() * lz * h;
    let e2 = eta + h.transpose() * lz * (z.z - t_bar);
    let x = l2.cholesky().ok_or(FusionError::Uninitialized)?.solve(&e2);
    Ok((l2, e2, x))
}

/// Writes the filter mean back into the surfel's geometry. On error the
/// surfel is untouched.
pub fn apply_state(surfel: &mut Surfel, x_hat: &Vector6<f64>) -> Result<(), FusionError> {
    if x_hat.iter().any(|v| !v.is_finite()) {
        return Err(FusionError::DegenerateState);
    }
    let n_raw = Vec3::new(x_hat[3], x_hat[4], x_hat[5]);
    let len = n_raw.norm();
    if len == 0.0 {
        return Err(FusionError::DegenerateState);
    }
    let n_t = n_raw / len;
    let n_g = surfel.normal();
    surfel.position = Vec3::new(x_hat[0], x_hat[1], x_hat[2]);
    let cross = n_g.cross(&n_t).norm();
    let angle = cross.atan2(n_g.dot(&n_t));
    if angle >= EPS_PARALLEL {
        let dr = rotation_between_normals(&n_g, &n_t);
        let r = dr * surfel.rotation_matrix();
        surfel.rotation = Pose::from_matrix(&r, Vec3::zeros()).quaternion().to_owned();
    }
    for i in 0..3 {
        surfel.eta[i] = surfel.lambda[i] * x_hat[i];
        surfel.eta[3 + i] = surfel.lambda[3 + i] * n_t[i];
    }
    Ok(())
}

fn measurement_at(frame: &ProcessedFrame, k: &Intrinsics, u: &Vec2) -> Option<Measurement> {
    let (px, py) = k.pixel_index(u)?;
    let d0 = *frame.depth.get(px, py);
    if !is_valid_depth(d0) || !*frame.valid.get(px, py) {
        return None;
    }
    // Bilinear in inverse depth.
    let x0 = u.x.floor();
    let y0 = u.y.floor();
    let (ix, iy) = (x0 as isize, y0 as isize);
    let mut d = d0;
    let mut n = *frame.normal.get(px, py);
    if ix >= 0 && iy >= 0 && (ix as usize) + 1 < frame.width() && (iy as usize) + 1 < frame.height() {
        let (ix, iy) = (ix as usize, iy as usize);
        let corners = [(ix, iy), (ix + 1, iy), (ix, iy + 1), (ix + 1, iy + 1)];
        if corners.iter().all(|&(x, y)| *frame.valid.get(x, y)) {
            let ds: Vec<f64> = corners.iter().map(|&(x, y)| *frame.depth.get(x, y)).collect();
            let lo = ds.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = ds.iter().cloned().fold(0.0, f64::max);
            if hi - lo < 0.05 * lo {
                let fx = u.x - x0;
                let fy = u.y - y0;
                let w = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
                let inv: f64 = (0..4).map(|i| w[i] / ds[i]).sum();
                let nsum: Vec3 = (0..4).map(|i| *frame.normal.get(corners[i].0, corners[i].1) * w[i]).sum();
                if inv > 0.0 && nsum.norm() > 1e-6 {
                    d = 1.0 / inv;
                    n = nsum.normalize();
                }
            }
        }
    }
    let v = k.ray(u.x, u.y) * d;
    Some(Measurement { z: Vector6::new(v.x, v.y, v.z, n.x, n.y, n.z), u: *u, d })
}

enum Outcome {
    Fused(Box<Surfel>, f64),
    Invalid,
    Occluded,
    Degenerate,
}

/// One fusion pass over the surfels lying on the rendered surface.
pub fn fuse_frame(
    map: &mut SurfelMap,
    frame: &ProcessedFrame,
    pose: &Pose,
    render: &RenderOutput,
    np: &NoiseParams,
    cfg: &FusionConfig,
) -> FusionStats {
    let k = &frame.intrinsics;
    let vis = select_visible(map, pose, k);
    let surf = select_surface(map, &vis, &render.depth, pose, k, cfg.delta_s);
    let w2c = pose.inverse();
    let (h, t_bar) = observation_matrix(pose);
    let frame_id = frame.frame_id();
    let snapshot: &SurfelMap = map;
    let outcomes: Vec<(usize, Outcome)> = surf
        .par_iter()
        .map(|&id| {
            let s = snapshot.get(id);
            let pc = w2c.transform_point(&s.position);
            let Ok(u) = project(k, &pc) else { return (id, Outcome::Invalid) };
            let Some(m) = measurement_at(frame, k, &u) else {
                return (id, Outcome::Invalid);
            };
            if (m.d - pc.z).abs() >= cfg.delta_s {
                return (id, Outcome::Occluded);
            }
            let sigma = noise_covariance(m.d, np);
            let upd = if cfg.full_information {
                info_update_full(&Matrix6::from_diagonal(&s.lambda), &s.eta, &m, &h, &t_bar, &sigma)
                    .map(|(l, e, x)| (l.diagonal(), e, x))
            } else {
                info_update(&s.lambda, &s.eta, &m, &h, &t_bar, &sigma).map(|u| (u.lambda, u.eta, u.x_hat))
            };
            let Ok((lambda, eta, x)) = upd else { return (id, Outcome::Degenerate) };
            let mut next = s.clone();
            next.lambda = lambda;
            next.eta = eta;
            if apply_state(&mut next, &x).is_err() {
                return (id, Outcome::Degenerate);
            }
            next.set_anchor_from_state();
            next.last_observed = frame_id;
            let change = (next.position - s.position).norm();
            (id, Outcome::Fused(Box::new(next), change))
        })
        .collect();

    let mut stats = FusionStats::default();
    let mut total_change = 0.0;
    let mut batch = Vec::with_capacity(outcomes.len());
    for (id, o) in outcomes {
        match o {
            Outcome::Fused(s, c) => {
                stats.fused += 1;
                total_change += c;
                batch.push((id, *s));
            }
            Outcome::Invalid => stats.skipped_invalid += 1,
            Outcome::Occluded => stats.skipped_occluded += 1,
            Outcome::Degenerate => stats.degenerate += 1,
        }
    }
    if stats.fused > 0 {
        stats.mean_position_change = total_change / stats.fused as f64;
    }
    map.update(batch);
    stats
}
