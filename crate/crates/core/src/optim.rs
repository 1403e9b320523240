//! Loss stack, analytic backward pass through the compositor, and the Adam
//! refinement loop over a sliding keyframe window.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::{Matrix3, UnitQuaternion, Vector2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{is_valid_depth, ProcessedFrame};
use crate::geometry::{Intrinsics, Pose, Vec3};
use crate::raster::{intersect, render_tiled, RenderOptions, RenderOutput, ALPHA_MAX, EPS_PX};
use crate::sh::{self, SH_COEFFS};
use crate::surfel::{Surfel, SurfelMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("no valid pixels for the {0} loss")]
    EmptyDomain(&'static str),
    #[error("render was produced without contributor lists")]
    MissingContributors,
    #[error("loss weights must be finite and non-negative")]
    InvalidWeights,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_d: f64,
    pub w_n: f64,
    pub w_reg: f64,
    pub w_reg_n: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_d: 0.5, w_n: 0.1, w_reg: 1.0, w_reg_n: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), OptimError> {
        let ok = [self.w_d, self.w_n, self.w_reg, self.w_reg_n].iter().all(|w| w.is_finite() && *w >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(OptimError::InvalidWeights)
        }
    }

    pub fn color_only() -> Self {
        Self { w_d: 0.0, w_n: 0.0, w_reg: 0.0, w_reg_n: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub position: f64,
    pub rotation: f64,
    pub log_scale: f64,
    pub logit_opacity: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { position: 1e-4, rotation: 1e-3, log_scale: 1e-3, logit_opacity: 5e-2, color: 2.5e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub weights: LossWeights,
    pub learning_rates: LearningRates,
    pub n_batch: usize,
    /// Iterations per keyframe in the window.
    pub m: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            learning_rates: LearningRates::default(),
            n_batch: 8,
            m: 2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-15,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub color: f64,
    pub depth: f64,
    pub normal: f64,
    pub reg: f64,
    pub total: f64,
}

#[inline]
fn color_domain(render: &RenderOutput, i: usize) -> bool {
    render.alpha.as_slice()[i] >= EPS_PX
}

#[inline]
fn depth_domain(render: &RenderOutput, frame: &ProcessedFrame, i: usize) -> bool {
    is_valid_depth(frame.depth.as_slice()[i]) && is_valid_depth(render.depth.as_slice()[i])
}

#[inline]
fn normal_domain(render: &RenderOutput, frame: &ProcessedFrame, i: usize) -> bool {
    frame.normal.as_slice()[i].norm_squared() > 0.0 && render.alpha.as_slice()[i] >= EPS_PX
}

fn check_dims(render: &RenderOutput, frame: &ProcessedFrame) {
    assert_eq!((render.width(), render.height()), (frame.width(), frame.height()), "render and frame differ in size");
}

/// Mean L1 color error over channels and covered pixels.
pub fn loss_photometric(render: &RenderOutput, frame: &ProcessedFrame) -> Result<f64, OptimError> {
    check_dims(render, frame);
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..frame.color.len() {
        if color_domain(render, i) {
            sum += (frame.color.as_slice()[i] - render.color.as_slice()[i]).abs().sum();
            n += 1;
        }
    }
    if n == 0 {
        return Err(OptimError::EmptyDomain("color"));
    }
    Ok(sum / (3 * n) as f64)
}

pub fn loss_depth(render: &RenderOutput, frame: &ProcessedFrame) -> Result<f64, OptimError> {
    check_dims(render, frame);
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..frame.depth.len() {
        if depth_domain(render, frame, i) {
            sum += (frame.depth.as_slice()[i] - render.depth.as_slice()[i]).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(OptimError::EmptyDomain("depth"));
    }
    Ok(sum / n as f64)
}

pub fn loss_normal(render: &RenderOutput, frame: &ProcessedFrame) -> Result<f64, OptimError> {
    check_dims(render, frame);
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..frame.normal.len() {
        if normal_domain(render, frame, i) {
            sum += (1.0 - frame.normal.as_slice()[i].dot(&render.normal.as_slice()[i])).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(OptimError::EmptyDomain("normal"));
    }
    Ok(sum / n as f64)
}

/// Mean anchor deviation over `ids`; zero for an empty set.
pub fn loss_reg(surfels: &[Surfel], ids: &[usize], w_reg_n: f64) -> f64 {
    if ids.is_empty() {
        return 0.0;
    }
    let sum: f64 = ids
        .iter()
        .map(|&i| {
            let s = &surfels[i];
            (s.position - s.anchor_position).norm() + w_reg_n * (1.0 - s.normal().dot(&s.anchor_normal)).abs()
        })
        .sum();
    sum / ids.len() as f64
}

fn optimized_ids(render: &RenderOutput) -> Vec<usize> {
    render.contributors.as_ref().map(|c| c.footprints.iter().map(|f| f.surfel_id).collect()).unwrap_or_default()
}

pub fn total_loss(
    render: &RenderOutput,
    frame: &ProcessedFrame,
    surfels: &[Surfel],
    w: &LossWeights,
) -> Result<LossBreakdown, OptimError> {
    let color = loss_photometric(render, frame)?;
    let depth = if w.w_d > 0.0 { loss_depth(render, frame)? } else { 0.0 };
    let normal = if w.w_n > 0.0 { loss_normal(render, frame)? } else { 0.0 };
    let reg = if w.w_reg > 0.0 { loss_reg(surfels, &optimized_ids(render), w.w_reg_n) } else { 0.0 };
    let total = color + w.w_d * depth + w.w_n * normal + w.w_reg * reg;
    Ok(LossBreakdown { color, depth, normal, reg, total })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SurfelGrad {
    pub p: Vec3,
    pub s: Vector2<f64>,
    /// Left-perturbation tangent vector, world frame.
    pub r: Vec3,
    pub o: f64,
    pub sh: [Vec3; SH_COEFFS],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    /// Surfel ids, parallel to `grads`.
    pub ids: Vec<usize>,
    pub grads: Vec<SurfelGrad>,
    pub loss: LossBreakdown,
}

/// Camera-frame accumulators for one footprint.
#[derive(Clone, Copy, Debug, Default)]
struct FpAcc {
    center: Vec3,
    axis_u: Vec3,
    axis_v: Vec3,
    normal: Vec3,
    scale: Vector2<f64>,
    opacity: f64,
    color: Vec3,
}

impl FpAcc {
    fn add(&mut self, o: &FpAcc) {
        self.center += o.center;
        self.axis_u += o.axis_u;
        self.axis_v += o.axis_v;
        self.normal += o.normal;
        self.scale += o.scale;
        self.opacity += o.opacity;
        self.color += o.color;
    }
}

const BACKWARD_CHUNKS: usize = 8;
/// Residuals this small are rounding noise and get a zero subgradient.
pub const RESIDUAL_DEADZONE: f64 = 1e-9;

#[inline]
fn sgn(x: f64) -> f64 {
    if x > RESIDUAL_DEADZONE {
        1.0
    } else if x < -RESIDUAL_DEADZONE {
        -1.0
    } else {
        0.0
    }
}

struct Upstream {
    color: Vec3,
    depth: f64,
    normal_num: Vec3,
}

#[allow(clippy::too_many_arguments)]
fn backward_pixel(
    i: usize,
    render: &RenderOutput,
    frame: &ProcessedFrame,
    k: &Intrinsics,
    up: &Upstream,
    acc: &mut [FpAcc],
    items: &mut Vec<(usize, crate::raster::SplatHit, f64, f64)>,
) {
    let c = render.contributors.as_ref().unwrap();
    let list = c.pixel(i);
    if list.is_empty() {
        return;
    }
    let w = frame.width();
    let ray = k.ray((i % w) as f64, (i / w) as f64);
    items.clear();
    for e in list {
        let fp = &c.footprints[e.footprint as usize];
        let hit = intersect(fp, &ray).expect("contributor must intersect its pixel ray");
        items.push((e.footprint as usize, hit, e.alpha, e.transmittance));
    }
    let last = items.last().unwrap();
    let t_final = last.3 * (1.0 - last.2);
    let a_acc = 1.0 - t_final;
    let d_hat = render.depth.as_slice()[i];
    let mut s_c = Vec3::zeros();
    let mut s_d = 0.0;
    let mut s_n = Vec3::zeros();
    for &(fi, hit, alpha, t) in items.iter().rev() {
        let fp = &c.footprints[fi];
        let wt = t * alpha;
        let inv1m = 1.0 / (1.0 - alpha);
        let mut g_alpha = up.color.dot(&(fp.color * t - s_c * inv1m)) + up.normal_num.dot(&(fp.normal * t - s_n * inv1m));
        let mut g_depth = 0.0;
        if up.depth != 0.0 {
            g_alpha += up.depth * ((t * hit.depth - s_d * inv1m) / a_acc - d_hat * t_final * inv1m / a_acc);
            g_depth = up.depth * wt / a_acc;
        }
        s_c += fp.color * wt;
        s_d += hit.depth * wt;
        s_n += fp.normal * wt;

        let g = &mut acc[fi];
        g.color += up.color * wt;
        g.normal += up.normal_num * wt;

        let gw = hit.weight;
        let (g_g, g_o) = if gw * fp.opacity > ALPHA_MAX { (0.0, 0.0) } else { (g_alpha * fp.opacity, g_alpha * gw) };
        g.opacity += g_o;
        let g_a = -g_g * hit.a * gw;
        let g_b = -g_g * hit.b * gw;
        let diff = ray * hit.depth - fp.center;
        let g_diff = fp.axis_u * (g_a / fp.scale.x) + fp.axis_v * (g_b / fp.scale.y);
        g.axis_u += diff * (g_a / fp.scale.x);
        g.axis_v += diff * (g_b / fp.scale.y);
        g.scale.x -= g_a * hit.a / fp.scale.x;
        g.scale.y -= g_b * hit.b / fp.scale.y;
        let g_lambda = g_diff.dot(&ray) + g_depth;
        g.center += -g_diff + fp.normal * (g_lambda / hit.denom);
        g.normal -= diff * (g_lambda / hit.denom);
    }
}

/// Analytic gradient of [`total_loss`] with respect to every surfel that
/// reached the render.
pub fn backward(
    render: &RenderOutput,
    frame: &ProcessedFrame,
    map: &SurfelMap,
    pose: &Pose,
    w: &LossWeights,
) -> Result<Gradients, OptimError> {
    let contrib = render.contributors.as_ref().ok_or(OptimError::MissingContributors)?;
    let loss = total_loss(render, frame, map.surfels(), w)?;
    let k = &frame.intrinsics;
    let npx = frame.width() * frame.height();
    let (mut nc, mut nd, mut nn) = (0usize, 0usize, 0usize);
    for i in 0..npx {
        nc += color_domain(render, i) as usize;
        nd += depth_domain(render, frame, i) as usize;
        nn += normal_domain(render, frame, i) as usize;
    }
    let nfp = contrib.footprints.len();
    let chunk = npx.div_ceil(BACKWARD_CHUNKS).max(1);
    let partials: Vec<Vec<FpAcc>> = (0..BACKWARD_CHUNKS)
        .into_par_iter()
        .map(|ci| {
            let mut acc = vec![FpAcc::default(); nfp];
            let mut items = Vec::new();
            for i in ci * chunk..((ci + 1) * chunk).min(npx) {
                let mut up = Upstream { color: Vec3::zeros(), depth: 0.0, normal_num: Vec3::zeros() };
                if color_domain(render, i) {
                    let r = frame.color.as_slice()[i] - render.color.as_slice()[i];
                    up.color = -r.map(sgn) / (3 * nc) as f64;
                }
                if w.w_d > 0.0 && depth_domain(render, frame, i) {
                    up.depth = -w.w_d * sgn(frame.depth.as_slice()[i] - render.depth.as_slice()[i]) / nd as f64;
                }
                if w.w_n > 0.0 && normal_domain(render, frame, i) {
                    let n_hat = render.normal.as_slice()[i];
                    let g_hat = -frame.normal.as_slice()[i] * (w.w_n / nn as f64);
                    let list = contrib.pixel(i);
                    let num: Vec3 =
                        list.iter().map(|e| contrib.footprints[e.footprint as usize].normal * (e.transmittance * e.alpha)).sum();
                    let len = num.norm();
                    if len > 0.0 {
                        up.normal_num = (Matrix3::identity() - n_hat * n_hat.transpose()) * g_hat / len;
                    }
                }
                if up.color == Vec3::zeros() && up.depth == 0.0 && up.normal_num == Vec3::zeros() {
                    continue;
                }
                backward_pixel(i, render, frame, k, &up, &mut acc, &mut items);
            }
            acc
        })
        .collect();
    let mut acc = vec![FpAcc::default(); nfp];
    for p in &partials {
        for (a, b) in acc.iter_mut().zip(p.iter()) {
            a.add(b);
        }
    }

    let r_cw = pose.inverse().rotation_matrix();
    let r_wc = r_cw.transpose();
    let nreg = nfp.max(1) as f64;
    let mut ids = Vec::with_capacity(nfp);
    let mut grads = Vec::with_capacity(nfp);
    for (fp, a) in contrib.footprints.iter().zip(acc.iter()) {
        let s = map.get(fp.surfel_id);
        let rs = s.rotation_matrix();
        let tu: Vec3 = rs.column(0).into();
        let tv: Vec3 = rs.column(1).into();
        let n: Vec3 = rs.column(2).into();
        let mut g = SurfelGrad { p: r_wc * a.center, s: a.scale, o: a.opacity, ..Default::default() };
        g.r = tu.cross(&(r_wc * a.axis_u)) + tv.cross(&(r_wc * a.axis_v)) + n.cross(&(r_wc * a.normal));

        let mut g_raw = a.color;
        for ch in 0..3 {
            if !fp.color_active[ch] {
                g_raw[ch] = 0.0;
            }
        }
        let basis = sh::basis(&fp.view_dir);
        let dbasis = sh::basis_gradient();
        let mut g_dir = Vec3::zeros();
        for kk in 0..sh::active_coeffs(contrib.sh_degree) {
            g.sh[kk] = g_raw * basis[kk];
            g_dir += dbasis[kk] * g_raw.dot(&s.sh[kk]);
        }
        let d = fp.view_dir;
        g.p += (g_dir - d * d.dot(&g_dir)) / fp.view_dist;

        if w.w_reg > 0.0 {
            let dp = s.position - s.anchor_position;
            let len = dp.norm();
            if len > 0.0 {
                g.p += dp * (w.w_reg / (len * nreg));
            }
            g.r += s.anchor_normal.cross(&n) * (w.w_reg * w.w_reg_n / nreg);
        }
        ids.push(fp.surfel_id);
        grads.push(g);
    }
    Ok(Gradients { ids, grads, loss })
}

/// Most recent keyframes used for batch refinement.
#[derive(Clone, Debug)]
pub struct KeyframeWindow {
    capacity: usize,
    frames: VecDeque<(Arc<ProcessedFrame>, Pose)>,
}

impl KeyframeWindow {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), frames: VecDeque::new() }
    }

    pub fn push(&mut self, frame: Arc<ProcessedFrame>, pose: Pose) {
        if self.frames.len() == self.capacity {
            self.frames.pop_front();
        }
        self.frames.push_back((frame, pose));
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> (&ProcessedFrame, &Pose) {
        let (f, p) = &self.frames[i];
        (f, p)
    }
}

#[derive(Clone, Debug, Default)]
struct Moments<const D: usize> {
    m: Vec<[f64; D]>,
    v: Vec<[f64; D]>,
}

impl<const D: usize> Moments<D> {
    fn resize(&mut self, n: usize) {
        self.m.resize(n, [0.0; D]);
        self.v.resize(n, [0.0; D]);
    }

    /// Adam step for one parameter block; returns the update to add.
    fn step(&mut self, id: usize, g: [f64; D], t: u32, lr: f64, b1: f64, b2: f64, eps: f64) -> [f64; D] {
        let (m, v) = (&mut self.m[id], &mut self.v[id]);
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        let mut out = [0.0; D];
        for j in 0..D {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            out[j] = -lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
        }
        out
    }
}

/// Adam moments per parameter group, sized to the map.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    position: Moments<3>,
    log_scale: Moments<2>,
    rotation: Moments<3>,
    logit_opacity: Moments<1>,
    color: Moments<{ 3 * SH_COEFFS }>,
    steps: Vec<u32>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self, id: usize) -> u32 {
        self.steps.get(id).copied().unwrap_or(0)
    }

    fn resize(&mut self, n: usize) {
        if self.steps.len() < n {
            self.position.resize(n);
            self.log_scale.resize(n);
            self.rotation.resize(n);
            self.logit_opacity.resize(n);
            self.color.resize(n);
            self.steps.resize(n, 0);
        }
    }
}

const OPACITY_CLAMP: f64 = 1e-6;

fn logit(o: f64) -> f64 {
    let o = o.clamp(OPACITY_CLAMP, 1.0 - OPACITY_CLAMP);
    (o / (1.0 - o)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One Adam step on every surfel in `grads`.
pub fn apply_gradients(map: &mut SurfelMap, grads: &Gradients, state: &mut OptimizerState, cfg: &OptimConfig) {
    state.resize(map.len());
    let lr = &cfg.learning_rates;
    let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.epsilon);
    let surfels = map.surfels_mut();
    for (&id, g) in grads.ids.iter().zip(grads.grads.iter()) {
        state.steps[id] += 1;
        let t = state.steps[id];
        let s = &mut surfels[id];

        let dp = state.position.step(id, [g.p.x, g.p.y, g.p.z], t, lr.position, b1, b2, eps);
        s.position += Vec3::new(dp[0], dp[1], dp[2]);

        let gl = [g.s.x * s.scale.x, g.s.y * s.scale.y];
        let ds = state.log_scale.step(id, gl, t, lr.log_scale, b1, b2, eps);
        s.scale = Vector2::new(s.scale.x * ds[0].exp(), s.scale.y * ds[1].exp());

        let dr = state.rotation.step(id, [g.r.x, g.r.y, g.r.z], t, lr.rotation, b1, b2, eps);
        let delta = UnitQuaternion::from_scaled_axis(Vec3::new(dr[0], dr[1], dr[2]));
        s.rotation = UnitQuaternion::new_normalize((delta * s.rotation).into_inner());

        let go = [g.o * s.opacity * (1.0 - s.opacity)];
        let d_o = state.logit_opacity.step(id, go, t, lr.logit_opacity, b1, b2, eps);
        s.opacity = sigmoid(logit(s.opacity) + d_o[0]);

        let mut gc = [0.0; 3 * SH_COEFFS];
        for kk in 0..SH_COEFFS {
            for ch in 0..3 {
                gc[3 * kk + ch] = g.sh[kk][ch];
            }
        }
        let dc = state.color.step(id, gc, t, lr.color, b1, b2, eps);
        for kk in 0..SH_COEFFS {
            for ch in 0..3 {
                s.sh[kk][ch] += dc[3 * kk + ch];
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptStats {
    pub iterations: usize,
    /// Total loss before each step.
    pub losses: Vec<f64>,
    pub skipped: usize,
}

/// `m * |window|` iterations, each on a uniformly drawn keyframe.
pub fn optimize_batch(
    map: &mut SurfelMap,
    window: &KeyframeWindow,
    m: usize,
    state: &mut OptimizerState,
    cfg: &OptimConfig,
    render_opts: &RenderOptions,
    rng: &mut ChaCha8Rng,
) -> OptStats {
    let mut stats = OptStats::default();
    if window.is_empty() || m == 0 || map.is_empty() {
        return stats;
    }
    let opts = render_opts.clone().with_contributors();
    let mut touched = vec![false; map.len()];
    for _ in 0..m * window.len() {
        let (frame, pose) = window.get(rng.random_range(0..window.len()));
        let render = render_tiled(map, pose, &frame.intrinsics, &opts, opts.tile_size);
        match backward(&render, frame, map, pose, &cfg.weights) {
            Ok(g) => {
                stats.losses.push(g.loss.total);
                for &id in &g.ids {
                    touched[id] = true;
                }
                apply_gradients(map, &g, state, cfg);
            }
            Err(_) => stats.skipped += 1,
        }
        stats.iterations += 1;
    }
    for (s, t) in map.surfels_mut().iter_mut().zip(touched) {
        if t {
            let n = s.normal();
            for i in 0..3 {
                s.eta[i] = s.lambda[i] * s.position[i];
                s.eta[3 + i] = s.lambda[3 + i] * n[i];
            }
        }
    }
    map.reindex();
    stats
}

#[cfg(test)]
mod tests;
