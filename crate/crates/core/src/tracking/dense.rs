//! Coarse-to-fine frame-to-model alignment: point-to-plane ICP with
//! projective association plus a grayscale photometric term.

use nalgebra::{Matrix1x6, Matrix2x3, Matrix3, Matrix6, RowVector2, Vector6};
use rayon::prelude::*;

use super::{convergence_check, solve_damped, StageResiduals, TrackResult, TrackingConfig};
use crate::frame::{build_pyramid, compute_vertex_map, gray, is_valid_depth, PyramidLevel, ProcessedFrame};
use crate::geometry::{exp_se3, log_se3, skew, Intrinsics, Pose, Twist, Vec3};
use crate::image::Image;
use crate::raster::{RenderOutput, EPS_PX};

/// Fixed number of row bands for the deterministic normal-equation reduction.
const REDUCE_BANDS: usize = 16;

#[derive(Clone, Debug)]
pub struct ModelLevel {
    pub level: PyramidLevel,
    pub grad_x: Image<f64>,
    pub grad_y: Image<f64>,
}

/// Model maps in the camera frame of `pose`, one entry per pyramid level.
#[derive(Clone, Debug)]
pub struct ModelPyramid {
    pub pose: Pose,
    pub levels: Vec<ModelLevel>,
}

fn central_gradients(img: &Image<f64>) -> (Image<f64>, Image<f64>) {
    let (w, h) = img.dims();
    let gx = Image::from_fn_par(w, h, |x, y| {
        if x == 0 || x + 1 >= w {
            0.0
        } else {
            0.5 * (img.get(x + 1, y) - img.get(x - 1, y))
        }
    });
    let gy = Image::from_fn_par(w, h, |x, y| {
        if y == 0 || y + 1 >= h {
            0.0
        } else {
            0.5 * (img.get(x, y + 1) - img.get(x, y - 1))
        }
    });
    (gx, gy)
}

impl ModelPyramid {
    pub fn from_levels(pose: Pose, levels: Vec<PyramidLevel>) -> Self {
        let levels = levels
            .into_iter()
            .map(|level| {
                let (grad_x, grad_y) = central_gradients(&level.intensity);
                ModelLevel { level, grad_x, grad_y }
            })
            .collect();
        Self { pose, levels }
    }

    /// Model maps from a render at `pose`. The finest level keeps the
    /// rendered normals; coarser levels are rebuilt from downsampled depth.
    pub fn from_render(render: &RenderOutput, pose: &Pose, k: &Intrinsics, levels: usize) -> Option<Self> {
        let (w, h) = (render.width(), render.height());
        let depth = Image::from_fn_par(w, h, |x, y| {
            let d = *render.depth.get(x, y);
            if *render.alpha.get(x, y) >= EPS_PX && is_valid_depth(d) {
                d
            } else {
                0.0
            }
        });
        let normal = Image::from_fn_par(w, h, |x, y| {
            if *depth.get(x, y) > 0.0 {
                *render.normal.get(x, y)
            } else {
                Vec3::zeros()
            }
        });
        let valid = Image::from_fn_par(w, h, |x, y| *depth.get(x, y) > 0.0 && normal.get(x, y).norm_squared() > 0.5);
        let base = PyramidLevel {
            intrinsics: *k,
            intensity: render.color.map_par(gray),
            vertex: compute_vertex_map(&depth, k),
            depth,
            normal,
            valid,
        };
        build_pyramid(base, levels).ok().map(|l| Self::from_levels(*pose, l))
    }

    /// Uses a processed frame as its own model; handy for frame-to-frame tests.
    pub fn from_frame(frame: &ProcessedFrame, pose: &Pose) -> Self {
        Self::from_levels(*pose, frame.pyramid.clone())
    }
}

#[derive(Clone, Copy, Debug)]
struct Accum {
    h_icp: Matrix6<f64>,
    g_icp: Vector6<f64>,
    c_icp: f64,
    n_icp: usize,
    h_ph: Matrix6<f64>,
    g_ph: Vector6<f64>,
    c_ph: f64,
    n_ph: usize,
}

impl Accum {
    fn zero() -> Self {
        Self {
            h_icp: Matrix6::zeros(),
            g_icp: Vector6::zeros(),
            c_icp: 0.0,
            n_icp: 0,
            h_ph: Matrix6::zeros(),
            g_ph: Vector6::zeros(),
            c_ph: 0.0,
            n_ph: 0,
        }
    }

    fn add(mut self, o: &Accum) -> Self {
        self.h_icp += o.h_icp;
        self.g_icp += o.g_icp;
        self.c_icp += o.c_icp;
        self.n_icp += o.n_icp;
        self.h_ph += o.h_ph;
        self.g_ph += o.g_ph;
        self.c_ph += o.c_ph;
        self.n_ph += o.n_ph;
        self
    }

    fn icp_mean(&self) -> f64 {
        if self.n_icp == 0 {
            0.0
        } else {
            self.c_icp / self.n_icp as f64
        }
    }

    fn photo_mean(&self) -> f64 {
        if self.n_ph == 0 {
            0.0
        } else {
            self.c_ph / self.n_ph as f64
        }
    }

    fn cost(&self, lambda_photo: f64) -> f64 {
        self.icp_mean() + lambda_photo * self.photo_mean()
    }

    /// Mean-normalized normal equations matching [`Accum::cost`].
    fn normal_equations(&self, lambda_photo: f64) -> (Matrix6<f64>, Vector6<f64>) {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        if self.n_icp > 0 {
            let s = 1.0 / self.n_icp as f64;
            h += self.h_icp * s;
            g += self.g_icp * s;
        }
        if self.n_ph > 0 && lambda_photo > 0.0 {
            let s = lambda_photo / self.n_ph as f64;
            h += self.h_ph * s;
            g += self.g_ph * s;
        }
        (h, g)
    }
}

/// One projective association. `p_c`, `v_g` and `n_g` are in the model
/// camera frame.
struct Assoc {
    p_w: Vec3,
    p_c: Vec3,
    u_model: (f64, f64),
    v_g: Vec3,
    n_g: Vec3,
}

struct Ctx<'a> {
    frame: &'a PyramidLevel,
    model: &'a ModelLevel,
    pose: Pose,
    r_t: Matrix3<f64>,
    w2m: Pose,
    r_mw: Matrix3<f64>,
    cos_max: f64,
    max_dist: f64,
}

impl Ctx<'_> {
    fn associate(&self, x: usize, y: usize) -> Option<Assoc> {
        if !*self.frame.valid.get(x, y) {
            return None;
        }
        let v = self.frame.vertex.get(x, y);
        let p_w = self.pose.transform_point(v);
        let p_c = self.w2m.transform_point(&p_w);
        if p_c.z <= 1e-6 {
            return None;
        }
        let k = &self.model.level.intrinsics;
        let uf = (k.fx * p_c.x / p_c.z + k.cx, k.fy * p_c.y / p_c.z + k.cy);
        let (ux, uy) = (uf.0.round(), uf.1.round());
        if ux < 0.0 || uy < 0.0 || ux >= k.width as f64 || uy >= k.height as f64 {
            return None;
        }
        let (mx, my) = (ux as usize, uy as usize);
        if !*self.model.level.valid.get(mx, my) {
            return None;
        }
        let v_g = *self.model.level.vertex.get(mx, my);
        let n_g = *self.model.level.normal.get(mx, my);
        if (v_g - p_c).norm() >= self.max_dist {
            return None;
        }
        let n_c = self.r_mw * (self.r_t * self.frame.normal.get(x, y));
        if n_c.dot(&n_g) < self.cos_max {
            return None;
        }
        Some(Assoc { p_w, p_c, u_model: uf, v_g, n_g })
    }
}


impl Ctx<'_> {
    fn new<'a>(frame: &'a PyramidLevel, model: &'a ModelLevel, model_pose: &Pose, pose: &Pose, cfg: &TrackingConfig) -> Ctx<'a> {
        let w2m = model_pose.inverse();
        Ctx {
            frame,
            model,
            pose: *pose,
            r_t: pose.rotation_matrix(),
            r_mw: w2m.rotation_matrix(),
            w2m,
            cos_max: cfg.max_assoc_angle.to_radians().cos(),
            max_dist: cfg.max_assoc_dist,
        }
    }

    /// Model intensity and its gradient at a continuous location, only when
    /// all four bilinear support pixels are valid model pixels.
    fn model_intensity(&self, u: f64, v: f64) -> Option<(f64, RowVector2<f64>)> {
        let m = &self.model.level;
        if !(u >= 0.0 && v >= 0.0) {
            return None;
        }
        let (x0, y0) = (u.floor() as usize, v.floor() as usize);
        if x0 + 1 >= m.valid.width() || y0 + 1 >= m.valid.height() {
            return None;
        }
        if !(*m.valid.get(x0, y0) && *m.valid.get(x0 + 1, y0) && *m.valid.get(x0, y0 + 1) && *m.valid.get(x0 + 1, y0 + 1)) {
            return None;
        }
        let i = m.intensity.bilinear(u, v)?;
        let gx = self.model.grad_x.bilinear(u, v)?;
        let gy = self.model.grad_y.bilinear(u, v)?;
        Some((i, RowVector2::new(gx, gy)))
    }

    fn accumulate_row(&self, y: usize, with_jacobian: bool, lambda_photo: f64, acc: &mut Accum) {
        let k = &self.model.level.intrinsics;
        for x in 0..self.frame.valid.width() {
            let Some(a) = self.associate(x, y) else { continue };
            let r = a.n_g.dot(&(a.v_g - a.p_c));
            acc.c_icp += r * r;
            acc.n_icp += 1;
            // d p_w / d delta = [I, -[p_w]x] for a left increment of the pose.
            let mut dp = nalgebra::Matrix3x6::zeros();
            if with_jacobian {
                dp.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
                dp.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&a.p_w)));
                let n_w = self.r_mw.transpose() * a.n_g;
                let j: Matrix1x6<f64> = -(n_w.transpose() * dp);
                acc.h_icp += j.transpose() * j;
                acc.g_icp += j.transpose() * r;
            }
            if lambda_photo <= 0.0 {
                continue;
            }
            let Some((i_g, grad)) = self.model_intensity(a.u_model.0, a.u_model.1) else { continue };
            let rp = i_g - *self.frame.intensity.get(x, y);
            acc.c_ph += rp * rp;
            acc.n_ph += 1;
            if with_jacobian {
                let iz = 1.0 / a.p_c.z;
                let jpi = Matrix2x3::new(
                    k.fx * iz,
                    0.0,
                    -k.fx * a.p_c.x * iz * iz,
                    0.0,
                    k.fy * iz,
                    -k.fy * a.p_c.y * iz * iz,
                );
                let j: Matrix1x6<f64> = grad * jpi * self.r_mw * dp;
                acc.h_ph += j.transpose() * j;
                acc.g_ph += j.transpose() * rp;
            }
        }
    }

    /// Row-band parallel sum with a fixed band layout, so the result does not
    /// depend on the thread count.
    fn accumulate(&self, with_jacobian: bool, lambda_photo: f64) -> Accum {
        let h = self.frame.valid.height();
        let band = h.div_ceil(REDUCE_BANDS).max(1);
        let parts: Vec<Accum> = (0..REDUCE_BANDS)
            .into_par_iter()
            .map(|b| {
                let mut acc = Accum::zero();
                for y in (b * band).min(h)..((b + 1) * band).min(h) {
                    self.accumulate_row(y, with_jacobian, lambda_photo, &mut acc);
                }
                acc
            })
            .collect();
        parts.iter().fold(Accum::zero(), |a, b| a.add(b))
    }
}

/// Model pixel associated with every frame pixel at `level` under `pose`.
pub fn associate_pixels(
    frame: &ProcessedFrame,
    model: &ModelPyramid,
    pose: &Pose,
    level: usize,
    cfg: &TrackingConfig,
) -> Vec<((usize, usize), (f64, f64))> {
    let ctx = Ctx::new(&frame.pyramid[level], &model.levels[level], &model.pose, pose, cfg);
    let (w, h) = frame.pyramid[level].valid.dims();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if let Some(a) = ctx.associate(x, y) {
                out.push(((x, y), a.u_model));
            }
        }
    }
    out
}

/// Refines `init` against the model maps, coarsest level first.
pub fn dense_align(frame: &ProcessedFrame, model: &ModelPyramid, init: &Pose, cfg: &TrackingConfig) -> TrackResult {
    let levels = frame.pyramid.len().min(model.levels.len()).min(cfg.pyramid_levels.max(1));
    let lp = cfg.lambda_photo;
    let eval = |pose: &Pose, l: usize, jac: bool| {
        Ctx::new(&frame.pyramid[l], &model.levels[l], &model.pose, pose, cfg).accumulate(jac, lp)
    };
    let initial = eval(init, 0, false);
    let mut pose = *init;
    let mut step_norms = Vec::new();
    let mut trajectory = vec![initial.cost(lp)];
    for l in (0..levels).rev() {
        let mut lambda = cfg.lambda_init;
        let iters = if l == 0 { cfg.finest_iters.unwrap_or(cfg.n_pyr) } else { cfg.n_pyr };
        for _ in 0..iters {
            let acc = eval(&pose, l, true);
            if acc.n_icp < 6 {
                break;
            }
            let (h, g) = acc.normal_equations(lp);
            let Some(step) = solve_damped(&h, &g, lambda) else { break };
            let cand = exp_se3(&Twist(step)) * pose;
            let new_cost = eval(&cand, l, false).cost(lp);
            if new_cost <= acc.cost(lp) {
                pose = cand;
                lambda = (lambda / 10.0).max(1e-12);
                step_norms.push(step.norm());
                if l == 0 {
                    trajectory.push(new_cost);
                }
            } else {
                lambda *= 10.0;
                step_norms.push(0.0);
            }
            if cfg.early_stop && step.norm() < cfg.tau_step {
                break;
            }
        }
    }
    let fin = eval(&pose, 0, false);
    if trajectory.len() == 1 || *trajectory.last().unwrap() != fin.cost(lp) {
        trajectory.push(fin.cost(lp));
    }
    let accepted = convergence_check(&trajectory, &step_norms, fin.n_icp, cfg);
    TrackResult {
        pose,
        twist: log_se3(&(pose * init.inverse())).unwrap_or(Twist::zero()),
        inliers: 0,
        residuals: StageResiduals {
            sparse_rms: None,
            icp_initial: initial.icp_mean(),
            icp_final: fin.icp_mean(),
            photo_initial: initial.photo_mean(),
            photo_final: fin.photo_mean(),
            joint_initial: initial.cost(lp),
            joint_final: fin.cost(lp),
        },
        accepted,
        associations: fin.n_icp,
        iterations: step_norms.len(),
        trajectory,
        step_norms,
    }
}
