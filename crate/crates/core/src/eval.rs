//! Trajectory, reconstruction and image-quality metrics.


use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{Pose, Vec3};
use crate::image::Image;
use crate::meshing::Mesh;
use crate::surfel::SurfelMap;

pub const ASSOCIATION_TOLERANCE: f64 = 0.02;
pub const RECON_TAU: f64 = 0.03;
pub const DEFAULT_SAMPLES: usize = 1_000_000;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("need at least {needed} associated poses, found {found}")]
    InsufficientData { needed: usize, found: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("timestamps must be strictly increasing (index {0})")]
    Unsorted(usize),
    #[error("image sizes differ: {0:?} vs {1:?}")]
    SizeMismatch((usize, usize), (usize, usize)),
    #[error("image {0:?} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")]
    TooSmall((usize, usize)),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    entries: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new(entries: Vec<(f64, Pose)>) -> Result<Self, EvalError> {
        for i in 1..entries.len() {
            if !(entries[i].0 > entries[i - 1].0) {
                return Err(EvalError::Unsorted(i));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(f64, Pose)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Applies `t` on the left of every pose.
    pub fn transformed(&self, t: &Pose) -> Self {
        Self { entries: self.entries.iter().map(|(s, p)| (*s, *t * *p)).collect() }
    }
}

/// Pairs each estimated pose with the nearest ground-truth pose within `tol`
/// seconds.
pub fn associate(est: &Trajectory, gt: &Trajectory, tol: f64) -> Vec<(Pose, Pose)> {
    let g = gt.entries();
    let mut out = Vec::new();
    for (t, p) in est.entries() {
        let i = g.partition_point(|(s, _)| s < t);
        let best = [i.checked_sub(1), (i < g.len()).then_some(i)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (g[a].0 - t).abs().total_cmp(&(g[b].0 - t).abs()));
        if let Some(j) = best {
            if (g[j].0 - t).abs() <= tol {
                out.push((*p, g[j].1));
            }
        }
    }
    out
}

/// Least-squares rigid transform mapping `src` onto `dst` (no scale).
pub fn align_rigid(src: &[Vec3], dst: &[Vec3]) -> Pose {
    let n = src.len().max(1) as f64;
    let cs = src.iter().sum::<Vec3>() / n;
    let cd = dst.iter().sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (vt.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = vt.transpose() * d * u.transpose();
    Pose::from_matrix(&r, cd - r * cs)
}

/// Absolute trajectory error after rigid alignment, in centimeters.
pub fn ate_rmse(est: &Trajectory, gt: &Trajectory) -> Result<f64, EvalError> {
    let pairs = associate(est, gt, ASSOCIATION_TOLERANCE);
    if pairs.len() < 2 {
        return Err(EvalError::InsufficientData { needed: 2, found: pairs.len() });
    }
    let src: Vec<Vec3> = pairs.iter().map(|(e, _)| e.translation()).collect();
    let dst: Vec<Vec3> = pairs.iter().map(|(_, g)| g.translation()).collect();
    let t = align_rigid(&src, &dst);
    let sq: f64 = src.iter().zip(&dst).map(|(s, d)| (t.transform_point(s) - d).norm_squared()).sum();
    Ok(100.0 * (sq / src.len() as f64).sqrt())
}

/// Draws `n` points from the surfel disks: a surfel is picked with
/// probability proportional to its disk area, then a tangent-plane offset is
/// drawn from its Gaussian restricted to the 1-sigma ellipse.
pub fn sample_surfel_points(map: &SurfelMap, n: usize, seed: u64) -> Result<Vec<Vec3>, EvalError> {
    let surfels = map.surfels();
    if surfels.is_empty() {
        return Err(EvalError::Empty("surfel map"));
    }
    let mut cdf = Vec::with_capacity(surfels.len());
    let mut acc = 0.0;
    for s in surfels {
        acc += std::f64::consts::PI * s.scale.x * s.scale.y;
        cdf.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let r = rng.random::<f64>() * acc;
            let s = &surfels[cdf.partition_point(|&c| c < r).min(surfels.len() - 1)];
            let (a, b) = loop {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                if a * a + b * b <= 1.0 {
                    break (a, b);
                }
            };
            let rm = s.rotation_matrix();
            s.position + rm.column(0) * (a * s.scale.x) + rm.column(1) * (b * s.scale.y)
        })
        .collect())
}

/// Closest point on triangle `abc` to `p`.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

/// Bounding-volume hierarchy answering nearest-element queries by
/// branch and bound.
struct Bvh {
    nodes: Vec<Node>,
    order: Vec<u32>,
}

struct Node {
    min: Vec3,
    max: Vec3,
    /// Leaf: range into `order`; inner: child node indices.
    a: u32,
    b: u32,
    leaf: bool,
}

const LEAF_SIZE: usize = 4;

fn box_distance(p: &Vec3, min: &Vec3, max: &Vec3) -> f64 {
    (min - p).sup(&(p - max)).sup(&Vec3::zeros()).norm()
}

impl Bvh {
    fn new(boxes: &[(Vec3, Vec3)]) -> Self {
        let mut bvh = Self { nodes: Vec::new(), order: (0..boxes.len() as u32).collect() };
        if !boxes.is_empty() {
            bvh.build(boxes, 0, boxes.len());
        }
        bvh
    }

    fn build(&mut self, boxes: &[(Vec3, Vec3)], lo: usize, hi: usize) -> u32 {
        let (mut min, mut max) = (Vec3::from_element(f64::INFINITY), Vec3::from_element(f64::NEG_INFINITY));
        for &i in &self.order[lo..hi] {
            min = min.inf(&boxes[i as usize].0);
            max = max.sup(&boxes[i as usize].1);
        }
        let id = self.nodes.len() as u32;
        self.nodes.push(Node { min, max, a: lo as u32, b: hi as u32, leaf: true });
        if hi - lo > LEAF_SIZE {
            let axis = (max - min).imax();
            let mid = (lo + hi) / 2;
            let key = |i: &u32| {
                let (a, b) = &boxes[*i as usize];
                a[axis] + b[axis]
            };
            self.order[lo..hi].select_nth_unstable_by(mid - lo, |x, y| key(x).total_cmp(&key(y)).then(x.cmp(y)));
            let l = self.build(boxes, lo, mid);
            let r = self.build(boxes, mid, hi);
            self.nodes[id as usize] = Node { min, max, a: l, b: r, leaf: false };
        }
        id
    }

    fn nearest(&self, q: &Vec3, dist: impl Fn(u32) -> f64) -> f64 {
        let mut best = f64::INFINITY;
        if self.nodes.is_empty() {
            return best;
        }
        let mut stack = vec![(0u32, box_distance(q, &self.nodes[0].min, &self.nodes[0].max))];
        while let Some((n, d)) = stack.pop() {
            if d >= best {
                continue;
            }
            let node = &self.nodes[n as usize];
            if node.leaf {
                for &i in &self.order[node.a as usize..node.b as usize] {
                    best = best.min(dist(i));
                }
                continue;
            }
            let (l, r) = (&self.nodes[node.a as usize], &self.nodes[node.b as usize]);
            let (dl, dr) = (box_distance(q, &l.min, &l.max), box_distance(q, &r.min, &r.max));
            // Nearer child is popped first.
            if dl < dr {
                stack.push((node.b, dr));
                stack.push((node.a, dl));
            } else {
                stack.push((node.a, dl));
                stack.push((node.b, dr));
            }
        }
        best
    }
}

/// Nearest-surface queries against a triangle mesh.
pub struct MeshDistance<'a> {
    mesh: &'a Mesh,
    index: Bvh,
}

impl<'a> MeshDistance<'a> {
    pub fn new(mesh: &'a Mesh) -> Self {
        let boxes: Vec<(Vec3, Vec3)> = mesh
            .faces
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|j| mesh.vertices[j as usize]);
                (a.inf(&b).inf(&c), a.sup(&b).sup(&c))
            })
            .collect();
        Self { mesh, index: Bvh::new(&boxes) }
    }

    pub fn distance(&self, p: &Vec3) -> f64 {
        self.index.nearest(p, |i| {
            let [a, b, c] = self.mesh.faces[i as usize].map(|j| self.mesh.vertices[j as usize]);
            (closest_point_on_triangle(p, &a, &b, &c) - p).norm()
        })
    }
}

/// Nearest-neighbour queries against a point cloud.
pub struct PointDistance<'a> {
    points: &'a [Vec3],
    index: Bvh,
}

impl<'a> PointDistance<'a> {
    pub fn new(points: &'a [Vec3]) -> Self {
        let boxes: Vec<(Vec3, Vec3)> = points.iter().map(|p| (*p, *p)).collect();
        Self { points, index: Bvh::new(&boxes) }
    }

    pub fn distance(&self, p: &Vec3) -> f64 {
        self.index.nearest(p, |i| (self.points[i as usize] - p).norm())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconReport {
    pub accuracy_cm: f64,
    pub accuracy_ratio_pct: f64,
    pub completeness_cm: f64,
    pub completeness_ratio_pct: f64,
    pub pred_samples: usize,
    pub gt_samples: usize,
}

pub enum Prediction<'a> {
    Points(&'a [Vec3]),
    Mesh(&'a Mesh),
}

fn mean_and_ratio(d: &[f64], tau: f64) -> (f64, f64) {
    let n = d.len() as f64;
    (d.iter().sum::<f64>() / n, 100.0 * d.iter().filter(|&&x| x < tau).count() as f64 / n)
}

/// Accuracy (prediction to ground truth) and completeness (ground truth to
/// prediction). Mesh predictions are sampled with `n_samples` points; the
/// ground-truth surface is sampled at the same count as the prediction.
pub fn recon_metrics(pred: Prediction<'_>, gt: &Mesh, tau: f64, n_samples: usize, seed: u64) -> Result<ReconReport, EvalError> {
    if gt.is_empty() {
        return Err(EvalError::Empty("ground-truth mesh"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampled;
    let pred_pts: &[Vec3] = match pred {
        Prediction::Points(p) => p,
        Prediction::Mesh(m) => {
            sampled = m.sample_points(n_samples, &mut rng);
            &sampled
        }
    };
    if pred_pts.is_empty() {
        return Err(EvalError::Empty("prediction"));
    }
    let gt_pts = gt.sample_points(pred_pts.len(), &mut rng);
    let gt_index = MeshDistance::new(gt);
    let acc: Vec<f64> = pred_pts.par_iter().map(|p| gt_index.distance(p)).collect();
    let comp: Vec<f64> = match pred {
        Prediction::Points(p) => {
            let idx = PointDistance::new(p);
            gt_pts.par_iter().map(|q| idx.distance(q)).collect()
        }
        Prediction::Mesh(m) => {
            let idx = MeshDistance::new(m);
            gt_pts.par_iter().map(|q| idx.distance(q)).collect()
        }
    };
    let (a, ar) = mean_and_ratio(&acc, tau);
    let (c, cr) = mean_and_ratio(&comp, tau);
    Ok(ReconReport {
        accuracy_cm: 100.0 * a,
        accuracy_ratio_pct: ar,
        completeness_cm: 100.0 * c,
        completeness_ratio_pct: cr,
        pred_samples: pred_pts.len(),
        gt_samples: gt_pts.len(),
    })
}

fn check_dims(a: &Image<Vec3>, b: &Image<Vec3>) -> Result<(), EvalError> {
    if a.dims() != b.dims() {
        return Err(EvalError::SizeMismatch(a.dims(), b.dims()));
    }
    if a.is_empty() {
        return Err(EvalError::Empty("image"));
    }
    Ok(())
}

pub fn mse(a: &Image<Vec3>, b: &Image<Vec3>) -> Result<f64, EvalError> {
    check_dims(a, b)?;
    let s: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).norm_squared()).sum();
    Ok(s / (3 * a.len()) as f64)
}

/// Peak signal-to-noise ratio for unit-range images; `f64::INFINITY` when
/// the images are identical.
pub fn psnr(a: &Image<Vec3>, b: &Image<Vec3>) -> Result<f64, EvalError> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / m).log10() })
}

pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable "valid" filtering with the SSIM window.
fn filter_valid(img: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let g = gaussian_window();
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; ow * h];
    tmp.par_chunks_mut(ow).enumerate().for_each(|(y, row)| {
        for (x, out) in row.iter_mut().enumerate() {
            *out = (0..SSIM_WINDOW).map(|i| g[i] * img[y * w + x + i]).sum();
        }
    });
    let mut out = vec![0.0; ow * oh];
    out.par_chunks_mut(ow).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            *o = (0..SSIM_WINDOW).map(|i| g[i] * tmp[(y + i) * ow + x]).sum();
        }
    });
    (out, ow, oh)
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// averaged over the three channels.
pub fn ssim(a: &Image<Vec3>, b: &Image<Vec3>) -> Result<f64, EvalError> {
    check_dims(a, b)?;
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(EvalError::TooSmall((w, h)));
    }
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.as_slice().iter().map(|v| v[c]).collect();
        let y: Vec<f64> = b.as_slice().iter().map(|v| v[c]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, ..) = filter_valid(&x, w, h);
        let (my, ..) = filter_valid(&y, w, h);
        let (sxx, ..) = filter_valid(&xx, w, h);
        let (syy, ..) = filter_valid(&yy, w, h);
        let (sxy, ..) = filter_valid(&xy, w, h);
        let s: f64 = (0..mx.len())
            .map(|i| {
                let (ux, uy) = (mx[i], my[i]);
                let vx = sxx[i] - ux * ux;
                let vy = syy[i] - uy * uy;
                let cxy = sxy[i] - ux * uy;
                ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
            })
            .sum();
        total += s / mx.len() as f64;
    }
    Ok(total / 3.0)
}
