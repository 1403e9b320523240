//! Raw RGB-D input and the derived per-frame maps: filtered depth, vertex and
//! normal maps, validity mask and the coarse-to-fine pyramid.

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{Intrinsics, Pose, Vec3};
use crate::image::Image;

pub const BILATERAL_RADIUS: i64 = 2;
pub const BILATERAL_SIGMA_SPATIAL: f64 = 2.0;
pub const BILATERAL_SIGMA_RANGE: f64 = 0.03;
/// A neighbor only counts toward a normal if its depth is within this
/// fraction of the center depth.
pub const MAX_NEIGHBOR_DEPTH_RATIO: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrameError {
    #[error("color is {color:?} but depth is {depth:?}")]
    SizeMismatch { color: (usize, usize), depth: (usize, usize) },
    #[error("pyramid with {levels} levels does not fit a {width}x{height} image")]
    PyramidLevels { levels: usize, width: usize, height: usize },
}

#[derive(Clone, Debug)]
pub struct RawFrame {
    pub color: Image<[u8; 3]>,
    /// Meters; 0 marks a missing measurement.
    pub depth: Image<f64>,
    pub timestamp: f64,
    pub frame_id: usize,
}

impl RawFrame {
    pub fn new(
        color: Image<[u8; 3]>,
        mut depth: Image<f64>,
        timestamp: f64,
        frame_id: usize,
    ) -> Result<Self, FrameError> {
        if color.dims() != depth.dims() {
            return Err(FrameError::SizeMismatch { color: color.dims(), depth: depth.dims() });
        }
        for d in depth.as_mut_slice() {
            if !(d.is_finite() && *d > 0.0) {
                *d = 0.0;
            }
        }
        Ok(Self { color, depth, timestamp, frame_id })
    }
}

#[inline]
pub fn is_valid_depth(d: f64) -> bool {
    d > 0.0 && d.is_finite()
}

pub fn gray(c: &Vec3) -> f64 {
    0.299 * c.x + 0.587 * c.y + 0.114 * c.z
}

pub fn color_to_f64(c: &[u8; 3]) -> Vec3 {
    Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) / 255.0
}

#[derive(Clone, Debug)]
pub struct PyramidLevel {
    pub intrinsics: Intrinsics,
    pub intensity: Image<f64>,
    pub depth: Image<f64>,
    pub vertex: Image<Vec3>,
    pub normal: Image<Vec3>,
    pub valid: Image<bool>,
}

#[derive(Clone, Debug)]
pub struct ProcessedFrame {
    pub raw: RawFrame,
    pub intrinsics: Intrinsics,
    /// Colors in `[0, 1]`.
    pub color: Image<Vec3>,
    pub depth: Image<f64>,
    pub vertex: Image<Vec3>,
    pub normal: Image<Vec3>,
    /// Valid depth and a valid normal.
    pub valid: Image<bool>,
    pub pyramid: Vec<PyramidLevel>,
}

impl ProcessedFrame {
    pub fn new(raw: RawFrame, k: &Intrinsics, levels: usize) -> Result<Self, FrameError> {
        let depth = filter_depth(&raw.depth);
        Self::build(raw, depth, None, k, levels)
    }

    /// Builds the derived maps without the edge-preserving filter.
    pub fn unfiltered(raw: RawFrame, k: &Intrinsics, levels: usize) -> Result<Self, FrameError> {
        let depth = raw.depth.clone();
        Self::build(raw, depth, None, k, levels)
    }

    /// Unfiltered frame whose float colors are kept exactly rather than
    /// re-derived from the 8-bit buffer.
    pub fn from_float(
        color: Image<Vec3>,
        depth: Image<f64>,
        k: &Intrinsics,
        levels: usize,
        timestamp: f64,
        frame_id: usize,
    ) -> Result<Self, FrameError> {
        let bytes = color.map_par(|c| {
            let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [q(c.x), q(c.y), q(c.z)]
        });
        let raw = RawFrame::new(bytes, depth, timestamp, frame_id)?;
        let depth = raw.depth.clone();
        Self::build(raw, depth, Some(color), k, levels)
    }

    fn build(
        raw: RawFrame,
        depth: Image<f64>,
        color: Option<Image<Vec3>>,
        k: &Intrinsics,
        levels: usize,
    ) -> Result<Self, FrameError> {
        let vertex = compute_vertex_map(&depth, k);
        let normal = compute_normal_map(&vertex, &depth);
        let valid = valid_mask(&depth, &normal);
        let color = color.unwrap_or_else(|| raw.color.map_par(color_to_f64));
        let intensity = color.map_par(gray);
        let pyramid = build_pyramid(
            PyramidLevel {
                intrinsics: *k,
                intensity,
                depth: depth.clone(),
                vertex: vertex.clone(),
                normal: normal.clone(),
                valid: valid.clone(),
            },
            levels,
        )?;
        Ok(Self { raw, intrinsics: *k, color, depth, vertex, normal, valid, pyramid })
    }

    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    pub fn frame_id(&self) -> usize {
        self.raw.frame_id
    }

    pub fn timestamp(&self) -> f64 {
        self.raw.timestamp
    }
}

fn valid_mask(depth: &Image<f64>, normal: &Image<Vec3>) -> Image<bool> {
    Image::from_fn_par(depth.width(), depth.height(), |x, y| {
        is_valid_depth(*depth.get(x, y)) && normal.get(x, y).norm_squared() > 0.5
    })
}

/// 5x5 bilateral filter over valid pixels. Invalid pixels stay invalid and
/// are never used as support.
pub fn filter_depth(depth: &Image<f64>) -> Image<f64> {
    let (w, h) = depth.dims();
    let inv_ss = 1.0 / (2.0 * BILATERAL_SIGMA_SPATIAL * BILATERAL_SIGMA_SPATIAL);
    let inv_sr = 1.0 / (2.0 * BILATERAL_SIGMA_RANGE * BILATERAL_SIGMA_RANGE);
    Image::from_fn_par(w, h, |x, y| {
        let center = *depth.get(x, y);
        if !is_valid_depth(center) {
            return 0.0;
        }
        let mut sum = 0.0;
        let mut wsum = 0.0;
        for dy in -BILATERAL_RADIUS..=BILATERAL_RADIUS {
            let yy = y as i64 + dy;
            if yy < 0 || yy >= h as i64 {
                continue;
            }
            for dx in -BILATERAL_RADIUS..=BILATERAL_RADIUS {
                let xx = x as i64 + dx;
                if xx < 0 || xx >= w as i64 {
                    continue;
                }
                let d = *depth.get(xx as usize, yy as usize);
                if !is_valid_depth(d) {
                    continue;
                }
                let r2 = (dx * dx + dy * dy) as f64;
                let diff = d - center;
                let wgt = (-r2 * inv_ss - diff * diff * inv_sr).exp();
                sum += wgt * d;
                wsum += wgt;
            }
        }
        sum / wsum
    })
}

/// Per-pixel backprojection; invalid pixels hold the zero vector.
pub fn compute_vertex_map(depth: &Image<f64>, k: &Intrinsics) -> Image<Vec3> {
    Image::from_fn_par(depth.width(), depth.height(), |x, y| {
        let d = *depth.get(x, y);
        if is_valid_depth(d) {
            k.ray(x as f64, y as f64) * d
        } else {
            Vec3::zeros()
        }
    })
}

/// Central-difference normals oriented toward the camera. Border pixels,
/// pixels with an invalid or discontinuous neighbor, and degenerate crosses
/// hold the zero vector.
pub fn compute_normal_map(vertex: &Image<Vec3>, depth: &Image<f64>) -> Image<Vec3> {
    let (w, h) = vertex.dims();
    Image::from_fn_par(w, h, |x, y| {
        if x == 0 || y == 0 || x + 1 >= w || y + 1 >= h {
            return Vec3::zeros();
        }
        let dc = *depth.get(x, y);
        if !is_valid_depth(dc) {
            return Vec3::zeros();
        }
        let nbrs = [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)];
        for &(xx, yy) in &nbrs {
            let d = *depth.get(xx, yy);
            if !is_valid_depth(d) || (d - dc).abs() > MAX_NEIGHBOR_DEPTH_RATIO * dc {
                return Vec3::zeros();
            }
        }
        let dx = vertex.get(x + 1, y) - vertex.get(x - 1, y);
        let dy = vertex.get(x, y + 1) - vertex.get(x, y - 1);
        let c = dx.cross(&dy);
        let n = c.norm();
        if !(n > 1e-12) {
            return Vec3::zeros();
        }
        let mut nrm = c / n;
        if nrm.dot(vertex.get(x, y)) > 0.0 {
            nrm = -nrm;
        }
        nrm
    })
}

/// Lower median of the valid samples, so the result is always an observed
/// depth and never a blend across an edge.
fn block_depth(samples: [f64; 4]) -> f64 {
    let mut v: Vec<f64> = samples.into_iter().filter(|d| is_valid_depth(*d)).collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    v[(v.len() - 1) / 2]
}

/// Builds `levels` pyramid levels starting from `base`. Level `l` has size
/// `floor(W / 2^l) x floor(H / 2^l)`.
pub fn build_pyramid(base: PyramidLevel, levels: usize) -> Result<Vec<PyramidLevel>, FrameError> {
    let (w, h) = base.depth.dims();
    let min_dim = w.min(h);
    if levels == 0 || min_dim == 0 || levels as f64 > (min_dim as f64).log2() {
        return Err(FrameError::PyramidLevels { levels, width: w, height: h });
    }
    let mut out = Vec::with_capacity(levels);
    out.push(base);
    for l in 1..levels {
        let prev = &out[l - 1];
        let k = prev.intrinsics.at_level(1);
        let (pw, ph) = (k.width, k.height);
        let intensity = Image::from_fn_par(pw, ph, |x, y| {
            let i = &prev.intensity;
            0.25 * (i.get(2 * x, 2 * y) + i.get(2 * x + 1, 2 * y) + i.get(2 * x, 2 * y + 1) + i.get(2 * x + 1, 2 * y + 1))
        });
        let depth = Image::from_fn_par(pw, ph, |x, y| {
            let d = &prev.depth;
            block_depth([
                *d.get(2 * x, 2 * y),
                *d.get(2 * x + 1, 2 * y),
                *d.get(2 * x, 2 * y + 1),
                *d.get(2 * x + 1, 2 * y + 1),
            ])
        });
        let vertex = compute_vertex_map(&depth, &k);
        let normal = compute_normal_map(&vertex, &depth);
        let valid = valid_mask(&depth, &normal);
        out.push(PyramidLevel { intrinsics: k, intensity, depth, vertex, normal, valid });
    }
    Ok(out)
}

/// Vertex and normal maps in world coordinates; invalid pixels stay zero.
pub fn transform_to_world(frame: &ProcessedFrame, pose: &Pose) -> (Image<Vec3>, Image<Vec3>) {
    let (w, h) = (frame.width(), frame.height());
    let mut vw = Image::new(w, h, Vec3::zeros());
    let mut nw = Image::new(w, h, Vec3::zeros());
    vw.as_mut_slice()
        .par_iter_mut()
        .zip(nw.as_mut_slice().par_iter_mut())
        .enumerate()
        .for_each(|(i, (v, n))| {
            if is_valid_depth(frame.depth.as_slice()[i]) {
                *v = pose.transform_point(&frame.vertex.as_slice()[i]);
            }
            let ni = frame.normal.as_slice()[i];
            if ni.norm_squared() > 0.0 {
                *n = pose.rotate(&ni);
            }
        });
    (vw, nw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{backproject, exp_se3, Twist, Vec2};
    use approx::assert_relative_eq;

    fn k(w: usize, h: usize) -> Intrinsics {
        Intrinsics::new(100.0, 100.0, w as f64 / 2.0, h as f64 / 2.0, w, h, 5000.0).unwrap()
    }

    fn raw(depth: Image<f64>) -> RawFrame {
        let (w, h) = depth.dims();
        RawFrame::new(Image::new(w, h, [128, 128, 128]), depth, 0.0, 0).unwrap()
    }

    #[test]
    fn constant_depth_is_filter_fixed_point() {
        let d = Image::new(20, 10, 1.7);
        let f = filter_depth(&d);
        for v in f.as_slice() {
            assert!((v - 1.7).abs() < 1e-7);
        }
    }

    #[test]
    fn filter_keeps_holes() {
        let mut d = Image::new(9, 9, 2.0);
        d.set(4, 4, 0.0);
        let f = filter_depth(&d);
        assert_eq!(*f.get(4, 4), 0.0);
        assert!((f.get(3, 4) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn filter_output_bounded_by_window() {
        let d = Image::from_fn_par(16, 16, |x, y| 1.0 + 0.01 * ((x * 7 + y * 13) % 5) as f64);
        let f = filter_depth(&d);
        for y in 0..16usize {
            for x in 0..16usize {
                let (mut lo, mut hi) = (f64::MAX, f64::MIN);
                for yy in y.saturating_sub(2)..(y + 3).min(16) {
                    for xx in x.saturating_sub(2)..(x + 3).min(16) {
                        lo = lo.min(*d.get(xx, yy));
                        hi = hi.max(*d.get(xx, yy));
                    }
                }
                let v = *f.get(x, y);
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn filter_preserves_step_edge() {
        let d = Image::from_fn_par(40, 10, |x, _| if x < 20 { 1.0 } else { 1.5 });
        let f = filter_depth(&d);
        // Edge location = argmax of |d(x+1) - d(x)| on a middle row.
        let row = f.row(5);
        let edge = (0..39)
            .max_by(|&a, &b| (row[a + 1] - row[a]).abs().total_cmp(&(row[b + 1] - row[b]).abs()))
            .unwrap();
        assert!((edge as i64 - 19).abs() <= 1);
    }

    #[test]
    fn vertex_map_matches_backproject() {
        let kk = k(32, 24);
        let d = Image::from_fn_par(32, 24, |x, y| 1.0 + 0.01 * (x + y) as f64);
        let v = compute_vertex_map(&d, &kk);
        for y in 0..24 {
            for x in 0..32 {
                let b = backproject(&kk, &Vec2::new(x as f64, y as f64), *d.get(x, y)).unwrap();
                assert!((v.get(x, y) - b).norm() <= 1e-12);
            }
        }
        let one = compute_vertex_map(&Image::new(32, 24, 1.0), &kk);
        assert_eq!(*one.get(16, 12), Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn invalid_depth_gives_invalid_vertex() {
        let mut d = Image::new(8, 8, 1.0);
        d.set(3, 3, 0.0);
        let v = compute_vertex_map(&d, &k(8, 8));
        assert_eq!(*v.get(3, 3), Vec3::zeros());
    }

    #[test]
    fn fronto_parallel_plane_normals_face_camera() {
        let kk = k(16, 12);
        let f = ProcessedFrame::unfiltered(raw(Image::new(16, 12, 2.0)), &kk, 1).unwrap();
        for y in 1..11 {
            for x in 1..15 {
                assert_relative_eq!(*f.normal.get(x, y), Vec3::new(0.0, 0.0, -1.0), epsilon = 1e-12);
                assert!(f.valid.get(x, y));
            }
        }
        assert!(!f.valid.get(0, 5));
    }

    #[test]
    fn sphere_normals_match_analytic() {
        // Sphere of radius 0.5 centered 1.5 m in front of the camera.
        let kk = Intrinsics::new(200.0, 200.0, 64.0, 64.0, 128, 128, 5000.0).unwrap();
        let c = Vec3::new(0.0, 0.0, 1.5);
        let r = 0.5;
        let depth = Image::from_fn_par(128, 128, |x, y| {
            let ray = kk.ray(x as f64, y as f64);
            let a = ray.norm_squared();
            let b = -2.0 * ray.dot(&c);
            let cc = c.norm_squared() - r * r;
            let disc = b * b - 4.0 * a * cc;
            if disc < 0.0 {
                return 0.0;
            }
            (-b - disc.sqrt()) / (2.0 * a)
        });
        let f = ProcessedFrame::unfiltered(raw(depth), &kk, 1).unwrap();
        let mut errs = vec![];
        for y in 0..128 {
            for x in 0..128 {
                if *f.valid.get(x, y) {
                    let p = f.vertex.get(x, y);
                    let truth = (p - c).normalize();
                    errs.push(f.normal.get(x, y).dot(&truth).clamp(-1.0, 1.0).acos().to_degrees());
                }
            }
        }
        errs.sort_by(|a, b| a.total_cmp(b));
        assert!(errs.len() > 1000);
        assert!(errs[errs.len() / 2] < 2.0, "median error {}", errs[errs.len() / 2]);
    }

    #[test]
    fn degenerate_cross_is_invalid() {
        // Vertices collapsed onto a line give a zero cross product.
        let v = Image::from_fn_par(5, 5, |x, _| Vec3::new(x as f64, 0.0, 1.0));
        let d = Image::new(5, 5, 1.0);
        let n = compute_normal_map(&v, &d);
        assert_eq!(*n.get(2, 2), Vec3::zeros());
    }

    #[test]
    fn normals_are_unit_and_face_camera() {
        let kk = k(32, 24);
        let d = Image::from_fn_par(32, 24, |x, y| 1.0 + 0.02 * x as f64 + 0.005 * (y as f64).powi(2) / 10.0);
        let f = ProcessedFrame::new(raw(d), &kk, 2).unwrap();
        for y in 0..24 {
            for x in 0..32 {
                if *f.valid.get(x, y) {
                    let n = f.normal.get(x, y);
                    assert!((n.norm() - 1.0).abs() <= 1e-6);
                    assert!(n.dot(f.vertex.get(x, y)) < 0.0);
                    assert_eq!(f.vertex.get(x, y).z, *f.depth.get(x, y));
                }
            }
        }
    }

    #[test]
    fn pyramid_dimensions() {
        let kk = k(640, 480);
        let f = ProcessedFrame::unfiltered(raw(Image::new(640, 480, 1.0)), &kk, 3).unwrap();
        let dims: Vec<_> = f.pyramid.iter().map(|l| l.depth.dims()).collect();
        assert_eq!(dims, vec![(640, 480), (320, 240), (160, 120)]);
        for l in &f.pyramid {
            assert_eq!((l.intrinsics.width, l.intrinsics.height), l.depth.dims());
            assert!(l.depth.as_slice().iter().all(|d| *d == 1.0));
            assert!(l.intensity.as_slice().iter().all(|i| (*i - 128.0 / 255.0).abs() < 1e-12));
        }
        let one = ProcessedFrame::unfiltered(raw(Image::new(64, 48, 1.0)), &k(64, 48), 1).unwrap();
        assert_eq!(one.pyramid.len(), 1);
        assert_eq!(one.pyramid[0].depth, one.depth);
    }

    #[test]
    fn pyramid_odd_dimensions_floor() {
        let kk = k(33, 21);
        let f = ProcessedFrame::unfiltered(raw(Image::new(33, 21, 1.0)), &kk, 3).unwrap();
        assert_eq!(f.pyramid[2].depth.dims(), (33 / 4, 21 / 4));
    }

    #[test]
    fn too_many_levels_is_config_error() {
        let kk = k(16, 16);
        let r = ProcessedFrame::unfiltered(raw(Image::new(16, 16, 1.0)), &kk, 5);
        assert!(matches!(r, Err(FrameError::PyramidLevels { .. })));
        let r = ProcessedFrame::unfiltered(raw(Image::new(16, 16, 1.0)), &kk, 0);
        assert!(r.is_err());
    }

    #[test]
    fn depth_block_reduction_takes_a_sample() {
        assert_eq!(block_depth([1.0, 1.0, 3.0, 3.0]), 1.0);
        assert_eq!(block_depth([0.0, 2.0, 0.0, 0.0]), 2.0);
        assert_eq!(block_depth([0.0; 4]), 0.0);
    }

    #[test]
    fn world_transform_round_trip() {
        let kk = k(16, 12);
        let d = Image::from_fn_par(16, 12, |x, y| 1.0 + 0.03 * x as f64 + 0.01 * y as f64);
        let f = ProcessedFrame::unfiltered(raw(d), &kk, 1).unwrap();
        let (v0, n0) = transform_to_world(&f, &Pose::identity());
        assert_eq!(v0, f.vertex);
        assert_eq!(n0, f.normal);

        let t = Pose::from_translation(Vec3::new(0.5, -1.0, 2.0));
        let (vt, nt) = transform_to_world(&f, &t);
        assert_eq!(*vt.get(5, 5), f.vertex.get(5, 5) + Vec3::new(0.5, -1.0, 2.0));
        assert_eq!(*nt.get(5, 5), *f.normal.get(5, 5));

        let pose = exp_se3(&Twist::new(Vec3::new(0.1, 0.2, -0.3), Vec3::new(0.3, -0.2, 0.1)));
        let (vw, nw) = transform_to_world(&f, &pose);
        let inv = pose.inverse();
        for y in 0..12 {
            for x in 0..16 {
                if *f.valid.get(x, y) {
                    assert!((inv.transform_point(vw.get(x, y)) - f.vertex.get(x, y)).norm() < 1e-10);
                    assert!((inv.rotate(nw.get(x, y)) - f.normal.get(x, y)).norm() < 1e-10);
                }
            }
        }
    }
}
