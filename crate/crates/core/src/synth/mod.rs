//! Procedural RGB-D scenes with exact ground truth: analytic ray casting,
//! camera trajectories, a depth noise model and triangle meshes of the
//! primitives.

mod presets;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::frame::RawFrame;
use crate::geometry::{Intrinsics, Mat3, Pose, Vec3};
use crate::image::Image;
use crate::meshing::Mesh;

pub use presets::{default_intrinsics, preset, PRESET_NAMES};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("unknown scene preset `{0}`")]
    UnknownPreset(String),
    #[error("frame {index} out of range ({count} frames)")]
    FrameOutOfRange { index: usize, count: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Texture {
    Solid(Vec3),
    Checker { size: f64, a: Vec3, b: Vec3 },
    /// Cubic cells with a pseudo-random brightness each. Neighbouring cells
    /// blend over a band `edge * size` wide around each border; 0 gives
    /// hard steps.
    Tiles { size: f64, seed: u64, tint: Vec3, lo: f64, hi: f64, edge: f64 },
    /// Smooth value noise, two octaves.
    Noise { frequency: f64, seed: u64, a: Vec3, b: Vec3 },
}

fn hash3(i: i64, j: i64, k: i64, seed: u64) -> f64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [i, j, k] {
        h ^= v as u64;
        h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
        h ^= h >> 33;
    }
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(p: &Vec3, seed: u64) -> f64 {
    let f = p.map(f64::floor);
    let t = (p - f).map(|x| x * x * (3.0 - 2.0 * x));
    let (i, j, k) = (f.x as i64, f.y as i64, f.z as i64);
    let mut acc = 0.0;
    for c in 0..8 {
        let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
        let w = (if dx == 1 { t.x } else { 1.0 - t.x }) * (if dy == 1 { t.y } else { 1.0 - t.y }) * (if dz == 1 { t.z } else { 1.0 - t.z });
        acc += w * hash3(i + dx, j + dy, k + dz, seed);
    }
    acc
}

impl Texture {
    pub fn albedo(&self, p: &Vec3) -> Vec3 {
        match self {
            Texture::Solid(c) => *c,
            Texture::Checker { size, a, b } => {
                let q = p.map(|x| (x / size).floor() as i64);
                if (q.x + q.y + q.z).rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Tiles { size, seed, tint, lo, hi, edge } => {
                let h = if *edge <= 0.0 {
                    let q = p.map(|x| (x / size).floor() as i64);
                    hash3(q.x, q.y, q.z, *seed)
                } else {
                    // Interpolate between cell centers with a ramp that is
                    // flat except inside the border band.
                    let g = p / *size - Vec3::from_element(0.5);
                    let f = g.map(f64::floor);
                    let t = (g - f).map(|x| {
                        let r = ((x - 0.5) / edge + 0.5).clamp(0.0, 1.0);
                        r * r * (3.0 - 2.0 * r)
                    });
                    let (i, j, k) = (f.x as i64, f.y as i64, f.z as i64);
                    let mut acc = 0.0;
                    for c in 0..8 {
                        let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
                        let w = (if dx == 1 { t.x } else { 1.0 - t.x }) * (if dy == 1 { t.y } else { 1.0 - t.y }) * (if dz == 1 { t.z } else { 1.0 - t.z });
                        if w > 0.0 {
                            acc += w * hash3(i + dx, j + dy, k + dz, *seed);
                        }
                    }
                    acc
                };
                tint * (lo + (hi - lo) * h)
            }
            Texture::Noise { frequency, seed, a, b } => {
                let q = p * *frequency;
                let n = 0.65 * value_noise(&q, *seed) + 0.35 * value_noise(&(q * 2.0), seed.wrapping_add(1));
                a + (b - a) * n
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    /// Rectangle `center + s u + t v`, `|s| <= half.0`, `|t| <= half.1`.
    Rect { center: Vec3, u: Vec3, v: Vec3, half: (f64, f64) },
    /// Axis-aligned box.
    Cuboid { min: Vec3, max: Vec3 },
    Sphere { center: Vec3, radius: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub texture: Texture,
    /// First frame index in which the primitive exists.
    pub appears_at: usize,
}

impl Primitive {
    pub fn new(shape: Shape, texture: Texture) -> Self {
        Self { shape, texture, appears_at: 0 }
    }
}

/// Ray parameter and unit normal of the nearest hit with `t > t_min`.
fn intersect(shape: &Shape, o: &Vec3, d: &Vec3, t_min: f64) -> Option<(f64, Vec3)> {
    match shape {
        Shape::Rect { center, u, v, half } => {
            let n = u.cross(v);
            let den = n.dot(d);
            if den.abs() < 1e-15 {
                return None;
            }
            let t = n.dot(&(center - o)) / den;
            if t <= t_min {
                return None;
            }
            let q = o + d * t - center;
            (q.dot(u).abs() <= half.0 && q.dot(v).abs() <= half.1).then_some((t, n))
        }
        Shape::Cuboid { min, max } => {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            let (mut ax0, mut ax1) = (0, 0);
            for a in 0..3 {
                if d[a].abs() < 1e-15 {
                    if o[a] < min[a] || o[a] > max[a] {
                        return None;
                    }
                    continue;
                }
                let (mut ta, mut tb) = ((min[a] - o[a]) / d[a], (max[a] - o[a]) / d[a]);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                if ta > t0 {
                    t0 = ta;
                    ax0 = a;
                }
                if tb < t1 {
                    t1 = tb;
                    ax1 = a;
                }
            }
            if t0 > t1 {
                return None;
            }
            let (t, a) = if t0 > t_min { (t0, ax0) } else if t1 > t_min { (t1, ax1) } else { return None };
            let mut n = Vec3::zeros();
            n[a] = 1.0;
            Some((t, n))
        }
        Shape::Sphere { center, radius } => {
            let oc = o - center;
            let (a, b, c) = (d.dot(d), 2.0 * oc.dot(d), oc.dot(&oc) - radius * radius);
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            // Numerically stable pair of roots.
            let q = -0.5 * (b + b.signum() * s);
            let (mut r0, mut r1) = (q / a, c / q);
            if r0 > r1 {
                std::mem::swap(&mut r0, &mut r1);
            }
            let t = if r0 > t_min { r0 } else if r1 > t_min { r1 } else { return None };
            Some((t, (o + d * t - center) / *radius))
        }
    }
}

/// Camera-to-world pose at `eye` looking at `target`, world z up; camera
/// axes are x right, y down, z forward.
pub fn look_at(eye: &Vec3, target: &Vec3) -> Pose {
    let f = (target - eye).normalize();
    let up = Vec3::z();
    let r = match f.cross(&up).try_normalize(1e-9) {
        Some(r) => r,
        None => f.cross(&Vec3::x()).normalize(),
    };
    let d = f.cross(&r);
    Pose::from_matrix(&Mat3::from_columns(&[r, d, f]), *eye)
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrajectorySpec {
    /// Eye on a horizontal circle; the camera looks at a point `look_offset`
    /// meters further out along the radius (negative looks inward) at
    /// height `look_height`.
    Orbit { center: Vec3, radius: f64, start: f64, sweep: f64, look_offset: f64, look_height: f64 },
    /// Catmull-Rom through (eye, target) keypoints.
    Keypoints(Vec<(Vec3, Vec3)>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    /// Depth std-dev is `kappa * d^2`.
    pub kappa: f64,
    pub dropout: f64,
    /// Depth quantization step in meters; 0 disables.
    pub quantization: f64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self { kappa: 0.0, dropout: 0.0, quantization: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Light {
    pub position: Vec3,
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub name: String,
    pub primitives: Vec<Primitive>,
    pub lights: Vec<Light>,
    pub ambient: f64,
    pub trajectory: TrajectorySpec,
    pub frames: usize,
    pub fps: f64,
    pub noise: NoiseSpec,
    pub intrinsics: Intrinsics,
}

fn catmull_rom(p: [&Vec3; 4], t: f64) -> Vec3 {
    let (t2, t3) = (t * t, t * t * t);
    (p[1] * 2.0 + (p[2] - p[0]) * t + (p[0] * 2.0 - p[1] * 5.0 + p[2] * 4.0 - p[3]) * t2 + (p[3] - p[0] + (p[1] - p[2]) * 3.0) * t3) * 0.5
}

impl SceneSpec {
    pub fn timestamp(&self, index: usize) -> f64 {
        index as f64 / self.fps
    }

    pub fn pose(&self, index: usize) -> Pose {
        let s = if self.frames > 1 { index as f64 / (self.frames - 1) as f64 } else { 0.0 };
        match &self.trajectory {
            TrajectorySpec::Orbit { center, radius, start, sweep, look_offset, look_height } => {
                let a = start + sweep * s;
                let dir = Vec3::new(a.cos(), a.sin(), 0.0);
                let eye = center + dir * *radius;
                let mut target = center + dir * (radius + look_offset);
                target.z = *look_height;
                look_at(&eye, &target)
            }
            TrajectorySpec::Keypoints(kp) => {
                let n = kp.len();
                if n == 1 {
                    return look_at(&kp[0].0, &kp[0].1);
                }
                let x = s * (n - 1) as f64;
                let i = (x.floor() as usize).min(n - 2);
                let t = x - i as f64;
                let idx = |k: i64| k.clamp(0, n as i64 - 1) as usize;
                let ids = [idx(i as i64 - 1), i, i + 1, idx(i as i64 + 2)];
                let eye = catmull_rom(ids.map(|j| &kp[j].0), t);
                let target = catmull_rom(ids.map(|j| &kp[j].1), t);
                look_at(&eye, &target)
            }
        }
    }

    pub fn trajectory(&self) -> Vec<(f64, Pose)> {
        (0..self.frames).map(|i| (self.timestamp(i), self.pose(i))).collect()
    }

    /// Nearest hit along a world ray among primitives present at `frame`.
    pub fn cast(&self, o: &Vec3, d: &Vec3, frame: usize) -> Option<(f64, Vec3, &Primitive)> {
        let mut best: Option<(f64, Vec3, &Primitive)> = None;
        for p in self.primitives.iter().filter(|p| p.appears_at <= frame) {
            if let Some((t, n)) = intersect(&p.shape, o, d, 1e-9) {
                if best.as_ref().is_none_or(|b| t < b.0) {
                    best = Some((t, n, p));
                }
            }
        }
        best
    }

    fn shade(&self, p: &Vec3, n: &Vec3, view: &Vec3, albedo: Vec3) -> Vec3 {
        let n = if n.dot(view) > 0.0 { -n } else { *n };
        let mut light = self.ambient;
        for l in &self.lights {
            let dir = (l.position - p).normalize();
            light += l.intensity * n.dot(&dir).max(0.0);
        }
        (albedo * light).map(|c| c.clamp(0.0, 1.0))
    }

    /// Exact depth and shaded float color at `index`.
    pub fn render_float(&self, index: usize) -> Result<(Image<Vec3>, Image<f64>, Pose), SynthError> {
        if index >= self.frames {
            return Err(SynthError::FrameOutOfRange { index, count: self.frames });
        }
        let pose = self.pose(index);
        let k = self.intrinsics;
        let r = pose.rotation_matrix();
        let o = pose.translation();
        let px: Vec<(Vec3, f64)> = (0..k.width * k.height)
            .into_par_iter()
            .map(|i| {
                let (x, y) = (i % k.width, i / k.width);
                // z-component of the camera-frame ray is 1, so t is z-depth.
                let d = r * k.ray(x as f64, y as f64);
                match self.cast(&o, &d, index) {
                    Some((t, n, prim)) => {
                        let p = o + d * t;
                        (self.shade(&p, &n, &d, prim.texture.albedo(&p)), t)
                    }
                    None => (Vec3::zeros(), 0.0),
                }
            })
            .collect();
        let color = Image::from_vec(k.width, k.height, px.iter().map(|p| p.0).collect());
        let depth = Image::from_vec(k.width, k.height, px.iter().map(|p| p.1).collect());
        Ok((color, depth, pose))
    }

    /// Noise-free frame and its ground-truth pose.
    pub fn render_ground_truth(&self, index: usize) -> Result<(RawFrame, Pose), SynthError> {
        let (color, depth, pose) = self.render_float(index)?;
        let bytes = color.map_par(|c| {
            let q = c.map(|v| (v * 255.0).round() as u8);
            [q.x, q.y, q.z]
        });
        let raw = RawFrame::new(bytes, depth, self.timestamp(index), index).expect("matching sizes");
        Ok((raw, pose))
    }

    /// Frame with the spec's noise applied, seeded per frame.
    pub fn render_noisy(&self, index: usize, seed: u64) -> Result<(RawFrame, Pose), SynthError> {
        let (raw, pose) = self.render_ground_truth(index)?;
        Ok((corrupt(&raw, &self.noise, seed.wrapping_mul(0x100_0000_01b3).wrapping_add(index as u64)), pose))
    }
}

/// Adds `N(0, (kappa d^2)^2)` depth noise, drops pixels with probability
/// `dropout` and quantizes. Deterministic in `seed`.
pub fn corrupt(frame: &RawFrame, noise: &NoiseSpec, seed: u64) -> RawFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = frame.clone();
    for d in out.depth.as_mut_slice() {
        if *d <= 0.0 {
            continue;
        }
        let z: f64 = StandardNormal.sample(&mut rng);
        let drop = rng.random::<f64>() < noise.dropout;
        if drop {
            *d = 0.0;
            continue;
        }
        let mut v = *d + noise.kappa * *d * *d * z;
        if noise.quantization > 0.0 {
            v = (v / noise.quantization).round() * noise.quantization;
        }
        *d = if v > 0.0 { v } else { 0.0 };
    }
    out
}

fn icosphere(level: usize) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut f: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut mid = std::collections::HashMap::new();
        let mut midpoint = |a: u32, b: u32, v: &mut Vec<Vec3>| {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                v.push(((v[a as usize] + v[b as usize]) * 0.5).normalize());
                (v.len() - 1) as u32
            })
        };
        let mut nf = Vec::with_capacity(f.len() * 4);
        for [a, b, c] in f {
            let ab = midpoint(a, b, &mut v);
            let bc = midpoint(b, c, &mut v);
            let ca = midpoint(c, a, &mut v);
            nf.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        f = nf;
    }
    (v, f)
}

fn append(mesh: &mut Mesh, verts: &[Vec3], faces: &[[u32; 3]]) {
    let base = mesh.vertices.len() as u32;
    mesh.vertices.extend_from_slice(verts);
    mesh.faces.extend(faces.iter().map(|f| f.map(|i| i + base)));
}

/// Triangle mesh of one shape; spheres are icospheres at `sphere_level`.
pub fn shape_mesh(shape: &Shape, sphere_level: usize) -> Mesh {
    let mut m = Mesh::default();
    match shape {
        Shape::Rect { center, u, v, half } => {
            let (a, b) = (u * half.0, v * half.1);
            append(&mut m, &[center - a - b, center + a - b, center + a + b, center - a + b], &[[0, 1, 2], [0, 2, 3]]);
        }
        Shape::Cuboid { min, max } => {
            let c = |i: usize| Vec3::new(if i & 1 == 1 { max.x } else { min.x }, if i & 2 == 2 { max.y } else { min.y }, if i & 4 == 4 { max.z } else { min.z });
            let verts: Vec<Vec3> = (0..8).map(c).collect();
            let faces = [
                [0, 2, 1],
                [1, 2, 3],
                [4, 5, 6],
                [5, 7, 6],
                [0, 1, 4],
                [1, 5, 4],
                [2, 6, 3],
                [3, 6, 7],
                [0, 4, 2],
                [2, 4, 6],
                [1, 3, 5],
                [3, 7, 5],
            ];
            append(&mut m, &verts, &faces);
        }
        Shape::Sphere { center, radius } => {
            let (v, f) = icosphere(sphere_level);
            let v: Vec<Vec3> = v.iter().map(|p| center + p * *radius).collect();
            append(&mut m, &v, &f);
        }
    }
    m
}

/// Union of all primitive meshes (regardless of appearance frame).
pub fn ground_truth_mesh(spec: &SceneSpec, sphere_level: usize) -> Mesh {
    let mut m = Mesh::default();
    for p in &spec.primitives {
        let s = shape_mesh(&p.shape, sphere_level);
        append(&mut m, &s.vertices, &s.faces);
    }
    m
}

#[cfg(test)]
mod tests;
