//! Front-to-back alpha compositing of Gaussian surfels with per-pixel
//! ray/disk intersection.

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{project, Intrinsics, Pose, Vec2, Vec3};
use crate::image::Image;
use crate::sh;
use crate::surfel::{Surfel, SurfelMap};

pub const ALPHA_MAX: f64 = 0.999;
pub const T_MIN: f64 = 1e-4;
pub const EPS_PX: f64 = 1e-3;
pub const NEAR_PLANE: f64 = 0.01;
pub const SIGMA_EXTENT: f64 = 3.0;
/// Squared Mahalanobis radius beyond which a weight is treated as zero.
pub const MAX_SQ_RADIUS: f64 = 9.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderOptions {
    pub sh_degree: usize,
    pub tile_size: usize,
    #[serde(skip)]
    pub keep_contributors: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { sh_degree: 1, tile_size: 16, keep_contributors: false }
    }
}

impl RenderOptions {
    pub fn with_contributors(mut self) -> Self {
        self.keep_contributors = true;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplatFootprint {
    pub surfel_id: usize,
    /// Camera-frame center.
    pub center: Vec3,
    /// Camera-frame unit tangent axes and normal.
    pub axis_u: Vec3,
    pub axis_v: Vec3,
    pub normal: Vec3,
    pub scale: Vector2<f64>,
    /// Inclusive pixel bounds `[x0, y0, x1, y1]`, clipped to the image.
    pub bbox: [usize; 4],
    pub mean: Vec2,
    pub opacity: f64,
    /// Clamped view-dependent color and per-channel "inside clamp" flags.
    pub color: Vec3,
    pub color_active: [bool; 3],
    /// Unit world-frame direction from the camera center to the surfel.
    pub view_dir: Vec3,
    pub view_dist: f64,
}

impl SplatFootprint {
    #[inline]
    pub fn covers(&self, x: usize, y: usize) -> bool {
        x >= self.bbox[0] && x <= self.bbox[2] && y >= self.bbox[1] && y <= self.bbox[3]
    }
}

/// Ray/disk intersection in tangent-frame units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplatHit {
    pub a: f64,
    pub b: f64,
    pub weight: f64,
    /// Camera-frame z of the intersection.
    pub depth: f64,
    /// `n . r` for the pixel ray.
    pub denom: f64,
    pub ray: Vec3,
}

#[inline]
pub fn intersect(fp: &SplatFootprint, ray: &Vec3) -> Option<SplatHit> {
    let denom = fp.normal.dot(ray);
    if denom.abs() < 1e-12 {
        return None;
    }
    let lambda = fp.normal.dot(&fp.center) / denom;
    if !(lambda > 0.0) {
        return None;
    }
    let diff = ray * lambda - fp.center;
    let a = fp.axis_u.dot(&diff) / fp.scale.x;
    let b = fp.axis_v.dot(&diff) / fp.scale.y;
    Some(SplatHit { a, b, weight: (-0.5 * (a * a + b * b)).exp(), depth: lambda, denom, ray: *ray })
}

/// Weight and intersection depth of a footprint at pixel `u`. A ray parallel
/// to the disk gets weight 0.
pub fn splat_weight(fp: &SplatFootprint, u: &Vec2, k: &Intrinsics) -> (f64, f64) {
    match intersect(fp, &k.ray(u.x, u.y)) {
        Some(h) => (h.weight, h.depth),
        None => (0.0, f64::INFINITY),
    }
}

pub fn project_surfel(surfel: &Surfel, id: usize, pose: &Pose, k: &Intrinsics, sh_degree: usize) -> Option<SplatFootprint> {
    let w2c = pose.inverse();
    let n_w = surfel.normal();
    if !(n_w.dot(&pose.z_axis()) < 0.0) {
        return None;
    }
    let center = w2c.transform_point(&surfel.position);
    if !(center.z > NEAR_PLANE) {
        return None;
    }
    let rc = w2c.rotation_matrix() * surfel.rotation_matrix();
    let axis_u: Vec3 = rc.column(0).into();
    let axis_v: Vec3 = rc.column(1).into();
    let normal: Vec3 = rc.column(2).into();
    let eu = axis_u * (SIGMA_EXTENT * surfel.scale.x);
    let ev = axis_v * (SIGMA_EXTENT * surfel.scale.y);
    let (mut xmin, mut ymin, mut xmax, mut ymax) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (su, sv) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
        let c = center + eu * su + ev * sv;
        if !(c.z > NEAR_PLANE) {
            return None;
        }
        let q = project(k, &c).ok()?;
        xmin = xmin.min(q.x);
        xmax = xmax.max(q.x);
        ymin = ymin.min(q.y);
        ymax = ymax.max(q.y);
    }
    let w = k.width as f64;
    let h = k.height as f64;
    if xmax < 0.0 || ymax < 0.0 || xmin > w - 1.0 || ymin > h - 1.0 {
        return None;
    }
    let x0 = xmin.ceil().max(0.0);
    let y0 = ymin.ceil().max(0.0);
    let x1 = xmax.floor().min(w - 1.0);
    let y1 = ymax.floor().min(h - 1.0);
    if x1 < x0 || y1 < y0 {
        return None;
    }
    let mean = project(k, &center).ok()?;
    let to_surfel = surfel.position - pose.translation();
    let view_dist = to_surfel.norm();
    let view_dir = to_surfel / view_dist;
    let raw = sh::eval_raw(&surfel.sh, &view_dir, sh_degree);
    let color = raw.map(|c| c.clamp(0.0, 1.0));
    let color_active = [raw.x == color.x, raw.y == color.y, raw.z == color.z];
    Some(SplatFootprint {
        surfel_id: id,
        center,
        axis_u,
        axis_v,
        normal,
        scale: surfel.scale,
        bbox: [x0 as usize, y0 as usize, x1 as usize, y1 as usize],
        mean,
        opacity: surfel.opacity,
        color,
        color_active,
        view_dir,
        view_dist,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contributor {
    /// Index into [`Contributors::footprints`].
    pub footprint: u32,
    pub alpha: f64,
    /// Transmittance in front of this contributor.
    pub transmittance: f64,
}

/// Per-pixel contributor lists in compositing order, stored CSR-style.
#[derive(Clone, Debug, PartialEq)]
pub struct Contributors {
    pub sh_degree: usize,
    pub footprints: Vec<SplatFootprint>,
    pub offsets: Vec<usize>,
    pub entries: Vec<Contributor>,
}

impl Contributors {
    pub fn pixel(&self, index: usize) -> &[Contributor] {
        &self.entries[self.offsets[index]..self.offsets[index + 1]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: Image<Vec3>,
    /// Zero where `alpha < EPS_PX`.
    pub depth: Image<f64>,
    /// Camera-frame unit normal; zero where invalid.
    pub normal: Image<Vec3>,
    pub alpha: Image<f64>,
    pub contributors: Option<Contributors>,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.color.width()
    }

    pub fn height(&self) -> usize {
        self.color.height()
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            color: Image::new(width, height, Vec3::zeros()),
            depth: Image::new(width, height, 0.0),
            normal: Image::new(width, height, Vec3::zeros()),
            alpha: Image::new(width, height, 0.0),
            contributors: None,
        }
    }
}

/// Composited result for one pixel.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct PixelOut {
    color: Vec3,
    depth: f64,
    normal: Vec3,
    alpha: f64,
}

struct TileOut {
    rect: [usize; 4],
    pixels: Vec<PixelOut>,
    counts: Vec<usize>,
    entries: Vec<Contributor>,
}

fn shade_pixel(
    x: usize,
    y: usize,
    list: &[u32],
    fps: &[SplatFootprint],
    k: &Intrinsics,
    scratch: &mut Vec<(f64, usize, u32, f64)>,
    entries: Option<&mut Vec<Contributor>>,
) -> (PixelOut, usize) {
    scratch.clear();
    let ray = k.ray(x as f64, y as f64);
    for &fi in list {
        let fp = &fps[fi as usize];
        if !fp.covers(x, y) {
            continue;
        }
        if let Some(h) = intersect(fp, &ray) {
            if h.a * h.a + h.b * h.b <= MAX_SQ_RADIUS {
                scratch.push((h.depth, fp.surfel_id, fi, h.weight));
            }
        }
    }
    scratch.sort_unstable_by(|p, q| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1)));
    let mut t = 1.0;
    let mut color = Vec3::zeros();
    let mut depth = 0.0;
    let mut normal = Vec3::zeros();
    let mut count = 0;
    let mut sink = entries;
    for &(d, _, fi, g) in scratch.iter() {
        let fp = &fps[fi as usize];
        let alpha = (g * fp.opacity).min(ALPHA_MAX);
        let w = t * alpha;
        color += fp.color * w;
        depth += d * w;
        normal += fp.normal * w;
        if let Some(e) = sink.as_deref_mut() {
            e.push(Contributor { footprint: fi, alpha, transmittance: t });
        }
        count += 1;
        t *= 1.0 - alpha;
        if t < T_MIN {
            break;
        }
    }
    let acc = 1.0 - t;
    let mut out = PixelOut { color, depth: 0.0, normal: Vec3::zeros(), alpha: acc };
    if acc >= EPS_PX {
        out.depth = depth / acc;
        let len = normal.norm();
        if len > 0.0 {
            out.normal = normal / len;
        }
    }
    (out, count)
}

fn render_tile(rect: [usize; 4], list: &[u32], fps: &[SplatFootprint], k: &Intrinsics, keep: bool) -> TileOut {
    let [x0, y0, x1, y1] = rect;
    let n = (x1 - x0) * (y1 - y0);
    let mut pixels = Vec::with_capacity(n);
    let mut counts = Vec::with_capacity(if keep { n } else { 0 });
    let mut entries = Vec::new();
    let mut scratch = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            let (p, c) = shade_pixel(x, y, list, fps, k, &mut scratch, if keep { Some(&mut entries) } else { None });
            pixels.push(p);
            if keep {
                counts.push(c);
            }
        }
    }
    TileOut { rect, pixels, counts, entries }
}

fn project_all(map: &SurfelMap, pose: &Pose, k: &Intrinsics, sh_degree: usize, parallel: bool) -> Vec<SplatFootprint> {
    let f = |(i, s): (usize, &Surfel)| project_surfel(s, i, pose, k, sh_degree);
    if parallel {
        let v: Vec<Option<SplatFootprint>> = map.surfels().par_iter().enumerate().map(f).collect();
        v.into_iter().flatten().collect()
    } else {
        map.surfels().iter().enumerate().filter_map(f).collect()
    }
}

fn render_with_tiles(map: &SurfelMap, pose: &Pose, k: &Intrinsics, opts: &RenderOptions, tile: Option<usize>) -> RenderOutput {
    let (w, h) = (k.width, k.height);
    let parallel = tile.is_some();
    let fps = project_all(map, pose, k, opts.sh_degree, parallel);
    let (tw, th) = match tile {
        Some(t) => (t, t),
        None => (w.max(1), h.max(1)),
    };
    let ntx = w.div_ceil(tw);
    let nty = h.div_ceil(th);
    let mut lists: Vec<Vec<u32>> = vec![Vec::new(); ntx * nty];
    for (fi, fp) in fps.iter().enumerate() {
        for ty in fp.bbox[1] / th..=fp.bbox[3] / th {
            for tx in fp.bbox[0] / tw..=fp.bbox[2] / tw {
                lists[ty * ntx + tx].push(fi as u32);
            }
        }
    }
    let rects: Vec<[usize; 4]> = (0..ntx * nty)
        .map(|i| {
            let (tx, ty) = (i % ntx, i / ntx);
            [tx * tw, ty * th, ((tx + 1) * tw).min(w), ((ty + 1) * th).min(h)]
        })
        .collect();
    let keep = opts.keep_contributors;
    let tiles: Vec<TileOut> = if parallel {
        rects.par_iter().zip(lists.par_iter()).map(|(r, l)| render_tile(*r, l, &fps, k, keep)).collect()
    } else {
        rects.iter().zip(lists.iter()).map(|(r, l)| render_tile(*r, l, &fps, k, keep)).collect()
    };

    let mut out = RenderOutput::empty(w, h);
    let mut counts = if keep { vec![0usize; w * h] } else { Vec::new() };
    for t in &tiles {
        let [x0, y0, x1, _] = t.rect;
        let tw = x1 - x0;
        for (j, p) in t.pixels.iter().enumerate() {
            let (x, y) = (x0 + j % tw, y0 + j / tw);
            out.color.set(x, y, p.color);
            out.depth.set(x, y, p.depth);
            out.normal.set(x, y, p.normal);
            out.alpha.set(x, y, p.alpha);
            if keep {
                counts[y * w + x] = t.counts[j];
            }
        }
    }
    if keep {
        let mut offsets = Vec::with_capacity(w * h + 1);
        offsets.push(0);
        for c in &counts {
            offsets.push(offsets.last().unwrap() + c);
        }
        let mut entries = vec![Contributor { footprint: 0, alpha: 0.0, transmittance: 0.0 }; *offsets.last().unwrap()];
        for t in &tiles {
            let [x0, y0, x1, _] = t.rect;
            let tw = x1 - x0;
            let mut src = 0;
            for (j, c) in t.counts.iter().enumerate() {
                let idx = (y0 + j / tw) * w + x0 + j % tw;
                entries[offsets[idx]..offsets[idx] + c].copy_from_slice(&t.entries[src..src + c]);
                src += c;
            }
        }
        out.contributors = Some(Contributors { sh_degree: opts.sh_degree, footprints: fps, offsets, entries });
    }
    out
}

/// Single-threaded reference renderer.
pub fn render(map: &SurfelMap, pose: &Pose, k: &Intrinsics, opts: &RenderOptions) -> RenderOutput {
    render_with_tiles(map, pose, k, opts, None)
}

/// Tile-parallel renderer; bitwise identical to [`render`].
pub fn render_tiled(map: &SurfelMap, pose: &Pose, k: &Intrinsics, opts: &RenderOptions, tile_size: usize) -> RenderOutput {
    render_with_tiles(map, pose, k, opts, Some(tile_size.max(8)))
}
