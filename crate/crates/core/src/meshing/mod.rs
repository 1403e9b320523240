//! Surfel-masked TSDF fusion on a sparse block grid and marching-cubes
//! surface extraction.

mod cases;

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::frame::is_valid_depth;
use crate::geometry::{Intrinsics, Pose, Vec3};
use crate::image::Image;
use crate::surfel::SurfelMap;

pub const BLOCK: i64 = 8;
const BLOCK_VOXELS: usize = (BLOCK * BLOCK * BLOCK) as usize;

pub type VoxelKey = [i64; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshingConfig {
    pub voxel_size: f64,
    pub truncation: f64,
    pub dilation: usize,
    /// Restrict integration to voxels near surfel centers.
    pub use_mask: bool,
    /// Integrate sensor depth instead of rendered depth.
    pub raw_depth: bool,
}

impl Default for MeshingConfig {
    fn default() -> Self {
        Self { voxel_size: 0.01, truncation: 0.04, dilation: 2, use_mask: true, raw_depth: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lattice {
    pub origin: Vec3,
    pub voxel_size: f64,
}

impl Lattice {
    pub fn new(origin: Vec3, voxel_size: f64) -> Self {
        Self { origin, voxel_size }
    }

    pub fn voxel_of(&self, p: &Vec3) -> VoxelKey {
        let q = (p - self.origin) / self.voxel_size;
        [q.x.floor() as i64, q.y.floor() as i64, q.z.floor() as i64]
    }

    pub fn center(&self, v: &VoxelKey) -> Vec3 {
        self.origin + Vec3::new(v[0] as f64 + 0.5, v[1] as f64 + 0.5, v[2] as f64 + 0.5) * self.voxel_size
    }
}

#[derive(Clone, Debug)]
pub struct OccupancyGrid {
    pub lattice: Lattice,
    pub dilation: usize,
    occupied: HashSet<VoxelKey>,
}

impl OccupancyGrid {
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>, lattice: Lattice, dilation: usize) -> Self {
        let seeds: HashSet<VoxelKey> = points.into_iter().map(|p| lattice.voxel_of(p)).collect();
        let r = dilation as i64;
        let mut occupied = HashSet::with_capacity(seeds.len() * (2 * dilation + 1).pow(3));
        for s in &seeds {
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        occupied.insert([s[0] + dx, s[1] + dy, s[2] + dz]);
                    }
                }
            }
        }
        Self { lattice, dilation, occupied }
    }

    pub fn is_occupied(&self, v: &VoxelKey) -> bool {
        self.occupied.contains(v)
    }

    pub fn len(&self) -> usize {
        self.occupied.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupied.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &VoxelKey> {
        self.occupied.iter()
    }
}

/// Voxels containing a surfel center, dilated by a cube of radius `dilation`.
pub fn build_occupancy(map: &SurfelMap, lattice: Lattice, dilation: usize) -> OccupancyGrid {
    OccupancyGrid::from_points(map.surfels().iter().map(|s| &s.position), lattice, dilation)
}

#[derive(Clone, Debug)]
struct Block {
    tsdf: Vec<f64>,
    weight: Vec<f64>,
}

impl Block {
    fn new() -> Self {
        Self { tsdf: vec![0.0; BLOCK_VOXELS], weight: vec![0.0; BLOCK_VOXELS] }
    }
}

fn split(v: &VoxelKey) -> (VoxelKey, usize) {
    let b = [v[0].div_euclid(BLOCK), v[1].div_euclid(BLOCK), v[2].div_euclid(BLOCK)];
    let l = [v[0].rem_euclid(BLOCK), v[1].rem_euclid(BLOCK), v[2].rem_euclid(BLOCK)];
    (b, (l[0] + BLOCK * (l[1] + BLOCK * l[2])) as usize)
}

fn join(b: &VoxelKey, i: usize) -> VoxelKey {
    let i = i as i64;
    [b[0] * BLOCK + i % BLOCK, b[1] * BLOCK + (i / BLOCK) % BLOCK, b[2] * BLOCK + i / (BLOCK * BLOCK)]
}

/// Sparse truncated signed distance volume; `tsdf` is in units of the
/// truncation distance.
#[derive(Clone, Debug)]
pub struct TsdfVolume {
    pub lattice: Lattice,
    pub truncation: f64,
    blocks: HashMap<VoxelKey, Block>,
}

impl TsdfVolume {
    pub fn new(lattice: Lattice, truncation: f64) -> Self {
        Self { lattice, truncation, blocks: HashMap::new() }
    }

    /// `(tsdf, weight)` of an allocated voxel.
    pub fn get(&self, v: &VoxelKey) -> Option<(f64, f64)> {
        let (b, i) = split(v);
        self.blocks.get(&b).map(|blk| (blk.tsdf[i], blk.weight[i]))
    }

    pub fn set(&mut self, v: &VoxelKey, tsdf: f64, weight: f64) {
        let (b, i) = split(v);
        let blk = self.blocks.entry(b).or_insert_with(Block::new);
        blk.tsdf[i] = tsdf;
        blk.weight[i] = weight;
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Voxels with positive weight, in no particular order.
    pub fn observed(&self) -> impl Iterator<Item = (VoxelKey, f64, f64)> + '_ {
        self.blocks.iter().flat_map(|(b, blk)| {
            (0..BLOCK_VOXELS).filter(move |&i| blk.weight[i] > 0.0).map(move |i| (join(b, i), blk.tsdf[i], blk.weight[i]))
        })
    }

    fn sorted_block_keys(&self) -> Vec<VoxelKey> {
        let mut keys: Vec<VoxelKey> = self.blocks.keys().cloned().collect();
        keys.sort_unstable();
        keys
    }
}

/// Projective TSDF update with unit weight per observation. With a mask, a
/// voxel is written only if it is occupied and the surface point seen
/// through its pixel also falls in an occupied voxel.
pub fn integrate_depth(vol: &mut TsdfVolume, depth: &Image<f64>, pose: &Pose, k: &Intrinsics, mask: Option<&OccupancyGrid>) {
    let lat = vol.lattice;
    let mu = vol.truncation;
    let (w, h) = depth.dims();
    let occupied = |v: &VoxelKey| mask.is_none_or(|m| m.is_occupied(v));
    let surface_ok = |x: usize, y: usize, d: f64| occupied(&lat.voxel_of(&pose.transform_point(&(k.ray(x as f64, y as f64) * d))));

    let step = 0.5 * lat.voxel_size;
    let mut keys: Vec<VoxelKey> = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            let mut out = Vec::new();
            for x in 0..w {
                let d = *depth.get(x, y);
                if !is_valid_depth(d) || !surface_ok(x, y, d) {
                    continue;
                }
                let ray = k.ray(x as f64, y as f64);
                let dt = step / ray.norm();
                let n = (2.0 * mu / step).ceil() as usize;
                for s in 0..=n {
                    let t = d - mu + s as f64 * dt;
                    if t <= 0.0 {
                        continue;
                    }
                    let v = lat.voxel_of(&pose.transform_point(&(ray * t)));
                    if occupied(&v) {
                        out.push(split(&v).0);
                    }
                }
            }
            out.sort_unstable();
            out.dedup();
            out.into_iter()
        })
        .collect();
    keys.sort_unstable();
    keys.dedup();

    let w2c = pose.inverse();
    let updates: Vec<(VoxelKey, Block)> = keys
        .par_iter()
        .filter_map(|bk| {
            let mut blk = vol.blocks.get(bk).cloned().unwrap_or_else(Block::new);
            let mut changed = false;
            for i in 0..BLOCK_VOXELS {
                let v = join(bk, i);
                if !occupied(&v) {
                    continue;
                }
                let pc = w2c.transform_point(&lat.center(&v));
                if pc.z <= 0.0 {
                    continue;
                }
                let (u, vv) = (k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy);
                let (px, py) = (u.round(), vv.round());
                if px < 0.0 || py < 0.0 || px >= w as f64 || py >= h as f64 {
                    continue;
                }
                let (px, py) = (px as usize, py as usize);
                let d = *depth.get(px, py);
                if !is_valid_depth(d) || !surface_ok(px, py, d) {
                    continue;
                }
                let sdf = d - pc.z;
                if sdf < -mu {
                    continue;
                }
                let obs = (sdf / mu).min(1.0);
                let wt = blk.weight[i];
                blk.tsdf[i] = (blk.tsdf[i] * wt + obs) / (wt + 1.0);
                blk.weight[i] = wt + 1.0;
                changed = true;
            }
            changed.then_some((*bk, blk))
        })
        .collect();
    for (k, b) in updates {
        vol.blocks.insert(k, b);
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        let mut edges: HashSet<(u32, u32)> = HashSet::new();
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                edges.insert((a.min(b), a.max(b)));
            }
        }
        edges.len()
    }

    /// V - E + F over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let used: HashSet<u32> = self.faces.iter().flatten().cloned().collect();
        used.len() as i64 - self.edge_count() as i64 + self.faces.len() as i64
    }

    /// Area-weighted vertex normals.
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut n = vec![Vec3::zeros(); self.vertices.len()];
        for f in &self.faces {
            let [a, b, c] = f.map(|i| self.vertices[i as usize]);
            let fnrm = (b - a).cross(&(c - a));
            for &i in f {
                n[i as usize] += fnrm;
            }
        }
        n.into_iter().map(|v| v.try_normalize(1e-20).unwrap_or_else(Vec3::zeros)).collect()
    }

    /// Uniformly samples `n` points on the surface (area-weighted).
    pub fn sample_points(&self, n: usize, rng: &mut impl rand::Rng) -> Vec<Vec3> {
        let areas: Vec<f64> = self
            .faces
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|i| self.vertices[i as usize]);
                0.5 * (b - a).cross(&(c - a)).norm()
            })
            .collect();
        let total: f64 = areas.iter().sum();
        if total <= 0.0 || n == 0 {
            return Vec::new();
        }
        let mut cdf = Vec::with_capacity(areas.len());
        let mut acc = 0.0;
        for a in &areas {
            acc += a;
            cdf.push(acc);
        }
        (0..n)
            .map(|_| {
                let r = rng.random::<f64>() * total;
                let fi = cdf.partition_point(|&c| c < r).min(self.faces.len() - 1);
                let [a, b, c] = self.faces[fi].map(|i| self.vertices[i as usize]);
                let (mut u, mut v) = (rng.random::<f64>(), rng.random::<f64>());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                a + (b - a) * u + (c - a) * v
            })
            .collect()
    }
}

const CORNER_OFFSETS: [VoxelKey; 8] = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1]];

/// Edge key shared by all cells touching the edge: lower voxel and axis.
fn edge_key(cell: &VoxelKey, e: usize) -> (VoxelKey, u8) {
    let (a, b) = cases::EDGES[e];
    let o = CORNER_OFFSETS[a];
    let axis = (a ^ b).trailing_zeros() as u8;
    ([cell[0] + o[0], cell[1] + o[1], cell[2] + o[2]], axis)
}

/// Extracts the zero level set. Cells are polygonized only when all eight
/// corners have positive weight; vertices are shared between cells.
pub fn marching_cubes(vol: &TsdfVolume) -> Mesh {
    let table = cases::table();
    let keys = vol.sorted_block_keys();
    type Tri = [((VoxelKey, u8), Vec3); 3];
    let per_block: Vec<Vec<Tri>> = keys
        .par_iter()
        .map(|bk| {
            let mut tris = Vec::new();
            for i in 0..BLOCK_VOXELS {
                let cell = join(bk, i);
                let mut vals = [0.0; 8];
                let mut ok = true;
                for (c, o) in CORNER_OFFSETS.iter().enumerate() {
                    match vol.get(&[cell[0] + o[0], cell[1] + o[1], cell[2] + o[2]]) {
                        Some((t, w)) if w > 0.0 => vals[c] = t,
                        _ => {
                            ok = false;
                            break;
                        }
                    }
                }
                if !ok {
                    continue;
                }
                let case = (0..8).fold(0usize, |acc, c| acc | (((vals[c] < 0.0) as usize) << c));
                for t in &table[case] {
                    tris.push(t.map(|e| {
                        let (a, b) = cases::EDGES[e];
                        let s = vals[a] / (vals[a] - vals[b]);
                        let pa = vol.lattice.center(&[cell[0] + CORNER_OFFSETS[a][0], cell[1] + CORNER_OFFSETS[a][1], cell[2] + CORNER_OFFSETS[a][2]]);
                        let pb = vol.lattice.center(&[cell[0] + CORNER_OFFSETS[b][0], cell[1] + CORNER_OFFSETS[b][1], cell[2] + CORNER_OFFSETS[b][2]]);
                        (edge_key(&cell, e), pa + (pb - pa) * s)
                    }));
                }
            }
            tris
        })
        .collect();
    let mut mesh = Mesh::default();
    let mut ids: HashMap<(VoxelKey, u8), u32> = HashMap::new();
    for tris in per_block {
        for t in tris {
            let f = t.map(|(key, p)| {
                *ids.entry(key).or_insert_with(|| {
                    mesh.vertices.push(p);
                    (mesh.vertices.len() - 1) as u32
                })
            });
            mesh.faces.push(f);
        }
    }
    mesh
}
