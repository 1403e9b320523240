//! Gaussian surfels, the map that holds them, and the rules that decide where
//! new surfels spawn and which ones take part in fusion.

use std::collections::HashMap;

use nalgebra::{UnitQuaternion, Vector2, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{is_valid_depth, transform_to_world, ProcessedFrame};
use crate::fusion::NoiseParams;
use crate::geometry::{project, tangent_basis, Intrinsics, Mat3, Pose, Vec3};
use crate::raster::RenderOutput;
use crate::sh::{self, SH_COEFFS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurfelError {
    #[error("invalid depth {0}")]
    InvalidDepth(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurfelConfig {
    /// Pixel scaling factor of the adaptive scale rule.
    pub alpha_s: f64,
    /// Sample every `stride`-th pixel in each dimension.
    pub stride: usize,
    /// Accumulated-opacity threshold below which a pixel counts as uncovered.
    pub tau_o: f64,
    /// Rendered-minus-observed depth above which a pixel is new foreground.
    pub tau_d: f64,
    pub o_init: f64,
    pub sh_degree: usize,
    /// Spatial index cell edge in meters.
    pub cell_size: f64,
}

impl Default for SurfelConfig {
    fn default() -> Self {
        Self { alpha_s: 2.0, stride: 2, tau_o: 0.5, tau_d: 0.06, o_init: 0.8, sh_degree: 1, cell_size: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Surfel {
    pub position: Vec3,
    pub scale: Vector2<f64>,
    /// World rotation; its local z-axis is the disk normal.
    pub rotation: UnitQuaternion<f64>,
    pub opacity: f64,
    /// Spherical-harmonic coefficients, one RGB triple per basis function.
    pub sh: [Vec3; SH_COEFFS],
    /// Diagonal of the information matrix over `[p, n]`.
    pub lambda: Vector6<f64>,
    pub eta: Vector6<f64>,
    /// Geometry snapshotted by the most recent fusion or spawn.
    pub anchor_position: Vec3,
    pub anchor_normal: Vec3,
    pub created_frame: usize,
    pub last_observed: usize,
}

impl Surfel {
    #[inline]
    pub fn normal(&self) -> Vec3 {
        self.rotation * Vec3::z()
    }

    #[inline]
    pub fn rotation_matrix(&self) -> Mat3 {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// `tr(Lambda)`.
    #[inline]
    pub fn confidence(&self) -> f64 {
        self.lambda.sum()
    }

    /// Filter mean `Lambda^-1 eta`, if every information component is positive.
    pub fn filter_state(&self) -> Option<Vector6<f64>> {
        if self.lambda.iter().all(|l| *l > 0.0) {
            Some(self.eta.component_div(&self.lambda))
        } else {
            None
        }
    }

    pub fn base_color(&self) -> Vec3 {
        sh::dc_to_rgb(&self.sh[0])
    }

    pub fn set_anchor_from_state(&mut self) {
        self.anchor_position = self.position;
        self.anchor_normal = self.normal();
    }
}

/// Rotation whose local z-axis is `n`, with tangents from [`tangent_basis`].
pub fn rotation_from_normal(n: &Vec3) -> UnitQuaternion<f64> {
    let b = tangent_basis(n);
    UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(b))
}

pub fn adaptive_scale(d: f64, k: &Intrinsics, alpha_s: f64) -> Result<Vector2<f64>, SurfelError> {
    if !(d > 0.0 && d.is_finite()) {
        return Err(SurfelError::InvalidDepth(d));
    }
    Ok(Vector2::new(alpha_s * d / k.fx, alpha_s * d / k.fy))
}

pub type CellKey = [i32; 3];

/// Surfels plus a uniform voxel hash over their centers. Ids are indices and
/// never change.
#[derive(Clone, Debug)]
pub struct SurfelMap {
    surfels: Vec<Surfel>,
    cells: Vec<CellKey>,
    index: HashMap<CellKey, Vec<usize>>,
    cell_size: f64,
}

impl Default for SurfelMap {
    fn default() -> Self {
        Self::new(SurfelConfig::default().cell_size)
    }
}

impl SurfelMap {
    pub fn new(cell_size: f64) -> Self {
        assert!(cell_size > 0.0);
        Self { surfels: Vec::new(), cells: Vec::new(), index: HashMap::new(), cell_size }
    }

    pub fn from_surfels(surfels: Vec<Surfel>, cell_size: f64) -> Self {
        let mut m = Self::new(cell_size);
        m.extend(surfels);
        m
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }

    #[inline]
    pub fn surfels(&self) -> &[Surfel] {
        &self.surfels
    }

    #[inline]
    pub fn get(&self, id: usize) -> &Surfel {
        &self.surfels[id]
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn cell_of(&self, p: &Vec3) -> CellKey {
        let s = self.cell_size;
        [(p.x / s).floor() as i32, (p.y / s).floor() as i32, (p.z / s).floor() as i32]
    }

    /// Appends surfels, returning the first new id.
    pub fn extend(&mut self, new: Vec<Surfel>) -> usize {
        let first = self.surfels.len();
        for s in new {
            let id = self.surfels.len();
            let key = self.cell_of(&s.position);
            self.index.entry(key).or_default().push(id);
            self.cells.push(key);
            self.surfels.push(s);
        }
        first
    }

    /// Replaces a batch of surfels and keeps the spatial index consistent.
    pub fn update(&mut self, batch: Vec<(usize, Surfel)>) {
        for (id, s) in batch {
            let key = self.cell_of(&s.position);
            let old = self.cells[id];
            if key != old {
                if let Some(list) = self.index.get_mut(&old) {
                    list.retain(|&i| i != id);
                    if list.is_empty() {
                        self.index.remove(&old);
                    }
                }
                self.index.entry(key).or_default().push(id);
                self.cells[id] = key;
            }
            self.surfels[id] = s;
        }
    }

    /// Mutable access for parameter updates that are followed by [`Self::reindex`].
    pub fn surfels_mut(&mut self) -> &mut [Surfel] {
        &mut self.surfels
    }

    pub fn reindex(&mut self) {
        self.index.clear();
        for (id, s) in self.surfels.iter().enumerate() {
            let key = [
                (s.position.x / self.cell_size).floor() as i32,
                (s.position.y / self.cell_size).floor() as i32,
                (s.position.z / self.cell_size).floor() as i32,
            ];
            self.index.entry(key).or_default().push(id);
            self.cells[id] = key;
        }
    }

    pub fn ids_in_cell(&self, key: &CellKey) -> &[usize] {
        self.index.get(key).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn occupied_cells(&self) -> impl Iterator<Item = &CellKey> {
        self.index.keys()
    }

    /// Ids whose centers lie within `radius` of `p`.
    pub fn query_radius(&self, p: &Vec3, radius: f64) -> Vec<usize> {
        let r = (radius / self.cell_size).ceil() as i32;
        let c = self.cell_of(p);
        let mut out = Vec::new();
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    for &id in self.ids_in_cell(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        if (self.surfels[id].position - p).norm() <= radius {
                            out.push(id);
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Spawns surfels at sampled pixels that are uncovered (`alpha < tau_o`) or
/// observed in front of the model (`rendered - observed > tau_d`).
pub fn initialize_surfels(
    frame: &ProcessedFrame,
    pose: &Pose,
    render: &RenderOutput,
    noise: &NoiseParams,
    cfg: &SurfelConfig,
) -> Vec<Surfel> {
    let k = &frame.intrinsics;
    let stride = cfg.stride.max(1);
    let (vw, nw) = transform_to_world(frame, pose);
    let frame_id = frame.frame_id();
    let rows: Vec<usize> = (0..frame.height()).step_by(stride).collect();
    let per_row: Vec<Vec<Surfel>> = rows
        .par_iter()
        .map(|&y| {
            let mut out = Vec::new();
            for x in (0..frame.width()).step_by(stride) {
                if !*frame.valid.get(x, y) {
                    continue;
                }
                let d = *frame.depth.get(x, y);
                let uncovered = *render.alpha.get(x, y) < cfg.tau_o;
                let rd = *render.depth.get(x, y);
                let foreground = is_valid_depth(rd) && rd - d > cfg.tau_d;
                if !(uncovered || foreground) {
                    continue;
                }
                let p = *vw.get(x, y);
                let n = *nw.get(x, y);
                let scale = adaptive_scale(d, k, cfg.alpha_s).expect("valid pixel has positive depth");
                let mut sh = [Vec3::zeros(); SH_COEFFS];
                sh[0] = sh::rgb_to_dc(frame.color.get(x, y));
                let lambda = noise.information(d);
                let mut state = Vector6::zeros();
                state.fixed_rows_mut::<3>(0).copy_from(&p);
                state.fixed_rows_mut::<3>(3).copy_from(&n);
                out.push(Surfel {
                    position: p,
                    scale,
                    rotation: rotation_from_normal(&n),
                    opacity: cfg.o_init,
                    sh,
                    lambda,
                    eta: lambda.component_mul(&state),
                    anchor_position: p,
                    anchor_normal: n,
                    created_frame: frame_id,
                    last_observed: frame_id,
                });
            }
            out
        })
        .collect();
    per_row.into_iter().flatten().collect()
}

/// Surfels whose center projects inside the image and whose normal faces the
/// camera (`n . z_cam < 0`, strict).
pub fn select_visible(map: &SurfelMap, pose: &Pose, k: &Intrinsics) -> Vec<usize> {
    let w2c = pose.inverse();
    let zc = pose.z_axis();
    let flags: Vec<bool> = map
        .surfels()
        .par_iter()
        .map(|s| {
            if !(s.normal().dot(&zc) < 0.0) {
                return false;
            }
            let pc = w2c.transform_point(&s.position);
            match project(k, &pc) {
                Ok(u) => k.contains(&u),
                Err(_) => false,
            }
        })
        .collect();
    flags.iter().enumerate().filter(|(_, f)| **f).map(|(i, _)| i).collect()
}

/// Subset of `visible` lying within `delta_s` of the rendered depth at their
/// projected pixel.
pub fn select_surface(
    map: &SurfelMap,
    visible: &[usize],
    render_depth: &crate::image::Image<f64>,
    pose: &Pose,
    k: &Intrinsics,
    delta_s: f64,
) -> Vec<usize> {
    let w2c = pose.inverse();
    visible
        .iter()
        .copied()
        .filter(|&id| {
            let pc = w2c.transform_point(&map.get(id).position);
            let Ok(u) = project(k, &pc) else { return false };
            let Some((x, y)) = k.pixel_index(&u) else { return false };
            if delta_s == f64::INFINITY {
                return true;
            }
            let rd = *render_depth.get(x, y);
            is_valid_depth(rd) && (pc.z - rd).abs() < delta_s
        })
        .collect()
}

pub fn extract_confident(map: &SurfelMap, tau_conf: f64) -> Vec<&Surfel> {
    map.surfels().iter().filter(|s| s.confidence() >= tau_conf).collect()
}
