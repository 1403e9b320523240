//! Dataset ingestion, artifact export and configuration files.

mod config;
mod ply;
mod tum;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion};
use thiserror::Error;

use crate::eval::Trajectory;
use crate::geometry::{Pose, Vec3};
use crate::image::Image;

pub use config::{Config, ExportConfig};
pub use ply::{read_mesh_ply, read_surfels_ply, write_mesh_ply, write_surfels_ply};
pub use tum::{load_tum, write_tum_sequence, DatasetHandle, FrameEntry, DEFAULT_INTRINSICS};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("dataset format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("dataset {0} has no associated rgb/depth pairs")]
    EmptyDataset(PathBuf),
    #[error("invalid PLY {path}: {msg}")]
    Ply { path: PathBuf, msg: String },
    #[error("invalid config: {0}")]
    Config(String),
}

impl IoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn format(path: &Path, msg: impl Into<String>) -> Self {
        IoError::Format { path: path.to_path_buf(), msg: msg.into() }
    }
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|e| IoError::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| IoError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    write_bytes(path, text.as_bytes())
}

/// Non-empty, non-comment lines split on whitespace, with 1-based line numbers.
pub(crate) fn records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| (i, l.split_whitespace().collect()))
}

fn fmt_num(v: f64) -> String {
    // `+ 0.0` folds negative zero.
    format!("{}", v + 0.0)
}

/// `timestamp tx ty tz qx qy qz qw` lines; timestamps keep a decimal point.
pub fn format_trajectory(traj: &Trajectory) -> String {
    let mut out = String::new();
    for (t, p) in traj.entries() {
        let q = p.quaternion();
        let tr = p.translation();
        let vals = [tr.x, tr.y, tr.z, q.i, q.j, q.k, q.w].map(fmt_num);
        writeln!(out, "{:?} {}", t + 0.0, vals.join(" ")).expect("string write");
    }
    out
}

pub fn write_trajectory(traj: &Trajectory, path: &Path) -> Result<(), IoError> {
    write_bytes(path, format_trajectory(traj).as_bytes())
}

pub fn parse_trajectory(text: &str, path: &Path) -> Result<Trajectory, IoError> {
    let mut entries = Vec::new();
    for (line, f) in records(text) {
        if f.len() != 8 {
            return Err(IoError::format(path, format!("line {line}: expected 8 fields, found {}", f.len())));
        }
        let v: Vec<f64> = f
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| IoError::format(path, format!("line {line}: {e}")))?;
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if !(q.norm() > 0.0) || v.iter().any(|x| !x.is_finite()) {
            return Err(IoError::format(path, format!("line {line}: invalid pose")));
        }
        let rot = UnitQuaternion::from_quaternion(q);
        entries.push((v[0], Pose::new(rot, Vec3::new(v[1], v[2], v[3]))));
    }
    Trajectory::new(entries).map_err(|e| IoError::format(path, e.to_string()))
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory, IoError> {
    parse_trajectory(&read_text(path)?, path)
}

pub fn read_color_png(path: &Path) -> Result<Image<[u8; 3]>, IoError> {
    let img = image::open(path).map_err(|e| IoError::Image { path: path.to_path_buf(), source: e })?.into_rgb8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0).collect();
    Ok(Image::from_vec(w as usize, h as usize, data))
}

pub fn write_color_png(img: &Image<[u8; 3]>, path: &Path) -> Result<(), IoError> {
    let raw: Vec<u8> = img.as_slice().iter().flatten().copied().collect();
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, raw).expect("buffer size matches");
    save(image::DynamicImage::ImageRgb8(buf), path)
}

/// Float RGB in `[0, 1]` quantized to 8 bits.
pub fn write_float_png(img: &Image<Vec3>, path: &Path) -> Result<(), IoError> {
    let bytes = img.map_par(|c| {
        let q = c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
        [q.x, q.y, q.z]
    });
    write_color_png(&bytes, path)
}

/// 16-bit depth; zero marks missing measurements.
pub fn read_depth_png(path: &Path, depth_scale: f64) -> Result<Image<f64>, IoError> {
    let img = image::open(path).map_err(|e| IoError::Image { path: path.to_path_buf(), source: e })?;
    let img = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        other => return Err(IoError::format(path, format!("expected 16-bit grayscale depth, found {:?}", other.color()))),
    };
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0[0] as f64 / depth_scale).collect();
    Ok(Image::from_vec(w as usize, h as usize, data))
}

pub fn write_depth_png(depth: &Image<f64>, depth_scale: f64, path: &Path) -> Result<(), IoError> {
    let raw: Vec<u16> = depth
        .as_slice()
        .iter()
        .map(|&d| if d > 0.0 && d.is_finite() { (d * depth_scale).round().clamp(0.0, u16::MAX as f64) as u16 } else { 0 })
        .collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(depth.width() as u32, depth.height() as u32, raw).expect("buffer size matches");
    save(image::DynamicImage::ImageLuma16(buf), path)
}

fn save(img: image::DynamicImage, path: &Path) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| IoError::Image { path: path.to_path_buf(), source: e })
}

#[cfg(test)]
mod tests;
