use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::warn;

use super::{read_color_png, read_depth_png, read_text, records, write_bytes, write_color_png, write_depth_png, write_mesh_ply, write_trajectory, IoError};
use crate::eval::{Trajectory, ASSOCIATION_TOLERANCE};
use crate::frame::RawFrame;
use crate::geometry::Intrinsics;
use crate::synth::{ground_truth_mesh, SceneSpec};

/// Used when a dataset has no `intrinsics.txt`: the TUM Freiburg default
/// calibration for 640x480 sensors.
pub const DEFAULT_INTRINSICS: Intrinsics =
    Intrinsics { fx: 525.0, fy: 525.0, cx: 319.5, cy: 239.5, width: 640, height: 480, depth_scale: 5000.0 };

#[derive(Clone, Debug, PartialEq)]
pub struct FrameEntry {
    pub timestamp: f64,
    pub color: PathBuf,
    pub depth: PathBuf,
}

#[derive(Clone, Debug)]
pub struct DatasetHandle {
    pub root: PathBuf,
    pub intrinsics: Intrinsics,
    pub frames: Vec<FrameEntry>,
    pub groundtruth: Option<Trajectory>,
    /// rgb plus depth entries left without a partner.
    pub dropped: usize,
}

impl DatasetHandle {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn load_frame(&self, index: usize) -> Result<RawFrame, IoError> {
        let e = &self.frames[index];
        let color = read_color_png(&e.color)?;
        let depth = read_depth_png(&e.depth, self.intrinsics.depth_scale)?;
        if color.dims() != (self.intrinsics.width, self.intrinsics.height) {
            return Err(IoError::format(&e.color, format!("image is {:?}, intrinsics expect {}x{}", color.dims(), self.intrinsics.width, self.intrinsics.height)));
        }
        RawFrame::new(color, depth, e.timestamp, index).map_err(|err| IoError::format(&e.depth, err.to_string()))
    }
}

fn read_index(path: &Path) -> Result<Vec<(f64, String)>, IoError> {
    let text = read_text(path).map_err(|_| IoError::format(path, "missing or unreadable index file"))?;
    let mut out = Vec::new();
    for (line, f) in records(&text) {
        if f.len() < 2 {
            return Err(IoError::format(path, format!("line {line}: expected `timestamp path`")));
        }
        let t: f64 = f[0].parse().map_err(|_| IoError::format(path, format!("line {line}: bad timestamp `{}`", f[0])))?;
        out.push((t, f[1].to_string()));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

/// Greedy one-to-one association by increasing time difference, within `tol`.
pub(crate) fn associate_stamps(a: &[f64], b: &[f64], tol: f64) -> Vec<(usize, usize)> {
    let mut cand = Vec::new();
    let mut lo = 0;
    for (i, &ta) in a.iter().enumerate() {
        while lo < b.len() && b[lo] < ta - tol {
            lo += 1;
        }
        let mut j = lo;
        while j < b.len() && b[j] <= ta + tol {
            cand.push(((ta - b[j]).abs(), i, j));
            j += 1;
        }
    }
    cand.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let (mut ua, mut ub) = (vec![false; a.len()], vec![false; b.len()]);
    let mut out = Vec::new();
    for (_, i, j) in cand {
        if !ua[i] && !ub[j] {
            ua[i] = true;
            ub[j] = true;
            out.push((i, j));
        }
    }
    out.sort();
    out
}

fn parse_intrinsics(path: &Path) -> Result<Intrinsics, IoError> {
    let text = read_text(path)?;
    let f: Vec<&str> = records(&text).flat_map(|(_, f)| f).collect();
    if f.len() != 7 {
        return Err(IoError::format(path, "expected `fx fy cx cy width height depth_scale`"));
    }
    let num = |i: usize| f[i].parse::<f64>().map_err(|_| IoError::format(path, format!("bad number `{}`", f[i])));
    let dim = |i: usize| f[i].parse::<usize>().map_err(|_| IoError::format(path, format!("bad size `{}`", f[i])));
    Intrinsics::new(num(0)?, num(1)?, num(2)?, num(3)?, dim(4)?, dim(5)?, num(6)?).map_err(|e| IoError::format(path, e.to_string()))
}

/// Loads a TUM RGB-D style directory: `rgb.txt`, `depth.txt`, optional
/// `groundtruth.txt` and optional `intrinsics.txt`
/// (`fx fy cx cy width height depth_scale`, otherwise [`DEFAULT_INTRINSICS`]).
pub fn load_tum(root: &Path) -> Result<DatasetHandle, IoError> {
    let rgb = read_index(&root.join("rgb.txt"))?;
    let depth = read_index(&root.join("depth.txt"))?;
    let ta: Vec<f64> = rgb.iter().map(|e| e.0).collect();
    let tb: Vec<f64> = depth.iter().map(|e| e.0).collect();
    let pairs = associate_stamps(&ta, &tb, ASSOCIATION_TOLERANCE);
    let dropped = rgb.len() + depth.len() - 2 * pairs.len();
    if dropped > 0 {
        warn!("{}: dropped {dropped} unassociated rgb/depth entries", root.display());
    }
    if pairs.is_empty() {
        return Err(IoError::EmptyDataset(root.to_path_buf()));
    }
    let frames = pairs
        .iter()
        .map(|&(i, j)| FrameEntry { timestamp: rgb[i].0, color: root.join(&rgb[i].1), depth: root.join(&depth[j].1) })
        .collect();
    let ipath = root.join("intrinsics.txt");
    let intrinsics = if ipath.exists() { parse_intrinsics(&ipath)? } else { DEFAULT_INTRINSICS };
    let gpath = root.join("groundtruth.txt");
    let groundtruth = if gpath.exists() { Some(super::read_trajectory(&gpath)?) } else { None };
    Ok(DatasetHandle { root: root.to_path_buf(), intrinsics, frames, groundtruth, dropped })
}

/// Renders a synthetic scene to disk in the TUM layout, plus
/// `intrinsics.txt` and the ground-truth mesh `gt_mesh.ply`.
pub fn write_tum_sequence(spec: &SceneSpec, out: &Path, seed: u64, sphere_level: usize) -> Result<(), IoError> {
    let k = spec.intrinsics;
    let (mut rgb, mut depth, mut gt) = (String::new(), String::new(), Vec::new());
    rgb.push_str("# color images\n# timestamp filename\n");
    depth.push_str("# depth maps\n# timestamp filename\n");
    for i in 0..spec.frames {
        let (frame, pose) = spec.render_noisy(i, seed).expect("index in range");
        let ts = format!("{:.6}", spec.timestamp(i));
        let (cp, dp) = (format!("rgb/{ts}.png"), format!("depth/{ts}.png"));
        write_color_png(&frame.color, &out.join(&cp))?;
        write_depth_png(&frame.depth, k.depth_scale, &out.join(&dp))?;
        writeln!(rgb, "{ts} {cp}").expect("string write");
        writeln!(depth, "{ts} {dp}").expect("string write");
        gt.push((ts.parse::<f64>().expect("formatted float"), pose));
    }
    write_bytes(&out.join("rgb.txt"), rgb.as_bytes())?;
    write_bytes(&out.join("depth.txt"), depth.as_bytes())?;
    write_trajectory(&Trajectory::new(gt).expect("sorted timestamps"), &out.join("groundtruth.txt"))?;
    let intr = format!("{} {} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height, k.depth_scale);
    write_bytes(&out.join("intrinsics.txt"), intr.as_bytes())?;
    write_mesh_ply(&ground_truth_mesh(spec, sphere_level), &out.join("gt_mesh.ply"))
}
