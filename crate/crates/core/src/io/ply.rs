//! Binary little-endian PLY for surfel maps and triangle meshes.

use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector6};

use super::{write_bytes, IoError};
use crate::geometry::Vec3;
use crate::meshing::Mesh;
use crate::sh::SH_COEFFS;
use crate::surfel::{Surfel, SurfelMap};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Clone, Debug)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

#[derive(Clone, Debug)]
enum Value {
    Scalar(f64),
    List(Vec<f64>),
}

struct PlyData {
    elements: Vec<(Element, Vec<Vec<Value>>)>,
}

impl PlyData {
    fn element(&self, name: &str) -> Option<&(Element, Vec<Vec<Value>>)> {
        self.elements.iter().find(|(e, _)| e.name == name)
    }
}

fn parse_ply(path: &Path) -> Result<PlyData, IoError> {
    let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
    let err = |msg: &str| IoError::Ply { path: path.to_path_buf(), msg: msg.to_string() };
    let marker = b"end_header\n";
    let end = bytes.windows(marker.len()).position(|w| w == marker).ok_or_else(|| err("missing end_header"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| err("header is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(err("missing magic"));
    }
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", ..] => return Err(err("only binary_little_endian 1.0 is supported")),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count.parse().map_err(|_| err("bad element count"))?;
                elements.push(Element { name: name.to_string(), count, props: Vec::new() });
            }
            ["property", "list", c, t, name] => {
                let (c, t) = (Scalar::parse(c).ok_or_else(|| err("bad list count type"))?, Scalar::parse(t).ok_or_else(|| err("bad list type"))?);
                elements.last_mut().ok_or_else(|| err("property before element"))?.props.push(Property::List(name.to_string(), c, t));
            }
            ["property", t, name] => {
                let t = Scalar::parse(t).ok_or_else(|| err("bad property type"))?;
                elements.last_mut().ok_or_else(|| err("property before element"))?.props.push(Property::Scalar(name.to_string(), t));
            }
            _ => return Err(err(&format!("unrecognized header line `{line}`"))),
        }
    }
    let mut pos = end + marker.len();
    let mut take = |n: usize| -> Result<&[u8], IoError> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| err("truncated body"))?;
        pos += n;
        Ok(s)
    };
    let mut out = Vec::new();
    for e in elements {
        let mut rows = Vec::with_capacity(e.count);
        for _ in 0..e.count {
            let mut row = Vec::with_capacity(e.props.len());
            for p in &e.props {
                match p {
                    Property::Scalar(_, t) => row.push(Value::Scalar(t.read(take(t.size())?))),
                    Property::List(_, c, t) => {
                        let n = c.read(take(c.size())?) as usize;
                        let mut items = Vec::with_capacity(n);
                        for _ in 0..n {
                            items.push(t.read(take(t.size())?));
                        }
                        row.push(Value::List(items));
                    }
                }
            }
            rows.push(row);
        }
        out.push((e, rows));
    }
    Ok(PlyData { elements: out })
}

struct Writer {
    header: String,
    body: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { header: "ply\nformat binary_little_endian 1.0\n".into(), body: Vec::new() }
    }

    fn line(&mut self, s: &str) {
        self.header.push_str(s);
        self.header.push('\n');
    }

    fn finish(mut self, path: &Path) -> Result<(), IoError> {
        self.line("end_header");
        let mut bytes = self.header.into_bytes();
        bytes.extend_from_slice(&self.body);
        write_bytes(path, &bytes)
    }
}

const SURFEL_F64: [&str; 12] = ["x", "y", "z", "nx", "ny", "nz", "scale_0", "scale_1", "rot_0", "rot_1", "rot_2", "rot_3"];

fn surfel_double_props() -> Vec<String> {
    let mut v: Vec<String> = SURFEL_F64.iter().map(|s| s.to_string()).collect();
    v.push("opacity".into());
    v.extend((0..3).map(|i| format!("f_dc_{i}")));
    v.extend((0..3 * (SH_COEFFS - 1)).map(|i| format!("f_rest_{i}")));
    v.push("confidence".into());
    v.extend((0..6).map(|i| format!("lambda_{i}")));
    v.extend((0..6).map(|i| format!("eta_{i}")));
    v.extend(["anchor_x", "anchor_y", "anchor_z", "anchor_nx", "anchor_ny", "anchor_nz"].map(String::from));
    v
}

/// Writes every surfel with `tr(Lambda) >= tau_conf`. Besides position,
/// normal, scales, opacity, 8-bit base color and confidence, the file carries
/// the full filter and SH state so [`read_surfels_ply`] restores the map.
pub fn write_surfels_ply(map: &SurfelMap, path: &Path, tau_conf: f64) -> Result<usize, IoError> {
    let keep: Vec<&Surfel> = map.surfels().iter().filter(|s| s.confidence() >= tau_conf).collect();
    let count = keep.len();
    let names = surfel_double_props();
    let mut w = Writer::new();
    w.line(&format!("element vertex {}", keep.len()));
    for n in &names[..13] {
        w.line(&format!("property double {n}"));
    }
    for c in ["red", "green", "blue"] {
        w.line(&format!("property uchar {c}"));
    }
    for n in &names[13..] {
        w.line(&format!("property double {n}"));
    }
    w.line("property uint created_frame");
    w.line("property uint last_observed");
    for s in keep {
        let n = s.normal();
        let q = s.rotation.quaternion();
        let mut vals = vec![s.position.x, s.position.y, s.position.z, n.x, n.y, n.z, s.scale.x, s.scale.y, q.w, q.i, q.j, q.k, s.opacity];
        for v in &vals {
            w.body.extend_from_slice(&v.to_le_bytes());
        }
        let rgb = s.base_color().map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8);
        w.body.extend_from_slice(&[rgb.x, rgb.y, rgb.z]);
        vals.clear();
        vals.extend(s.sh[0].iter());
        for k in 1..SH_COEFFS {
            vals.extend(s.sh[k].iter());
        }
        vals.push(s.confidence());
        vals.extend(s.lambda.iter());
        vals.extend(s.eta.iter());
        vals.extend(s.anchor_position.iter());
        vals.extend(s.anchor_normal.iter());
        for v in &vals {
            w.body.extend_from_slice(&v.to_le_bytes());
        }
        w.body.extend_from_slice(&(s.created_frame as u32).to_le_bytes());
        w.body.extend_from_slice(&(s.last_observed as u32).to_le_bytes());
    }
    w.finish(path)?;
    Ok(count)
}

fn column(el: &Element, name: &str, path: &Path) -> Result<usize, IoError> {
    el.props
        .iter()
        .position(|p| matches!(p, Property::Scalar(n, _) if n == name))
        .ok_or_else(|| IoError::Ply { path: path.to_path_buf(), msg: format!("missing vertex property `{name}`") })
}

fn scalar(v: &Value) -> f64 {
    match v {
        Value::Scalar(x) => *x,
        Value::List(_) => f64::NAN,
    }
}

pub fn read_surfels_ply(path: &Path, cell_size: f64) -> Result<SurfelMap, IoError> {
    let ply = parse_ply(path)?;
    let (el, rows) = ply.element("vertex").ok_or_else(|| IoError::Ply { path: path.to_path_buf(), msg: "no vertex element".into() })?;
    let mut names = surfel_double_props();
    names.extend(["created_frame".into(), "last_observed".into()]);
    let cols: Vec<usize> = names.iter().map(|n| column(el, n, path)).collect::<Result<_, _>>()?;
    let mut surfels = Vec::with_capacity(rows.len());
    for row in rows {
        let v: Vec<f64> = cols.iter().map(|&c| scalar(&row[c])).collect();
        let v3 = |i: usize| Vec3::new(v[i], v[i + 1], v[i + 2]);
        let mut sh = [Vec3::zeros(); SH_COEFFS];
        for (k, c) in sh.iter_mut().enumerate() {
            *c = v3(13 + 3 * k);
        }
        let base = 13 + 3 * SH_COEFFS + 1;
        surfels.push(Surfel {
            position: v3(0),
            scale: Vector2::new(v[6], v[7]),
            rotation: UnitQuaternion::new_unchecked(Quaternion::new(v[8], v[9], v[10], v[11])),
            opacity: v[12],
            sh,
            lambda: Vector6::from_iterator(v[base..base + 6].iter().copied()),
            eta: Vector6::from_iterator(v[base + 6..base + 12].iter().copied()),
            anchor_position: v3(base + 12),
            anchor_normal: v3(base + 15),
            created_frame: v[base + 18] as usize,
            last_observed: v[base + 19] as usize,
        });
    }
    Ok(SurfelMap::from_surfels(surfels, cell_size))
}

pub fn write_mesh_ply(mesh: &Mesh, path: &Path) -> Result<(), IoError> {
    let mut w = Writer::new();
    w.line(&format!("element vertex {}", mesh.vertices.len()));
    for c in ["x", "y", "z"] {
        w.line(&format!("property float {c}"));
    }
    w.line(&format!("element face {}", mesh.faces.len()));
    w.line("property list uchar int vertex_indices");
    for v in &mesh.vertices {
        for c in v.iter() {
            w.body.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    for f in &mesh.faces {
        w.body.push(3);
        for i in f {
            w.body.extend_from_slice(&(*i as i32).to_le_bytes());
        }
    }
    w.finish(path)
}

pub fn read_mesh_ply(path: &Path) -> Result<Mesh, IoError> {
    let ply = parse_ply(path)?;
    let bad = |msg: &str| IoError::Ply { path: path.to_path_buf(), msg: msg.to_string() };
    let (el, rows) = ply.element("vertex").ok_or_else(|| bad("no vertex element"))?;
    let (cx, cy, cz) = (column(el, "x", path)?, column(el, "y", path)?, column(el, "z", path)?);
    let vertices: Vec<Vec3> = rows.iter().map(|r| Vec3::new(scalar(&r[cx]), scalar(&r[cy]), scalar(&r[cz]))).collect();
    let mut faces = Vec::new();
    if let Some((el, rows)) = ply.element("face") {
        let col = el
            .props
            .iter()
            .position(|p| matches!(p, Property::List(n, ..) if n == "vertex_indices" || n == "vertex_index"))
            .ok_or_else(|| bad("face element has no vertex_indices list"))?;
        for r in rows {
            let Value::List(idx) = &r[col] else { unreachable!() };
            if idx.len() < 3 || idx.iter().any(|&i| i < 0.0 || i as usize >= vertices.len()) {
                return Err(bad("face index out of range"));
            }
            // Polygons are fanned into triangles.
            for k in 1..idx.len() - 1 {
                faces.push([idx[0] as u32, idx[k] as u32, idx[k + 1] as u32]);
            }
        }
    }
    Ok(Mesh { vertices, faces })
}
