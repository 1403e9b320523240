use std::f64::consts::PI;

use super::{Light, NoiseSpec, Primitive, SceneSpec, Shape, SynthError, Texture, TrajectorySpec};
use crate::geometry::{Intrinsics, Vec3};

pub const PRESET_NAMES: [&str; 3] = ["plane-box", "room", "two-stage"];

pub fn default_intrinsics() -> Intrinsics {
    Intrinsics::new(277.0, 277.0, 159.5, 119.5, 320, 240, 5000.0).expect("valid intrinsics")
}

/// Soft-edged tiles.
pub const TILE_EDGE: f64 = 0.3;

fn tiles(size: f64, seed: u64, tint: Vec3) -> Texture {
    Texture::Tiles { size, seed, tint, lo: 0.25, hi: 1.0, edge: TILE_EDGE }
}

fn rect(center: Vec3, u: Vec3, v: Vec3, half: (f64, f64), texture: Texture) -> Primitive {
    Primitive::new(Shape::Rect { center, u, v, half }, texture)
}

fn cuboid(min: Vec3, max: Vec3, texture: Texture) -> Primitive {
    Primitive::new(Shape::Cuboid { min, max }, texture)
}

fn sphere(center: Vec3, radius: f64, texture: Texture) -> Primitive {
    Primitive::new(Shape::Sphere { center, radius }, texture)
}

fn plane_box(frames: usize) -> SceneSpec {
    let (x, y, z) = (Vec3::x(), Vec3::y(), Vec3::z());
    SceneSpec {
        name: "plane-box".into(),
        primitives: vec![
            rect(Vec3::new(0.0, 2.0, 1.2), x, z, (2.5, 1.5), tiles(0.1, 11, Vec3::new(0.95, 0.9, 0.8))),
            rect(Vec3::new(0.0, 1.0, 0.0), x, y, (2.5, 1.5), tiles(0.12, 12, Vec3::new(0.8, 0.85, 0.95))),
            cuboid(Vec3::new(-0.45, 1.2, 0.0), Vec3::new(0.05, 1.6, 0.5), tiles(0.07, 13, Vec3::new(0.9, 0.6, 0.5))),
            sphere(Vec3::new(0.5, 1.4, 0.3), 0.25, Texture::Noise { frequency: 12.0, seed: 14, a: Vec3::new(0.2, 0.3, 0.6), b: Vec3::new(0.9, 0.9, 0.7) }),
        ],
        lights: vec![
            Light { position: Vec3::new(-1.0, 0.0, 2.5), intensity: 0.45 },
            Light { position: Vec3::new(1.5, 0.5, 2.0), intensity: 0.3 },
        ],
        ambient: 0.35,
        trajectory: TrajectorySpec::Keypoints(vec![
            (Vec3::new(-0.3, -0.3, 0.9), Vec3::new(0.0, 1.6, 0.5)),
            (Vec3::new(0.0, -0.35, 0.95), Vec3::new(0.05, 1.6, 0.45)),
            (Vec3::new(0.3, -0.3, 0.9), Vec3::new(0.1, 1.6, 0.5)),
        ]),
        frames,
        fps: 30.0,
        noise: NoiseSpec { kappa: 0.002, dropout: 0.0, quantization: 0.0 },
        intrinsics: default_intrinsics(),
    }
}

fn room() -> SceneSpec {
    let (x, y, z) = (Vec3::x(), Vec3::y(), Vec3::z());
    let (hx, hy, h) = (3.0, 2.5, 2.6);
    let wall = |seed| tiles(0.08, seed, Vec3::new(0.95, 0.92, 0.85));
    SceneSpec {
        name: "room".into(),
        primitives: vec![
            rect(Vec3::new(0.0, 0.0, 0.0), x, y, (hx, hy), tiles(0.15, 21, Vec3::new(0.85, 0.75, 0.6))),
            rect(Vec3::new(0.0, 0.0, h), x, y, (hx, hy), tiles(0.15, 22, Vec3::new(0.9, 0.9, 0.9))),
            rect(Vec3::new(hx, 0.0, h / 2.0), y, z, (hy, h / 2.0), wall(23)),
            rect(Vec3::new(-hx, 0.0, h / 2.0), y, z, (hy, h / 2.0), wall(24)),
            rect(Vec3::new(0.0, hy, h / 2.0), x, z, (hx, h / 2.0), wall(25)),
            rect(Vec3::new(0.0, -hy, h / 2.0), x, z, (hx, h / 2.0), wall(26)),
            cuboid(Vec3::new(1.6, -0.6, 0.0), Vec3::new(2.4, 0.6, 0.75), tiles(0.08, 27, Vec3::new(0.7, 0.5, 0.35))),
            cuboid(Vec3::new(-2.5, 1.2, 0.0), Vec3::new(-1.6, 2.2, 1.1), tiles(0.08, 28, Vec3::new(0.45, 0.6, 0.8))),
            cuboid(Vec3::new(-0.8, -2.3, 0.0), Vec3::new(0.4, -1.7, 0.5), tiles(0.08, 29, Vec3::new(0.6, 0.8, 0.5))),
            sphere(Vec3::new(1.2, 1.6, 0.45), 0.45, Texture::Noise { frequency: 10.0, seed: 30, a: Vec3::new(0.2, 0.25, 0.5), b: Vec3::new(0.95, 0.85, 0.6) }),
        ],
        lights: vec![
            Light { position: Vec3::new(0.0, 0.0, 2.4), intensity: 0.45 },
            Light { position: Vec3::new(-1.5, 1.0, 2.2), intensity: 0.3 },
        ],
        ambient: 0.35,
        trajectory: TrajectorySpec::Orbit { center: Vec3::new(0.0, 0.0, 1.4), radius: 0.5, start: 0.0, sweep: PI, look_offset: 1.0, look_height: 1.1 },
        frames: 200,
        fps: 30.0,
        noise: NoiseSpec { kappa: 0.002, dropout: 0.0, quantization: 0.0 },
        intrinsics: default_intrinsics(),
    }
}

fn two_stage() -> SceneSpec {
    let mut s = plane_box(40);
    s.name = "two-stage".into();
    // The box pops into view halfway through.
    s.primitives[2].appears_at = s.frames / 2;
    s
}

/// Canonical scene by name.
pub fn preset(name: &str) -> Result<SceneSpec, SynthError> {
    match name {
        "plane-box" => Ok(plane_box(30)),
        "room" => Ok(room()),
        "two-stage" => Ok(two_stage()),
        _ => Err(SynthError::UnknownPreset(name.to_string())),
    }
}
