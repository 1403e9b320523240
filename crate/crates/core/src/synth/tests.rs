use super::*;
use crate::frame::{color_to_f64, gray};
use crate::tracking::{detect_and_describe, FeatureConfig};

fn plane_scene(dist: f64) -> SceneSpec {
    let mut s = preset("plane-box").unwrap();
    s.primitives = vec![Primitive::new(
        Shape::Rect { center: Vec3::new(0.0, dist, 1.0), u: Vec3::x(), v: Vec3::z(), half: (10.0, 10.0) },
        Texture::Checker { size: 0.1, a: Vec3::from_element(0.2), b: Vec3::from_element(0.8) },
    )];
    s.trajectory = TrajectorySpec::Keypoints(vec![(Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 1.0, 1.0))]);
    s.frames = 2;
    s
}

#[test]
fn fronto_parallel_plane_depth() {
    let (f, _) = plane_scene(2.0).render_ground_truth(0).unwrap();
    assert!(f.depth.as_slice().iter().all(|&d| (d - 2.0).abs() < 1e-12));
}

#[test]
fn out_of_range_frame() {
    let s = plane_scene(2.0);
    assert_eq!(s.render_ground_truth(2).unwrap_err(), SynthError::FrameOutOfRange { index: 2, count: 2 });
    assert!(matches!(preset("nope"), Err(SynthError::UnknownPreset(_))));
}

#[test]
fn sphere_depth_matches_quadratic_roots() {
    let mut s = plane_scene(5.0);
    let c = Vec3::new(0.1, 2.0, 1.05);
    let r = 0.4;
    s.primitives = vec![Primitive::new(Shape::Sphere { center: c, radius: r }, Texture::Solid(Vec3::from_element(0.5)))];
    let (f, pose) = s.render_ground_truth(0).unwrap();
    let k = s.intrinsics;
    let (rot, o) = (pose.rotation_matrix(), pose.translation());
    let mut hits = 0;
    for y in 0..k.height {
        for x in 0..k.width {
            let d = rot * k.ray(x as f64, y as f64);
            // Textbook root of |o + t d - c|^2 = r^2.
            let oc = o - c;
            let (a, b, cc) = (d.dot(&d), 2.0 * oc.dot(&d), oc.dot(&oc) - r * r);
            let disc = b * b - 4.0 * a * cc;
            let got = *f.depth.get(x, y);
            if disc < 0.0 {
                assert_eq!(got, 0.0);
                continue;
            }
            let t = (-b - disc.sqrt()) / (2.0 * a);
            assert!((got - t).abs() < 1e-9, "{got} {t}");
            hits += 1;
        }
    }
    assert!(hits > 1000);
}

#[test]
fn orbit_chord_length() {
    let s = preset("room").unwrap();
    let TrajectorySpec::Orbit { radius, sweep, .. } = s.trajectory else { panic!() };
    let phi = sweep / (s.frames - 1) as f64;
    let chord = 2.0 * radius * (phi / 2.0).sin();
    for i in [0, 50, 198] {
        let d = (s.pose(i + 1).translation() - s.pose(i).translation()).norm();
        assert!((d - chord).abs() < 1e-12);
    }
}

#[test]
fn look_at_is_rotation() {
    let p = look_at(&Vec3::new(1.0, 2.0, 3.0), &Vec3::new(-1.0, 0.5, 2.0));
    let r = p.rotation_matrix();
    assert!((r.transpose() * r - Mat3::identity()).norm() < 1e-12);
    assert!((r.determinant() - 1.0).abs() < 1e-12);
    assert!((p.z_axis() - Vec3::new(-2.0, -1.5, -1.0).normalize()).norm() < 1e-12);
    // Image "down" points toward world -z.
    assert!(r.column(1).z < 0.0);
}

#[test]
fn zero_noise_is_identity() {
    let (f, _) = preset("plane-box").unwrap().render_ground_truth(3).unwrap();
    let g = corrupt(&f, &NoiseSpec::none(), 7);
    assert_eq!(f.depth, g.depth);
    assert_eq!(f.color, g.color);
}

#[test]
fn noise_std_matches_model() {
    let n = 100_000;
    let depth = Image::new(400, n / 400, 2.0);
    let color = Image::new(400, n / 400, [0u8; 3]);
    let f = RawFrame::new(color, depth, 0.0, 0).unwrap();
    let g = corrupt(&f, &NoiseSpec { kappa: 0.005, dropout: 0.0, quantization: 0.0 }, 3);
    let v = g.depth.as_slice();
    let mean = v.iter().sum::<f64>() / n as f64;
    let std = (v.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    assert!((std / 0.02 - 1.0).abs() < 0.03, "{std}");
}

#[test]
fn noise_std_per_depth_bin() {
    let depths = [0.8, 1.5, 2.5, 3.5];
    let w = 200;
    let depth = Image::from_fn_par(w, 4 * 60, |_, y| depths[y / 60]);
    let f = RawFrame::new(Image::new(w, 240, [0u8; 3]), depth, 0.0, 0).unwrap();
    let kappa = 0.002;
    let g = corrupt(&f, &NoiseSpec { kappa, dropout: 0.0, quantization: 0.0 }, 9);
    for (b, d) in depths.iter().enumerate() {
        let e: Vec<f64> = (b * 60..(b + 1) * 60).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| g.depth.get(x, y) - d).collect();
        let std = (e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64).sqrt();
        assert!((std / (kappa * d * d) - 1.0).abs() < 0.05, "bin {d}: {std}");
    }
}

#[test]
fn full_dropout_invalidates_everything() {
    let (f, _) = preset("plane-box").unwrap().render_ground_truth(0).unwrap();
    let g = corrupt(&f, &NoiseSpec { kappa: 0.0, dropout: 1.0, quantization: 0.0 }, 1);
    assert!(g.depth.as_slice().iter().all(|&d| d == 0.0));
}

#[test]
fn quantization_snaps_to_step() {
    let (f, _) = preset("plane-box").unwrap().render_ground_truth(0).unwrap();
    let q = 0.001;
    let g = corrupt(&f, &NoiseSpec { kappa: 0.0, dropout: 0.0, quantization: q }, 1);
    for d in g.depth.as_slice().iter().filter(|d| **d > 0.0) {
        assert!(((d / q) - (d / q).round()).abs() < 1e-6);
    }
}

#[test]
fn primitive_mesh_counts() {
    let b = shape_mesh(&Shape::Cuboid { min: Vec3::zeros(), max: Vec3::from_element(1.0) }, 0);
    assert_eq!(b.faces.len(), 12);
    assert_eq!(b.euler_characteristic(), 2);
    // Outward-facing triangles.
    for f in &b.faces {
        let [a, c, d] = f.map(|i| b.vertices[i as usize]);
        let n = (c - a).cross(&(d - a));
        assert!(n.dot(&((a + c + d) / 3.0 - Vec3::from_element(0.5))) > 0.0);
    }
    let p = shape_mesh(&Shape::Rect { center: Vec3::zeros(), u: Vec3::x(), v: Vec3::y(), half: (1.0, 2.0) }, 0);
    assert_eq!(p.faces.len(), 2);
    let r = 0.7;
    let s = shape_mesh(&Shape::Sphere { center: Vec3::new(1.0, 2.0, 3.0), radius: r }, 4);
    assert_eq!(s.faces.len(), 20 * 4usize.pow(4));
    assert_eq!(s.euler_characteristic(), 2);
    assert!(s.vertices.iter().all(|v| ((v - Vec3::new(1.0, 2.0, 3.0)).norm() - r).abs() < 1e-3 * r));
}

#[test]
fn reproducible() {
    let s = preset("room").unwrap();
    let (a, pa) = s.render_noisy(17, 5).unwrap();
    let (b, pb) = s.render_noisy(17, 5).unwrap();
    assert_eq!(pa, pb);
    assert_eq!(a.color, b.color);
    assert!(a.depth.as_slice().iter().zip(b.depth.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let (c, _) = s.render_noisy(17, 6).unwrap();
    assert_ne!(a.depth, c.depth);
}

fn on_geometry(s: &SceneSpec, p: &Vec3) -> f64 {
    s.primitives
        .iter()
        .map(|prim| match &prim.shape {
            Shape::Rect { center, u, v, half } => {
                let q = p - center;
                let (a, b) = (q.dot(u).clamp(-half.0, half.0), q.dot(v).clamp(-half.1, half.1));
                (q - u * a - v * b).norm()
            }
            Shape::Cuboid { min, max } => {
                let inside = (0..3).all(|i| p[i] >= min[i] - 1e-12 && p[i] <= max[i] + 1e-12);
                let c = Vec3::new(p.x.clamp(min.x, max.x), p.y.clamp(min.y, max.y), p.z.clamp(min.z, max.z));
                if inside {
                    (0..3).map(|i| (p[i] - min[i]).abs().min((max[i] - p[i]).abs())).fold(f64::INFINITY, f64::min)
                } else {
                    (p - c).norm()
                }
            }
            Shape::Sphere { center, radius } => ((p - center).norm() - radius).abs(),
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn backprojection_lands_on_geometry() {
    for name in PRESET_NAMES {
        let s = preset(name).unwrap();
        let i = s.frames - 1;
        let (f, pose) = s.render_ground_truth(i).unwrap();
        let k = s.intrinsics;
        let mut n = 0;
        for y in (0..k.height).step_by(3) {
            for x in (0..k.width).step_by(3) {
                let d = *f.depth.get(x, y);
                if d > 0.0 {
                    let p = pose.transform_point(&(k.ray(x as f64, y as f64) * d));
                    assert!(on_geometry(&s, &p) < 1e-6, "{name} {x},{y}");
                    n += 1;
                }
            }
        }
        assert!(n > 1000);
    }
}

#[test]
fn room_frames_are_fully_covered_and_textured() {
    let s = preset("room").unwrap();
    for i in [0, 66, 133, 199] {
        let (f, _) = s.render_ground_truth(i).unwrap();
        assert!(f.depth.as_slice().iter().all(|&d| d > 0.3 && d < 8.0));
        let intensity = f.color.map_par(|c| gray(&color_to_f64(c)));
        let feats = detect_and_describe(&intensity, &FeatureConfig::default());
        assert!(feats.len() >= 500, "frame {i}: {}", feats.len());
    }
}

#[test]
fn two_stage_box_appears_midway() {
    let s = preset("two-stage").unwrap();
    let half = s.frames / 2;
    let (a, _) = s.render_ground_truth(half - 1).unwrap();
    let (b, _) = s.render_ground_truth(half).unwrap();
    let changed = a.depth.as_slice().iter().zip(b.depth.as_slice()).filter(|(x, y)| (*x - *y).abs() > 0.05).count();
    assert!(changed > 500, "{changed}");
}

#[test]
fn trajectory_stays_outside_geometry() {
    for name in PRESET_NAMES {
        let s = preset(name).unwrap();
        for (_, p) in s.trajectory() {
            assert!(on_geometry(&s, &p.translation()) > 0.2, "{name}");
        }
    }
}
