use super::tum::associate_stamps;
use super::*;
use crate::meshing::Mesh;
use crate::surfel::{rotation_from_normal, Surfel, SurfelMap};
use crate::synth::{preset, NoiseSpec};
use nalgebra::{Vector2, Vector6};
use proptest::prelude::*;
use std::fs;
use tempfile::tempdir;

fn write_fixture(dir: &Path, rgb: &[f64], depth: &[f64], depth_value: u16) {
    let mut r = String::from("# timestamp filename\n");
    let mut d = String::from("# timestamp filename\n");
    for (i, t) in rgb.iter().enumerate() {
        let p = format!("rgb/{i}.png");
        write_color_png(&Image::new(4, 3, [10u8, 20, 30]), &dir.join(&p)).unwrap();
        r.push_str(&format!("{t:.6} {p}\n"));
    }
    for (i, t) in depth.iter().enumerate() {
        let p = format!("depth/{i}.png");
        write_depth_png(&Image::new(4, 3, depth_value as f64 / 5000.0), 5000.0, &dir.join(&p)).unwrap();
        d.push_str(&format!("{t:.6} {p}\n"));
    }
    fs::write(dir.join("rgb.txt"), r).unwrap();
    fs::write(dir.join("depth.txt"), d).unwrap();
    fs::write(dir.join("intrinsics.txt"), "3 3 1.5 1 4 3 5000\n").unwrap();
}

#[test]
fn exact_timestamps_associate() {
    let dir = tempdir().unwrap();
    write_fixture(dir.path(), &[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 5000);
    let ds = load_tum(dir.path()).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.dropped, 0);
    let f = ds.load_frame(1).unwrap();
    assert!(f.depth.as_slice().iter().all(|&d| (d - 1.0).abs() < 1e-12));
    assert_eq!(*f.color.get(0, 0), [10, 20, 30]);
    assert_eq!(f.timestamp, 2.0);
}

#[test]
fn distant_rgb_entry_is_dropped() {
    let dir = tempdir().unwrap();
    write_fixture(dir.path(), &[1.0, 2.05, 3.0], &[1.01, 2.0, 3.0], 1234);
    let ds = load_tum(dir.path()).unwrap();
    let ts: Vec<f64> = ds.frames.iter().map(|f| f.timestamp).collect();
    assert_eq!(ts, vec![1.0, 3.0]);
    assert_eq!(ds.dropped, 2);
    assert!(ds.frames[0].depth.ends_with("depth/0.png"));
}

#[test]
fn missing_index_is_format_error() {
    let dir = tempdir().unwrap();
    write_fixture(dir.path(), &[1.0], &[1.0], 10);
    fs::remove_file(dir.path().join("rgb.txt")).unwrap();
    let e = load_tum(dir.path()).unwrap_err();
    assert!(matches!(e, IoError::Format { .. }), "{e}");
    assert!(e.to_string().contains("rgb.txt"));
}

#[test]
fn no_pairs_is_empty_dataset() {
    let dir = tempdir().unwrap();
    write_fixture(dir.path(), &[1.0], &[2.0], 10);
    assert!(matches!(load_tum(dir.path()).unwrap_err(), IoError::EmptyDataset(_)));
}

#[test]
fn default_intrinsics_without_file() {
    let dir = tempdir().unwrap();
    write_fixture(dir.path(), &[1.0], &[1.0], 10);
    fs::remove_file(dir.path().join("intrinsics.txt")).unwrap();
    assert_eq!(load_tum(dir.path()).unwrap().intrinsics, DEFAULT_INTRINSICS);
    DEFAULT_INTRINSICS.validate().unwrap();
}

#[test]
fn depth_png_scaling() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("d.png");
    let depth = Image::from_vec(3, 1, vec![1.0, 0.0, 2.5002]);
    write_depth_png(&depth, 5000.0, &p).unwrap();
    let back = read_depth_png(&p, 5000.0).unwrap();
    assert_eq!(back.as_slice(), &[1.0, 0.0, 12501.0 / 5000.0]);
    assert!(matches!(read_depth_png(&dir.path().join("nope.png"), 5000.0), Err(IoError::Image { .. })));
}

fn random_surfel(i: usize) -> Surfel {
    let f = i as f64;
    let n = Vec3::new(f.sin(), f.cos(), 0.5).normalize();
    let p = Vec3::new(f * 0.1, -f * 0.01, 1.0 + f * 0.001);
    Surfel {
        position: p,
        scale: Vector2::new(0.01 + f * 1e-4, 0.02),
        rotation: rotation_from_normal(&n),
        opacity: 0.3 + 0.01 * f,
        sh: [Vec3::new(0.1, 0.2, f * 0.01), Vec3::new(0.01, -0.02, 0.03), Vec3::zeros(), Vec3::new(f, 0.0, -f)],
        lambda: Vector6::from_element(1.0 + f),
        eta: Vector6::from_element(2.0 * f),
        anchor_position: p * 0.5,
        anchor_normal: n,
        created_frame: i,
        last_observed: 2 * i,
    }
}

#[test]
fn surfel_ply_round_trip() {
    let dir = tempdir().unwrap();
    let map = SurfelMap::from_surfels((0..50).map(random_surfel).collect(), 0.1);
    let p = dir.path().join("s.ply");
    assert_eq!(write_surfels_ply(&map, &p, 0.0).unwrap(), 50);
    let back = read_surfels_ply(&p, 0.1).unwrap();
    assert_eq!(back.surfels(), map.surfels());
    // Confidence filter keeps tr(Lambda) >= 6 * (1 + 10).
    assert_eq!(write_surfels_ply(&map, &p, 66.0).unwrap(), 40);
    assert_eq!(read_surfels_ply(&p, 0.1).unwrap().len(), 40);
}

#[test]
fn infinite_threshold_writes_empty_valid_ply() {
    let dir = tempdir().unwrap();
    let map = SurfelMap::from_surfels((0..5).map(random_surfel).collect(), 0.1);
    let p = dir.path().join("s.ply");
    assert_eq!(write_surfels_ply(&map, &p, f64::INFINITY).unwrap(), 0);
    let text = fs::read(&p).unwrap();
    assert!(String::from_utf8_lossy(&text).starts_with("ply\nformat binary_little_endian 1.0\nelement vertex 0\n"));
    assert!(read_surfels_ply(&p, 0.1).unwrap().is_empty());
}

#[test]
fn mesh_ply_round_trip() {
    let dir = tempdir().unwrap();
    let mesh = Mesh { vertices: vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.5), Vec3::new(0.0, 1.0, -0.25)], faces: vec![[0, 1, 2]] };
    let p = dir.path().join("m.ply");
    write_mesh_ply(&mesh, &p).unwrap();
    assert_eq!(read_mesh_ply(&p).unwrap(), mesh);
    fs::write(&p, b"ply\nformat ascii 1.0\nend_header\n").unwrap();
    assert!(matches!(read_mesh_ply(&p), Err(IoError::Ply { .. })));
}

#[test]
fn identity_trajectory_line() {
    let t = Trajectory::new(vec![(0.0, Pose::identity())]).unwrap();
    assert_eq!(format_trajectory(&t), "0.0 0 0 0 0 0 0 1\n");
}

#[test]
fn trajectory_round_trip() {
    let s = preset("room").unwrap();
    let t = Trajectory::new(s.trajectory()).unwrap();
    let dir = tempdir().unwrap();
    let p = dir.path().join("t.txt");
    write_trajectory(&t, &p).unwrap();
    let back = read_trajectory(&p).unwrap();
    assert_eq!(back.len(), t.len());
    for (a, b) in back.entries().iter().zip(t.entries()) {
        assert_eq!(a.0, b.0);
        assert!(a.1.distance_to(&b.1) < 1e-12 && a.1.angle_to(&b.1) < 1e-7);
    }
    assert!(matches!(parse_trajectory("0 1 2 3\n", &p), Err(IoError::Format { .. })));
}

#[test]
fn config_round_trip() {
    let mut c = Config::default();
    c.seed = 42;
    c.tracking.finest_iters = Some(4);
    c.export.tau_conf = f64::INFINITY;
    c.optim.learning_rates.color = 1e-3;
    let back = Config::from_toml(&c.to_toml()).unwrap();
    assert_eq!(back, c);
    assert_eq!(Config::from_toml("").unwrap(), Config::default());
}

#[test]
fn config_rejects_unknown_and_invalid() {
    assert!(matches!(Config::from_toml("[tracking]\nt_kk = 0.3\n"), Err(IoError::Config(_))));
    assert!(matches!(Config::from_toml("bogus = 1\n"), Err(IoError::Config(_))));
    let e = Config::from_toml("[surfel]\nstride = 0\n").unwrap_err();
    assert!(e.to_string().contains("surfel.stride"), "{e}");
    assert!(Config::from_toml("[noise]\nkappa_p = -1.0\n").is_err());
    assert!(Config::from_toml("[optim]\nbeta1 = 1.0\n").is_err());
    assert!(Config::from_toml("[meshing]\nvoxel_size = 0.0\n").is_err());
}

#[test]
fn synthetic_sequence_loads_back() {
    let dir = tempdir().unwrap();
    let mut s = preset("plane-box").unwrap();
    s.frames = 3;
    s.noise = NoiseSpec::none();
    write_tum_sequence(&s, dir.path(), 0, 2).unwrap();
    let ds = load_tum(dir.path()).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.intrinsics, s.intrinsics);
    let gt = ds.groundtruth.as_ref().unwrap();
    for i in 0..3 {
        assert!(gt.entries()[i].1.distance_to(&s.pose(i)) < 1e-12);
        let (truth, _) = s.render_ground_truth(i).unwrap();
        let f = ds.load_frame(i).unwrap();
        assert_eq!(f.color, truth.color);
        for (a, b) in f.depth.as_slice().iter().zip(truth.depth.as_slice()) {
            assert!((a - b).abs() <= 0.5 / 5000.0 + 1e-12);
        }
    }
    assert!(!read_mesh_ply(&dir.path().join("gt_mesh.ply")).unwrap().is_empty());
}

proptest! {
    #[test]
    fn association_is_one_to_one_within_tolerance(
        a in prop::collection::vec(0.0f64..2.0, 0..30),
        b in prop::collection::vec(0.0f64..2.0, 0..30),
    ) {
        let (mut a, mut b) = (a, b);
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let pairs = associate_stamps(&a, &b, 0.02);
        let mut ua = std::collections::HashSet::new();
        let mut ub = std::collections::HashSet::new();
        for &(i, j) in &pairs {
            prop_assert!((a[i] - b[j]).abs() <= 0.02);
            prop_assert!(ua.insert(i) && ub.insert(j));
        }
        // Maximality: no unmatched pair remains within tolerance.
        for (i, ta) in a.iter().enumerate() {
            for (j, tb) in b.iter().enumerate() {
                if !ua.contains(&i) && !ub.contains(&j) {
                    prop_assert!((ta - tb).abs() > 0.02);
                }
            }
        }
    }
}
