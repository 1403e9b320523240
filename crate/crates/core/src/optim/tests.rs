use super::*;
use crate::fusion::NoiseParams;
use crate::geometry::Vec2;
use crate::image::Image;
use crate::raster::render;
use crate::surfel::rotation_from_normal;
use approx::assert_relative_eq;
use nalgebra::Vector6;
use rand::SeedableRng;

fn k16() -> Intrinsics {
    Intrinsics::new(20.0, 20.0, 7.5, 7.5, 16, 16, 5000.0).unwrap()
}

fn surfel(p: Vec3, n: Vec3, s: Vector2<f64>, o: f64, rgb: Vec3) -> Surfel {
    let mut sh = [Vec3::zeros(); SH_COEFFS];
    sh[0] = sh::rgb_to_dc(&rgb);
    let lambda = NoiseParams::default().information(1.0);
    Surfel {
        position: p,
        scale: s,
        rotation: rotation_from_normal(&n),
        opacity: o,
        sh,
        lambda,
        eta: lambda.component_mul(&Vector6::new(p.x, p.y, p.z, n.x, n.y, n.z)),
        anchor_position: p,
        anchor_normal: n,
        created_frame: 0,
        last_observed: 0,
    }
}

fn random_scene(seed: u64, n: usize) -> SurfelMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let surfels = (0..n)
        .map(|_| {
            let p = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(0.8..1.4));
            let n = Vec3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), -1.0).normalize();
            let s = Vector2::new(rng.random_range(0.03..0.08), rng.random_range(0.03..0.08));
            let c = Vec3::new(rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9));
            let mut sf = surfel(p, n, s, rng.random_range(0.2..0.8), c);
            sf.rotation = UnitQuaternion::from_scaled_axis(n * rng.random_range(-1.0..1.0)) * sf.rotation;
            for kk in 1..SH_COEFFS {
                sf.sh[kk] = Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
            }
            sf
        })
        .collect();
    SurfelMap::from_surfels(surfels, 0.1)
}

/// Frame whose color, depth and normals equal a render exactly.
fn frame_from_render(r: &RenderOutput, k: &Intrinsics) -> ProcessedFrame {
    let mut f = ProcessedFrame::from_float(r.color.clone(), r.depth.clone(), k, 1, 0.0, 0).unwrap();
    f.normal = r.normal.clone();
    f
}

fn opts() -> RenderOptions {
    RenderOptions::default().with_contributors()
}

fn pose() -> Pose {
    Pose::new(UnitQuaternion::from_euler_angles(0.03, -0.02, 0.05), Vec3::new(0.02, -0.01, 0.03))
}

fn uniform_frame(k: &Intrinsics, c: Vec3, d: f64) -> ProcessedFrame {
    ProcessedFrame::from_float(Image::new(k.width, k.height, c), Image::new(k.width, k.height, d), k, 1, 0.0, 0).unwrap()
}

fn uniform_render(k: &Intrinsics, c: Vec3, d: f64, n: Vec3) -> RenderOutput {
    RenderOutput {
        color: Image::new(k.width, k.height, c),
        depth: Image::new(k.width, k.height, d),
        normal: Image::new(k.width, k.height, n),
        alpha: Image::new(k.width, k.height, 1.0),
        contributors: None,
    }
}

#[test]
fn photometric_examples() {
    let k = k16();
    let f = uniform_frame(&k, Vec3::repeat(0.5), 1.0);
    assert_eq!(loss_photometric(&uniform_render(&k, Vec3::repeat(0.5), 1.0, -Vec3::z()), &f).unwrap(), 0.0);
    let l = loss_photometric(&uniform_render(&k, Vec3::repeat(0.6), 1.0, -Vec3::z()), &f).unwrap();
    assert_relative_eq!(l, 0.1, epsilon = 1e-12);
    let mut empty = uniform_render(&k, Vec3::repeat(0.5), 1.0, -Vec3::z());
    empty.alpha = Image::new(16, 16, 0.0);
    assert_eq!(loss_photometric(&empty, &f), Err(OptimError::EmptyDomain("color")));
}

#[test]
fn losses_match_scalar_reference() {
    let k = k16();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cf = vec![0.0; 16 * 16 * 3];
    let mut cr = vec![0.0; 16 * 16 * 3];
    for v in cf.iter_mut().chain(cr.iter_mut()) {
        *v = rng.random::<f64>();
    }
    let mut alpha = vec![0.0; 256];
    let mut dr = vec![0.0; 256];
    let mut df = vec![0.0; 256];
    for i in 0..256 {
        alpha[i] = if rng.random::<f64>() < 0.8 { rng.random_range(0.01..1.0) } else { 0.0 };
        dr[i] = if alpha[i] > 0.0 { rng.random_range(0.5..2.0) } else { 0.0 };
        df[i] = if rng.random::<f64>() < 0.9 { rng.random_range(0.5..2.0) } else { 0.0 };
    }
    let to_img = |v: &[f64]| Image::from_vec(16, 16, (0..256).map(|i| Vec3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2])).collect());
    let frame = ProcessedFrame::from_float(to_img(&cf), Image::from_vec(16, 16, df.clone()), &k, 1, 0.0, 0).unwrap();
    let render = RenderOutput {
        color: to_img(&cr),
        depth: Image::from_vec(16, 16, dr.clone()),
        normal: Image::new(16, 16, -Vec3::z()),
        alpha: Image::from_vec(16, 16, alpha.clone()),
        contributors: None,
    };
    let mut sum = 0.0;
    let mut n = 0.0;
    for i in 0..256 {
        if alpha[i] >= 1e-3 {
            for c in 0..3 {
                sum += (cf[3 * i + c] - cr[3 * i + c]).abs();
            }
            n += 3.0;
        }
    }
    assert!((loss_photometric(&render, &frame).unwrap() - sum / n).abs() <= 1e-12);
    let (mut sd, mut nd) = (0.0, 0.0);
    for i in 0..256 {
        if df[i] > 0.0 && dr[i] > 0.0 {
            sd += (df[i] - dr[i]).abs();
            nd += 1.0;
        }
    }
    assert!((loss_depth(&render, &frame).unwrap() - sd / nd).abs() <= 1e-12);
}

#[test]
fn normal_loss_examples() {
    let k = k16();
    let mut f = uniform_frame(&k, Vec3::repeat(0.5), 1.0);
    f.normal = Image::new(16, 16, -Vec3::z());
    let same = uniform_render(&k, Vec3::repeat(0.5), 1.0, -Vec3::z());
    assert_eq!(loss_normal(&same, &f).unwrap(), 0.0);
    assert_eq!(loss_depth(&same, &f).unwrap(), 0.0);
    assert_relative_eq!(loss_normal(&uniform_render(&k, Vec3::zeros(), 1.0, Vec3::x()), &f).unwrap(), 1.0);
    assert_relative_eq!(loss_normal(&uniform_render(&k, Vec3::zeros(), 1.0, Vec3::z()), &f).unwrap(), 2.0);
}

#[test]
fn reg_loss_examples() {
    let mut s = surfel(Vec3::new(0.0, 0.0, 1.0), -Vec3::z(), Vector2::new(0.01, 0.01), 0.5, Vec3::zeros());
    assert_eq!(loss_reg(std::slice::from_ref(&s), &[0], 0.1), 0.0);
    s.position.x += 0.01;
    assert_relative_eq!(loss_reg(std::slice::from_ref(&s), &[0], 0.1), 0.01, epsilon = 1e-15);
    s.position.x -= 0.01;
    let theta: f64 = 0.3;
    s.rotation = UnitQuaternion::from_scaled_axis(Vec3::x() * theta) * s.rotation;
    assert_relative_eq!(loss_reg(std::slice::from_ref(&s), &[0], 0.1), 0.1 * (1.0 - theta.cos()), epsilon = 1e-15);
}

#[test]
fn total_loss_is_weighted_sum() {
    let k = k16();
    let map = random_scene(5, 30);
    let target = frame_from_render(&render(&random_scene(6, 30), &pose(), &k, &opts()), &k);
    let r = render(&map, &pose(), &k, &opts());
    let w = LossWeights { w_d: 0.7, w_n: 0.3, w_reg: 2.0, w_reg_n: 0.5 };
    let mut moved = map.clone();
    for s in moved.surfels_mut() {
        s.anchor_position += Vec3::new(0.01, 0.0, 0.0);
    }
    let t = total_loss(&r, &target, moved.surfels(), &w).unwrap();
    let ids = optimized_ids(&r);
    let expect = loss_photometric(&r, &target).unwrap()
        + 0.7 * loss_depth(&r, &target).unwrap()
        + 0.3 * loss_normal(&r, &target).unwrap()
        + 2.0 * loss_reg(moved.surfels(), &ids, 0.5);
    assert!((t.total - expect).abs() <= 1e-12);
    let c = total_loss(&r, &target, moved.surfels(), &LossWeights::color_only()).unwrap();
    assert_eq!(c.total, loss_photometric(&r, &target).unwrap());
}

#[test]
fn zero_loss_has_zero_gradient() {
    let k = k16();
    let map = random_scene(9, 40);
    let r = render(&map, &pose(), &k, &opts());
    let frame = frame_from_render(&r, &k);
    let g = backward(&r, &frame, &map, &pose(), &LossWeights::default()).unwrap();
    assert!(g.loss.total.abs() < 1e-12);
    for gr in &g.grads {
        assert!(gr.p.norm() < 1e-10 && gr.r.norm() < 1e-10 && gr.s.norm() < 1e-10 && gr.o.abs() < 1e-10);
        assert!(gr.sh.iter().all(|c| c.norm() < 1e-10));
    }
}

#[derive(Clone, Copy, Debug)]
enum Param {
    P(usize),
    S(usize),
    R(usize),
    O,
    C(usize, usize),
}

fn perturb(s: &mut Surfel, p: Param, h: f64) {
    match p {
        Param::P(i) => s.position[i] += h,
        Param::S(i) => s.scale[i] += h,
        Param::R(i) => {
            let mut v = Vec3::zeros();
            v[i] = h;
            s.rotation = UnitQuaternion::from_scaled_axis(v) * s.rotation;
        }
        Param::O => s.opacity += h,
        Param::C(kk, ch) => s.sh[kk][ch] += h,
    }
}

fn analytic(g: &SurfelGrad, p: Param) -> f64 {
    match p {
        Param::P(i) => g.p[i],
        Param::S(i) => g.s[i],
        Param::R(i) => g.r[i],
        Param::O => g.o,
        Param::C(kk, ch) => g.sh[kk][ch],
    }
}

fn loss_of(map: &SurfelMap, frame: &ProcessedFrame, w: &LossWeights) -> f64 {
    let r = render(map, &pose(), &frame.intrinsics, &opts());
    total_loss(&r, frame, map.surfels(), w).unwrap().total
}

/// Central differences against the analytic gradient; components sitting on
/// a kink (one-sided slopes disagree) are skipped.
fn check_group(params: &[Param], seed: u64) -> (usize, usize) {
    let k = k16();
    let mut map = random_scene(seed, 24);
    let target = frame_from_render(&render(&random_scene(seed + 1000, 24), &pose(), &k, &opts()), &k);
    for s in map.surfels_mut() {
        s.anchor_position += Vec3::new(0.004, -0.003, 0.002);
        s.anchor_normal = (s.anchor_normal + Vec3::new(0.05, 0.02, 0.0)).normalize();
    }
    let w = LossWeights::default();
    let r = render(&map, &pose(), &k, &opts());
    let g = backward(&r, &target, &map, &pose(), &w).unwrap();
    let (mut checked, mut kinks) = (0, 0);
    for (&id, gr) in g.ids.iter().zip(g.grads.iter()) {
        for &p in params {
            let s0 = map.get(id).clone();
            let h = match p {
                Param::P(_) => 1e-4 * s0.scale.min(),
                Param::S(i) => 1e-4 * s0.scale[i],
                _ => 1e-4,
            };
            let eval = |dh: f64| {
                let mut m = map.clone();
                perturb(&mut m.surfels_mut()[id], p, dh);
                loss_of(&m, &target, &w)
            };
            let (lp, l0, lm) = (eval(h), eval(0.0), eval(-h));
            let fwd = (lp - l0) / h;
            let bwd = (l0 - lm) / h;
            let central = (lp - lm) / (2.0 * h);
            if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()) + 1e-7 {
                kinks += 1;
                continue;
            }
            let a = analytic(gr, p);
            if a.abs().max(central.abs()) <= 1e-6 {
                continue;
            }
            let rel = (a - central).abs() / a.abs().max(central.abs());
            assert!(rel <= 1e-3, "surfel {id} {p:?}: analytic {a:e} vs numeric {central:e} (rel {rel:e})");
            checked += 1;
        }
    }
    (checked, kinks)
}

#[test]
fn position_gradient_matches_finite_differences() {
    let (c, k) = check_group(&[Param::P(0), Param::P(1), Param::P(2)], 21);
    assert!(c > 3 * k && c > 20, "checked {c}, kinks {k}");
}

#[test]
fn scale_gradient_matches_finite_differences() {
    let (c, k) = check_group(&[Param::S(0), Param::S(1)], 22);
    assert!(c > 3 * k && c > 15, "checked {c}, kinks {k}");
}

#[test]
fn rotation_gradient_matches_finite_differences() {
    let (c, k) = check_group(&[Param::R(0), Param::R(1), Param::R(2)], 23);
    assert!(c > 3 * k && c > 20, "checked {c}, kinks {k}");
}

#[test]
fn opacity_gradient_matches_finite_differences() {
    let (c, k) = check_group(&[Param::O], 24);
    assert!(c > 3 * k && c > 8, "checked {c}, kinks {k}");
}

#[test]
fn color_gradient_matches_finite_differences() {
    let params: Vec<Param> = (0..SH_COEFFS).flat_map(|kk| (0..3).map(move |ch| Param::C(kk, ch))).collect();
    let (c, k) = check_group(&params, 25);
    assert!(c > 3 * k && c > 40, "checked {c}, kinks {k}");
}

#[test]
fn opacity_gradient_sign() {
    let k = k16();
    let dark = Vec3::repeat(0.2);
    let front = surfel(Vec3::new(0.0, 0.0, 1.0), -Vec3::z(), Vector2::new(0.5, 0.5), 0.5, dark);
    let back = surfel(Vec3::new(0.0, 0.0, 2.0), -Vec3::z(), Vector2::new(1.0, 1.0), 1.0, Vec3::repeat(1.0));
    let map = SurfelMap::from_surfels(vec![front, back], 0.1);
    let r = render(&map, &Pose::identity(), &k, &opts());
    let frame = uniform_frame(&k, dark, 1.0);
    let g = backward(&r, &frame, &map, &Pose::identity(), &LossWeights::color_only()).unwrap();
    let i = g.ids.iter().position(|&id| id == 0).unwrap();
    assert!(g.grads[i].o < 0.0);
}

fn window_for(map: &SurfelMap, poses: &[Pose], k: &Intrinsics) -> KeyframeWindow {
    let mut w = KeyframeWindow::new(8);
    for p in poses {
        let r = render(map, p, k, &opts());
        w.push(Arc::new(frame_from_render(&r, k)), *p);
    }
    w
}

fn small_k() -> Intrinsics {
    Intrinsics::new(40.0, 40.0, 15.5, 11.5, 32, 24, 5000.0).unwrap()
}

fn wall_scene() -> SurfelMap {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut v = Vec::new();
    for iy in -8..=8 {
        for ix in -10..=10 {
            let p = Vec3::new(ix as f64 * 0.025, iy as f64 * 0.025, 1.0 + 0.004 * ((ix + iy + 30) % 3) as f64);
            let (fx, fy) = (ix as f64 * 0.3, iy as f64 * 0.4);
            let c = Vec3::new(0.5 + 0.2 * fx.sin(), 0.5 + 0.2 * fy.cos(), 0.4 + 0.1 * (fx + fy).sin());
            v.push(surfel(p, -Vec3::z(), Vector2::new(0.02, 0.02), 0.7 + rng.random_range(-0.1..0.1), c));
        }
    }
    SurfelMap::from_surfels(v, 0.1)
}

#[test]
fn zero_iterations_is_noop() {
    let k = small_k();
    let mut map = wall_scene();
    let before = map.surfels().to_vec();
    let window = window_for(&map, &[Pose::identity()], &k);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let st = optimize_batch(&mut map, &window, 0, &mut OptimizerState::new(), &OptimConfig::default(), &opts(), &mut rng);
    assert_eq!(st.iterations, 0);
    assert_eq!(map.surfels(), &before[..]);
}

#[test]
fn converged_scene_is_fixed_point() {
    let k = small_k();
    let mut map = wall_scene();
    let poses = [Pose::identity(), Pose::from_translation(Vec3::new(0.02, 0.0, 0.0))];
    let window = window_for(&map, &poses, &k);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let st = optimize_batch(&mut map, &window, 2, &mut OptimizerState::new(), &OptimConfig::default(), &opts(), &mut rng);
    for w in st.losses.windows(2) {
        assert!((w[1] - w[0]).abs() < 1e-6, "{:?}", st.losses);
    }
}

fn noisy_setup() -> (SurfelMap, KeyframeWindow) {
    let k = small_k();
    let clean = wall_scene();
    let poses = [
        Pose::identity(),
        Pose::from_translation(Vec3::new(0.03, 0.0, 0.0)),
        Pose::from_translation(Vec3::new(0.0, 0.03, 0.0)),
    ];
    let window = window_for(&clean, &poses, &k);
    let mut noisy = clean.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for s in noisy.surfels_mut() {
        let mut u = |r: f64| rng.random_range(-r..r);
        s.position += Vec3::new(u(6e-4), u(6e-4), u(6e-4));
        s.rotation = UnitQuaternion::from_scaled_axis(Vec3::new(u(6e-3), u(6e-3), u(6e-3))) * s.rotation;
        s.scale = s.scale.map(|v| v * u(6e-3).exp());
        s.opacity = sigmoid(logit(s.opacity) + u(0.3));
        s.sh[0] += Vec3::new(u(0.02), u(0.02), u(0.02));
    }
    (noisy, window)
}

fn window_loss(map: &SurfelMap, window: &KeyframeWindow, w: &LossWeights) -> f64 {
    let mut sum = 0.0;
    for i in 0..window.len() {
        let (frame, pose) = window.get(i);
        let r = render(map, pose, &frame.intrinsics, &opts());
        sum += total_loss(&r, frame, map.surfels(), w).unwrap().total;
    }
    sum / window.len() as f64
}

#[test]
fn noisy_initialization_halves_loss_in_nine_iterations() {
    let (mut map, window) = noisy_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = OptimConfig::default();
    let before = window_loss(&map, &window, &cfg.weights);
    let st = optimize_batch(&mut map, &window, 3, &mut OptimizerState::new(), &cfg, &opts(), &mut rng);
    assert_eq!(st.losses.len(), 9);
    let after = window_loss(&map, &window, &cfg.weights);
    assert!(after <= 0.5 * before, "loss {before} -> {after}");
}

#[test]
fn optimization_is_deterministic_and_legal() {
    let run = || {
        let (mut map, window) = noisy_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let st = optimize_batch(&mut map, &window, 2, &mut OptimizerState::new(), &OptimConfig::default(), &opts(), &mut rng);
        (st, map)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a.losses, b.losses);
    assert_eq!(ma.surfels(), mb.surfels());
    for s in ma.surfels() {
        assert!((s.rotation.norm() - 1.0).abs() < 1e-9);
        assert!(s.scale.x > 0.0 && s.scale.y > 0.0);
        assert!((0.0..=1.0).contains(&s.opacity));
        assert!(s.sh.iter().all(|c| c.iter().all(|v| v.is_finite())));
    }
    let _ = Vec2::zeros();
}


