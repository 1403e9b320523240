use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use gsfusion::fusion::fuse_frame;
use gsfusion::meshing::{build_occupancy, integrate_depth, marching_cubes, Lattice, TsdfVolume};
use gsfusion::pipeline::Pipeline;
use gsfusion::tracking::features::detect_and_describe;
use gsfusion::{render_tiled, ProcessedFrame, Vec3};
use gsfusion_bench::Fixture;

fn stages(c: &mut Criterion) {
    let fx = Fixture::room(4);
    let (raw, pose) = fx.frames[3].clone();
    let levels = fx.cfg.tracking.pyramid_levels;
    let frame = ProcessedFrame::new(raw.clone(), &fx.k, levels).unwrap();
    let render = render_tiled(&fx.map, &pose, &fx.k, &fx.cfg.render, fx.cfg.render.tile_size);

    let mut g = c.benchmark_group("room_320x240");
    g.sample_size(10);
    g.bench_function("preprocess", |b| b.iter(|| ProcessedFrame::new(raw.clone(), &fx.k, levels).unwrap()));
    g.bench_function("features", |b| b.iter(|| detect_and_describe(&frame.pyramid[0].intensity, &fx.cfg.tracking.features)));
    g.bench_function("render", |b| b.iter(|| render_tiled(&fx.map, &pose, &fx.k, &fx.cfg.render, fx.cfg.render.tile_size)));
    g.bench_function("fuse", |b| {
        b.iter_batched(|| fx.map.clone(), |mut m| fuse_frame(&mut m, &frame, &pose, &render, &fx.cfg.noise, &fx.cfg.fusion), BatchSize::LargeInput)
    });
    g.bench_function("pipeline_frame", |b| {
        b.iter_batched(
            || {
                let mut p = Pipeline::new(fx.cfg.clone(), fx.k);
                for (r, q) in &fx.frames[..3] {
                    p.process(r.clone(), Some(*q), 0.0).unwrap();
                }
                p
            },
            |mut p| p.process(raw.clone(), None, 0.0).unwrap(),
            BatchSize::LargeInput,
        )
    });

    let m = &fx.cfg.meshing;
    let lattice = Lattice::new(Vec3::zeros(), m.voxel_size);
    let mask = build_occupancy(&fx.map, lattice, m.dilation);
    g.bench_function("tsdf_masked", |b| {
        b.iter(|| {
            let mut vol = TsdfVolume::new(lattice, m.truncation);
            integrate_depth(&mut vol, &render.depth, &pose, &fx.k, Some(&mask));
            vol
        })
    });
    let mut vol = TsdfVolume::new(lattice, m.truncation);
    integrate_depth(&mut vol, &render.depth, &pose, &fx.k, Some(&mask));
    g.bench_function("marching_cubes", |b| b.iter(|| marching_cubes(&vol)));
    g.finish();
}

criterion_group!(benches, stages);
criterion_main!(benches);
