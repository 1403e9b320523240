//! Shared fixtures for the benchmarks: a few frames of the `room` scene and
//! the map built from them.

use gsfusion::pipeline::Pipeline;
use gsfusion::synth::{preset, SceneSpec};
use gsfusion::{Config, Intrinsics, Pose, RawFrame, SurfelMap};

pub struct Fixture {
    pub spec: SceneSpec,
    pub cfg: Config,
    pub k: Intrinsics,
    pub frames: Vec<(RawFrame, Pose)>,
    pub map: SurfelMap,
}

impl Fixture {
    pub fn room(frames: usize) -> Self {
        let spec = preset("room").expect("room preset");
        let cfg = Config::default();
        let k = spec.intrinsics;
        let frames: Vec<_> = (0..frames).map(|i| spec.render_noisy(i, 7).expect("frame in range")).collect();
        let mut p = Pipeline::new(cfg.clone(), k);
        for (raw, pose) in &frames {
            p.process(raw.clone(), Some(*pose), 0.0).expect("pipeline frame");
        }
        let map = p.map().clone();
        Self { spec, cfg, k, frames, map }
    }
}
