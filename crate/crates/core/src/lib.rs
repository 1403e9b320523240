//! Gaussian-surfel RGB-D reconstruction: fusion, differentiable splatting,
//! tracking, meshing and evaluation.

pub mod eval;
pub mod frame;
pub mod fusion;
pub mod geometry;
pub mod image;
pub mod io;
pub mod meshing;
pub mod optim;
pub mod pipeline;
pub mod raster;
pub mod sh;
pub mod surfel;
pub mod synth;
pub mod tracking;

pub use frame::{ProcessedFrame, RawFrame};
pub use fusion::{FusionConfig, NoiseParams};
pub use geometry::{Intrinsics, Pose, Twist, Vec2, Vec3};
pub use image::Image;
pub use io::Config;
pub use raster::{render, render_tiled, RenderOptions, RenderOutput};
pub use surfel::{Surfel, SurfelConfig, SurfelMap};
