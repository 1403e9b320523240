use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_text, write_bytes, IoError};
use crate::fusion::{FusionConfig, NoiseParams};
use crate::meshing::MeshingConfig;
use crate::optim::OptimConfig;
use crate::pipeline::PipelineConfig;
use crate::raster::RenderOptions;
use crate::sh::SH_COEFFS;
use crate::surfel::SurfelConfig;
use crate::tracking::TrackingConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportConfig {
    /// Minimum `tr(Lambda)` of exported surfels.
    pub tau_conf: f64,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self { tau_conf: 0.0 }
    }
}

/// Every tunable of the system, one TOML table per module.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    /// Worker threads; 0 lets the thread pool pick.
    pub threads: usize,
    pub pipeline: PipelineConfig,
    pub surfel: SurfelConfig,
    pub noise: NoiseParams,
    pub fusion: FusionConfig,
    pub render: RenderOptions,
    pub optim: OptimConfig,
    pub tracking: TrackingConfig,
    pub meshing: MeshingConfig,
    pub export: ExportConfig,
}

fn check(ok: bool, what: &str) -> Result<(), IoError> {
    if ok {
        Ok(())
    } else {
        Err(IoError::Config(what.to_string()))
    }
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

fn unit_open(v: f64) -> bool {
    v > 0.0 && v < 1.0
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, IoError> {
        let cfg: Config = toml::from_str(text).map_err(|e| IoError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        Self::from_toml(&read_text(path)?).map_err(|e| match e {
            IoError::Config(m) => IoError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        write_bytes(path, self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<(), IoError> {
        let max_degree = (SH_COEFFS as f64).sqrt() as usize - 1;
        let p = &self.pipeline;
        check(p.optimize_every >= 1, "pipeline.optimize_every must be >= 1")?;
        check(p.max_surfels >= 1, "pipeline.max_surfels must be >= 1")?;

        let s = &self.surfel;
        check(positive(s.alpha_s), "surfel.alpha_s must be positive")?;
        check(s.stride >= 1, "surfel.stride must be >= 1")?;
        check(s.tau_o > 0.0 && s.tau_o <= 1.0, "surfel.tau_o must lie in (0, 1]")?;
        check(positive(s.tau_d), "surfel.tau_d must be positive")?;
        check(unit_open(s.o_init), "surfel.o_init must lie in (0, 1)")?;
        check(s.sh_degree <= max_degree, "surfel.sh_degree exceeds the supported degree")?;
        check(positive(s.cell_size), "surfel.cell_size must be positive")?;

        self.noise.validate().map_err(|e| IoError::Config(format!("noise: {e}")))?;
        check(positive(self.fusion.delta_s) || self.fusion.delta_s == f64::INFINITY, "fusion.delta_s must be positive")?;

        let r = &self.render;
        check(r.tile_size >= 1, "render.tile_size must be >= 1")?;
        check(r.sh_degree <= max_degree, "render.sh_degree exceeds the supported degree")?;

        let o = &self.optim;
        o.weights.validate().map_err(|e| IoError::Config(format!("optim.weights: {e}")))?;
        let lr = &o.learning_rates;
        check(
            [lr.position, lr.rotation, lr.log_scale, lr.logit_opacity, lr.color].iter().all(|v| v.is_finite() && *v >= 0.0),
            "optim.learning_rates must be finite and non-negative",
        )?;
        check(o.n_batch >= 1, "optim.n_batch must be >= 1")?;
        check((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2), "optim.beta1 and beta2 must lie in [0, 1)")?;
        check(positive(o.epsilon), "optim.epsilon must be positive")?;

        let t = &self.tracking;
        check(t.features.max_features >= 1, "tracking.features.max_features must be >= 1")?;
        check(t.features.quality >= 0.0 && t.features.min_response >= 0.0, "tracking.features thresholds must be non-negative")?;
        check(t.ratio > 0.0 && t.ratio <= 1.0, "tracking.ratio must lie in (0, 1]")?;
        check(positive(t.huber_px) && positive(t.inlier_px), "tracking.huber_px and inlier_px must be positive")?;
        check(t.pyramid_levels >= 1, "tracking.pyramid_levels must be >= 1")?;
        check(t.n_pyr >= 1, "tracking.n_pyr must be >= 1")?;
        check(t.lambda_photo >= 0.0 && t.lambda_photo.is_finite(), "tracking.lambda_photo must be non-negative")?;
        check(positive(t.lambda_init), "tracking.lambda_init must be positive")?;
        check(positive(t.max_assoc_dist), "tracking.max_assoc_dist must be positive")?;
        check(t.max_assoc_angle > 0.0 && t.max_assoc_angle <= 180.0, "tracking.max_assoc_angle must lie in (0, 180]")?;
        check(t.tau_step >= 0.0, "tracking.tau_step must be non-negative")?;
        check(positive(t.t_k) && positive(t.theta_k), "tracking.t_k and theta_k must be positive")?;

        let m = &self.meshing;
        check(positive(m.voxel_size), "meshing.voxel_size must be positive")?;
        check(positive(m.truncation), "meshing.truncation must be positive")?;

        check(!self.export.tau_conf.is_nan(), "export.tau_conf must be a number")?;
        Ok(())
    }
}
