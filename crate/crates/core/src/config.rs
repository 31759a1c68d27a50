//! TOML configuration. Every section and key is optional; unknown keys are
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::SonarIntrinsics;
use crate::reconstruction::MeshConfig;
use crate::sim::{SimConfig, SyntheticNoise};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_iterations: usize,
    pub stage2_iterations: usize,
    /// Initial position rate, multiplied by the scene extent.
    pub lr_mean: f64,
    /// Position rate reached at the last iteration (exponential decay).
    pub lr_mean_final: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub lr_intensity: f64,
    pub lr_opacity: f64,
    pub lr_noise: f64,
    pub batch_size: usize,
    pub lambda_dssim: f64,
    pub densify_interval: usize,
    pub densify_from: usize,
    pub densify_until: usize,
    /// Mean polar pixel-space positional gradient that triggers cloning.
    pub densify_threshold: f64,
    pub prune_opacity: f64,
    /// Gaussians whose largest scale exceeds this fraction of the scene
    /// extent are removed at each densification.
    pub prune_scale: f64,
    pub max_gaussians: usize,
    /// Pixel intensity above which training pixels seed Gaussians.
    pub init_intensity_threshold: f64,
    pub init_samples_per_pixel: usize,
    pub init_budget: usize,
    pub init_opacity: f64,
    /// Whether stage 2 composites the learned noise into the loss.
    pub noise_enabled: bool,
    pub noise_components: usize,
    pub test_every: usize,
    /// Write a checkpoint every this many iterations; 0 writes only the
    /// final one.
    pub checkpoint_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_iterations: 7000,
            stage2_iterations: 8000,
            lr_mean: 1.6e-4,
            lr_mean_final: 1.6e-6,
            lr_scale: 5e-3,
            lr_rotation: 1e-3,
            lr_intensity: 2.5e-2,
            lr_opacity: 2.5e-2,
            lr_noise: 1e-2,
            batch_size: 8,
            lambda_dssim: 0.2,
            densify_interval: 100,
            densify_from: 500,
            densify_until: 3500,
            densify_threshold: 2e-4,
            prune_opacity: 0.005,
            prune_scale: 0.1,
            max_gaussians: 200_000,
            init_intensity_threshold: 0.2,
            init_samples_per_pixel: 3,
            init_budget: 30_000,
            init_opacity: 0.1,
            noise_enabled: true,
            noise_components: crate::noise::DEFAULT_COMPONENTS,
            test_every: crate::dataset::DEFAULT_TEST_EVERY,
            checkpoint_interval: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("lr_mean", self.lr_mean),
            ("lr_mean_final", self.lr_mean_final),
            ("lr_scale", self.lr_scale),
            ("lr_rotation", self.lr_rotation),
            ("lr_intensity", self.lr_intensity),
            ("lr_opacity", self.lr_opacity),
            ("lr_noise", self.lr_noise),
        ];
        for (name, v) in rates {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid("train config", format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train config", "batch_size must be at least 1"));
        }
        let unit = [
            ("init_intensity_threshold", self.init_intensity_threshold),
            ("densify_threshold", self.densify_threshold),
            ("prune_opacity", self.prune_opacity),
            ("prune_scale", self.prune_scale),
            ("init_opacity", self.init_opacity),
        ];
        for (name, v) in unit {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::invalid("train config", format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda_dssim) {
            return Err(Error::invalid("train config", "lambda_dssim must lie in [0, 1]"));
        }
        if self.noise_components == 0 || self.init_samples_per_pixel == 0 {
            return Err(Error::invalid("train config", "noise_components and init_samples_per_pixel must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub scene: String,
    pub views: usize,
    pub orbit_radius: f64,
    pub orbit_height: f64,
    pub azimuth_fov_deg: f64,
    pub elevation_fov_deg: f64,
    pub min_range: f64,
    pub max_range: f64,
    /// Range bins.
    pub rows: usize,
    /// Azimuth beams.
    pub columns: usize,
    pub subdivisions: usize,
    pub range_falloff: bool,
    pub noise: Option<SyntheticNoise>,
    /// Ground-truth surface samples written to `gt.ply`.
    pub surface_points: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            scene: "cube".into(),
            views: 64,
            orbit_radius: 5.0,
            orbit_height: 1.0,
            azimuth_fov_deg: 90.0,
            elevation_fov_deg: 20.0,
            min_range: 3.0,
            max_range: 7.0,
            rows: 512,
            columns: 399,
            subdivisions: 64,
            range_falloff: false,
            noise: None,
            surface_points: 100_000,
        }
    }
}

impl SimulateConfig {
    pub fn intrinsics(&self) -> Result<SonarIntrinsics> {
        SonarIntrinsics::from_fov(
            self.azimuth_fov_deg.to_radians(),
            self.elevation_fov_deg.to_radians(),
            self.min_range,
            self.max_range,
            self.rows,
            self.columns,
        )
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            subdivisions: self.subdivisions,
            range_falloff: self.range_falloff,
            noise: self.noise.clone(),
        }
    }
}

/// Noise shown in renders of poses without learned noise parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NovelViewNoise {
    #[default]
    Clean,
    /// Borrow the noise of the closest training pose.
    Nearest,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub novel_view_noise: NovelViewNoise,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub train: TrainConfig,
    pub mesh: MeshConfig,
    pub simulate: SimulateConfig,
    pub render: RenderConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text)?;
        c.train.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = Config::default();
        c.train.validate().unwrap();
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let c = Config::from_toml("[train]\nbatch_size = 2\nseed = 7\n").unwrap();
        assert_eq!(c.train.batch_size, 2);
        assert_eq!(c.train.lambda_dssim, 0.2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::from_toml("[train]\nbatchsize = 2\n").is_err());
        assert!(Config::from_toml("[trian]\n").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(Config::from_toml("[train]\nbatch_size = 0\n").is_err());
        assert!(Config::from_toml("[train]\ninit_intensity_threshold = 1.5\n").is_err());
        assert!(Config::from_toml("[train]\nlr_scale = -1.0\n").is_err());
    }
}
