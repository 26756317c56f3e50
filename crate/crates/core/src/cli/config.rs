use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::metrics::DETECTION_Z;
use crate::phantom::{CohortOptions, PhantomSpec};
use crate::pipeline::{SegmentConfig, TrainConfig};

use super::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub healthy: usize,
    pub pathological: usize,
    pub shape_sigma: f64,
    pub bulge_factor: f64,
    /// Bulge length as a fraction of the tube.
    pub bulge_fraction: f64,
    pub spec: PhantomSpec,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        let o = CohortOptions::default();
        Self {
            healthy: 15,
            pathological: 6,
            shape_sigma: o.shape_sigma,
            bulge_factor: o.bulge_factor,
            bulge_fraction: o.bulge_fraction,
            spec: PhantomSpec::default(),
        }
    }
}

impl PhantomConfig {
    pub fn options(&self) -> CohortOptions {
        CohortOptions { shape_sigma: self.shape_sigma, bulge_factor: self.bulge_factor, bulge_fraction: self.bulge_fraction }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub threshold: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { threshold: DETECTION_Z }
    }
}

/// Everything a command can be parameterized with. Loaded from TOML, then
/// overridden by command-line flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
    pub phantom: PhantomConfig,
    pub train: TrainConfig,
    pub segment: SegmentConfig,
    pub detect: DetectConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
    }

    pub fn validate_phantom(&self) -> Result<(), CliError> {
        let p = &self.phantom;
        if p.healthy < 2 {
            return Err(CliError::input(format!("at least 2 healthy cases are required, got {}", p.healthy)));
        }
        if !(p.shape_sigma >= 0.0 && p.shape_sigma.is_finite()) {
            return Err(CliError::input(format!("shape_sigma {} must be finite and non-negative", p.shape_sigma)));
        }
        if !(p.bulge_factor > 0.0 && p.bulge_factor.is_finite()) {
            return Err(CliError::input(format!("bulge_factor {} must be positive", p.bulge_factor)));
        }
        if !(p.bulge_fraction > 0.0 && p.bulge_fraction < 1.0) {
            return Err(CliError::input(format!("bulge_fraction {} must lie in (0, 1)", p.bulge_fraction)));
        }
        p.spec.validate().map_err(CliError::input)
    }

    pub fn validate_detect(&self) -> Result<(), CliError> {
        if !self.detect.threshold.is_finite() {
            return Err(CliError::input("detection threshold must be finite"));
        }
        Ok(())
    }
}
