//! Run configuration loaded from JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::MeanShiftOptions;
use crate::error::{Error, Result};
use crate::estimation::{DEFAULT_K_FIT, DEFAULT_TEMPERATURE};
use crate::geometry::ConeDistance;
use crate::linalg::EigenSolver;
use crate::losses::LossConfig;
use crate::pipeline::{FeatureScaling, MergeOptions};
use crate::spectral::{EmbeddingScale, DEFAULT_DENSE_CAP};
use crate::tuning::{HyperParams, TuneOptions};

/// Cap on `n/H`, the inverse mean per-point entropy, used by the pipeline.
/// Entropies grow with n (a few hundred for a typical feature at n = 2048),
/// so the cap is taken per point. Every feature whose mean per-point
/// entropy is below 0.1 gets the same weight instead of a handful of
/// non-positive entropies taking all of it.
pub const PIPELINE_MAX_WEIGHT: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub hyper: HyperParams,
    pub loss: LossConfig,
    pub mean_shift: MeanShiftOptions,
    pub merge: MergeOptions,
    pub tune: TuneOptions,
    /// Largest cloud handled densely; bigger inputs are subsampled.
    pub dense_cap: usize,
    /// Neighborhood size of the smoothness graph.
    pub k: usize,
    /// Neighborhood size for local fits.
    pub k_fit: usize,
    /// Neighborhood size for normal estimation when the input has none.
    pub k_normals: usize,
    pub temperature: f64,
    /// Cap on a feature's unnormalized weight, expressed per point: the
    /// pipeline caps `1/H` at `max_weight / n`.
    pub max_weight: f64,
    pub cone_distance: ConeDistance,
    pub embedding_scale: EmbeddingScale,
    pub feature_scaling: FeatureScaling,
    pub solver: EigenSolver,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            hyper: HyperParams::default(),
            loss: LossConfig::default(),
            mean_shift: MeanShiftOptions::default(),
            merge: MergeOptions::default(),
            tune: TuneOptions::default(),
            dense_cap: DEFAULT_DENSE_CAP,
            k: 50,
            k_fit: DEFAULT_K_FIT,
            k_normals: 16,
            temperature: DEFAULT_TEMPERATURE,
            max_weight: PIPELINE_MAX_WEIGHT,
            cone_distance: ConeDistance::default(),
            embedding_scale: EmbeddingScale::default(),
            feature_scaling: FeatureScaling::default(),
            solver: EigenSolver::default(),
            seed: 0,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.loss.validate()?;
        if self.dense_cap < 2 {
            return Err(Error::InvalidArgument("dense_cap must be at least 2".into()));
        }
        if self.k == 0 || self.k_fit < 6 || self.k_normals < 3 {
            return Err(Error::InvalidArgument("need k >= 1, k_fit >= 6 and k_normals >= 3".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        if !(self.max_weight > 0.0 && self.max_weight.is_finite()) {
            return Err(Error::InvalidArgument("max_weight must be positive".into()));
        }
        let ms = &self.mean_shift;
        if ms.max_iter == 0 || !(ms.tol_factor > 0.0) || !(ms.merge_factor > 0.0) {
            return Err(Error::InvalidArgument("mean_shift needs max_iter >= 1 and positive tolerances".into()));
        }
        let mg = &self.merge;
        if !(mg.ratio >= 1.0 && mg.ratio.is_finite()) || !(mg.floor >= 0.0 && mg.floor.is_finite()) {
            return Err(Error::InvalidArgument("merge needs ratio >= 1 and a non-negative floor".into()));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::parse(e.line(), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| e.with_path(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(Config::from_json_str("{}").unwrap(), Config::default());
    }

    #[test]
    fn defaults_round_trip() {
        let text = serde_json::to_string_pretty(&Config::default()).unwrap();
        assert_eq!(Config::from_json_str(&text).unwrap(), Config::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Config::from_json_str("{\"hyper\": {\"sigma_q\": 1.0}}").unwrap_err();
        assert!(err.to_string().contains("sigma_q"), "{err}");
        let err = Config::from_json_str("{\"bogus\": 1}").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(Config::from_json_str("{\"hyper\": {\"sigma_e\": -1.0}}").is_err());
        assert!(Config::from_json_str("{\"loss\": {\"delta1\": 2.0}}").is_err());
        assert!(Config::from_json_str("{\"k_fit\": 2}").is_err());
    }

    #[test]
    fn enums_use_snake_case() {
        let cfg = Config::from_json_str("{\"cone_distance\": \"literal\", \"embedding_scale\": \"inverse\", \"solver\": \"lanczos\"}").unwrap();
        assert_eq!(cfg.cone_distance, ConeDistance::Literal);
        assert_eq!(cfg.embedding_scale, EmbeddingScale::Inverse);
        assert_eq!(cfg.solver, EigenSolver::Lanczos);
    }
}
