//! Stage composition shared by the command line, tests and benchmarks.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{apply_mask, assemble, FeatureMask, FeatureMatrix};
use crate::gaopt::GaConfig;
use crate::ingest::{CanFrame, Normalizer, SplitSpec};
use crate::ml::{evaluate, EvalReport, ForestParams, Model, ModelSpec};
use crate::spatial::{extract_pe, PredictorModel, TrainConfig};
use crate::stats::Metric;
use crate::temporal::temporal_features;

/// Window length used when no search result is available.
pub const DEFAULT_FILTER_SIZE: usize = 7500;

/// Tunable settings for every stage. Each field has a default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub split: SplitSpec,
    pub predictor: TrainConfig,
    pub ga: GaConfig,
    pub forest: ForestParams,
    pub filter_size: usize,
    pub metric: Metric,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            split: SplitSpec::default(),
            predictor: TrainConfig::default(),
            ga: GaConfig::default(),
            forest: ForestParams::default(),
            filter_size: DEFAULT_FILTER_SIZE,
            metric: Metric::Accuracy,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.ga.validate()?;
        if self.filter_size == 0 {
            return Err(Error::config("filter_size must be positive"));
        }
        Ok(())
    }
}

/// The 21-column fused matrix for `frames`.
pub fn fuse(frames: &[CanFrame], predictor: &PredictorModel, filter_size: usize) -> Result<FeatureMatrix> {
    let temporal = temporal_features(frames, filter_size)?;
    let spatial = extract_pe(predictor, frames);
    assemble(frames, &spatial, &temporal)
}

/// A classifier together with the column subset and scaling it was fitted on.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedClassifier {
    pub model: Model,
    pub mask: FeatureMask,
    pub normalizer: Normalizer,
}

impl FittedClassifier {
    /// Masks `fused`, fits min-max scaling on `train` rows and trains `spec`
    /// on those rows.
    pub fn fit(fused: &FeatureMatrix, mask: &FeatureMask, train: &[usize], spec: &ModelSpec) -> Result<Self> {
        let masked = apply_mask(fused, mask)?;
        let normalizer = Normalizer::fit(&masked.values, train)?;
        let x = normalizer.apply(&masked.values.select_rows(train))?;
        let y: Vec<bool> = train.iter().map(|&i| masked.labels[i]).collect();
        let model = spec.fit(&x, &y)?;
        Ok(FittedClassifier { model, mask: *mask, normalizer })
    }

    pub fn evaluate(&self, fused: &FeatureMatrix, rows: &[usize]) -> Result<EvalReport> {
        let masked = apply_mask(&fused.select_rows(rows), &self.mask)?;
        let x = self.normalizer.apply(&masked.values)?;
        evaluate(&self.model, &x, &masked.labels)
    }
}

/// Random forest spec from the configured parameters.
pub fn forest_spec(params: &ForestParams) -> ModelSpec {
    ModelSpec::RandomForest(*params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_overrides() {
        let cfg = PipelineConfig::from_toml("filter_size = 9332\n[ga]\nseed = 4\n").unwrap();
        assert_eq!(cfg.filter_size, 9332);
        assert_eq!(cfg.ga.seed, 4);
        assert_eq!(cfg.ga.population, 25);
        assert_eq!(cfg.forest.n_trees, 100);
        assert!(PipelineConfig::from_toml("bogus = 1").is_err());
        assert!(PipelineConfig::from_toml("filter_size = 0").is_err());
    }
}
