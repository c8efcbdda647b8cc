//! Pipeline configuration, stored as TOML with one table per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::DetectConfig;
use crate::error::{Error, Result};
use crate::evaluator::EvalConfig;
use crate::extractor::ExtractConfig;
use crate::imaging::io::atomic_write;
use crate::imaging::{BinarizeConfig, GeometryConfig};
use crate::sampler::SamplerConfig;
use crate::siamese::{ModelSpec, TrainConfig};
use crate::synth::SyntheticPageSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_pages: usize,
    pub page: SyntheticPageSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_pages: 20,
            page: SyntheticPageSpec::default(),
        }
    }
}

/// Sweep axes of the ablation command. Every combination is one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Patch heights in character heights.
    pub patch_multipliers: Vec<f64>,
    pub t_sim: Vec<f64>,
    pub t_diff: Vec<f64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            patch_multipliers: vec![1.0, 3.0, 8.0],
            t_sim: vec![0.7],
            t_diff: vec![0.4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Seeds the sampler, weight initialisation and training shuffles.
    pub rng_seed: u64,
    pub synth: SynthConfig,
    pub binarize: BinarizeConfig,
    pub geometry: GeometryConfig,
    pub sampler: SamplerConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub detect: DetectConfig,
    pub extract: ExtractConfig,
    pub evaluate: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            rng_seed: 0,
            synth: SynthConfig::default(),
            binarize: BinarizeConfig::default(),
            geometry: GeometryConfig::default(),
            sampler: SamplerConfig::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            detect: DetectConfig::default(),
            extract: ExtractConfig::default(),
            evaluate: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(cfg.effective())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always serialisable")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::InvalidConfig(msg) => Error::format(path, msg),
            other => other,
        })
    }

    /// Write the effective configuration next to a stage's outputs.
    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_toml().as_bytes())
    }

    /// Copy `rng_seed` into every stage seed so one number fixes a run.
    pub fn effective(mut self) -> Self {
        self.sampler.rng_seed = self.rng_seed;
        self.train.rng_seed = self.rng_seed;
        self.model.init_seed = self.rng_seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.synth.page.validate()?;
        if self.extract.k == 0 {
            return Err(Error::InvalidConfig("extract.k must be positive".into()));
        }
        for t in [self.evaluate.icdar2013_threshold, self.evaluate.icdar2017_threshold] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidConfig(format!("metric threshold {t} outside [0, 1]")));
            }
        }
        Ok(())
    }
}
