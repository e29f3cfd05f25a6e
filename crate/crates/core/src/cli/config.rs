//! The experiment file: one TOML document holding every knob of a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{
    generate_synthetic, load_external, split, Dataset, ExternalFormat, Splits, DEFAULT_CLASSES, DEFAULT_SAMPLES,
    DEFAULT_SIZE, DEFAULT_TEST_FRACTION, DEFAULT_VAL_FRACTION,
};
use crate::error::{Error, Result};
use crate::evolution::SearchConfig;
use crate::oracle::StandaloneConfig;
use crate::space::SpaceSpec;
use crate::trainer::{BnRecalibration, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub samples: usize,
    pub classes: usize,
    pub size: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// External dataset file (`.scnt` or `.csv`) used instead of the
    /// synthetic generator.
    pub external: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            samples: DEFAULT_SAMPLES,
            classes: DEFAULT_CLASSES,
            size: DEFAULT_SIZE,
            val_fraction: DEFAULT_VAL_FRACTION,
            test_fraction: DEFAULT_TEST_FRACTION,
            external: None,
        }
    }
}

impl DataConfig {
    pub fn load(&self, channels: usize) -> Result<Splits> {
        let full: Dataset = match &self.external {
            Some(p) => load_external(p, ExternalFormat::from_path(p), self.classes, channels)?,
            None => generate_synthetic(self.seed, self.samples, self.classes, self.size)?,
        };
        split(&full, self.val_fraction, self.test_fraction, self.seed)
    }
}

/// Batch-norm re-estimation applied before every one-shot score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Training batches used to re-estimate statistics; 0 disables.
    pub bn_recalibration_batches: usize,
    pub bn_recalibration_batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bn_recalibration_batches: 8,
            bn_recalibration_batch_size: 64,
        }
    }
}

impl EvalConfig {
    pub fn recalibration(&self, train: &Dataset) -> Result<Option<BnRecalibration>> {
        if self.bn_recalibration_batches == 0 {
            return Ok(None);
        }
        BnRecalibration::from_dataset(train, self.bn_recalibration_batches, self.bn_recalibration_batch_size).map(Some)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankConfig {
    /// Architectures trained from scratch for the ground truth; the whole
    /// space when at least its size.
    pub truth_archs: usize,
    /// Table architectures scored by the supernet.
    pub sample_size: usize,
    /// Margin for the ordered-pair count.
    pub pair_margin: f32,
}

impl Default for RankConfig {
    fn default() -> Self {
        Self {
            truth_archs: 81,
            sample_size: 81,
            pair_margin: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub probe_batch: usize,
    pub histogram_samples: usize,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            probe_batch: 64,
            histogram_samples: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldConfig {
    pub probes: usize,
    pub tolerance: f32,
    pub seed: u64,
}

impl Default for FoldConfig {
    fn default() -> Self {
        Self {
            probes: 100,
            tolerance: crate::els::DEFAULT_TOLERANCE,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Preset name (`t1`, `s1`, `s2`) or path to a space file. Skip choices
    /// become stabilizers when `train.els_enabled` is set.
    pub space: String,
    pub out: Option<PathBuf>,
    pub workers: usize,
    /// Equispaced Pareto-front models exported by `search`.
    pub select_k: usize,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub search: SearchConfig,
    pub oracle: StandaloneConfig,
    pub rank: RankConfig,
    pub diagnose: DiagnoseConfig,
    pub fold: FoldConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            space: "t1".into(),
            out: None,
            workers: 1,
            select_k: 3,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            search: SearchConfig::default(),
            oracle: StandaloneConfig::default(),
            rank: RankConfig::default(),
            diagnose: DiagnoseConfig::default(),
            fold: FoldConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, source: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            Error::config(format!(
                "{source}: {}{}",
                e.message(),
                e.span().map(|s| format!(" (at byte {})", s.start)).unwrap_or_default()
            ))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::input(format!("cannot serialize config: {e}")))
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(format!("{:x}", Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// Sets every training, search, oracle and fold seed; the data seed is
    /// kept so runs with different seeds share one dataset.
    pub fn override_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.search.seed = seed;
        self.oracle.seed = seed;
        self.fold.seed = seed;
    }

    pub fn override_workers(&mut self, workers: usize) {
        self.workers = workers;
        self.search.workers = workers;
    }

    /// The base space, before stabilizers are swapped in.
    pub fn base_space(&self) -> Result<SpaceSpec> {
        SpaceSpec::resolve(&self.space).map_err(|e| Error::config(format!("space = {:?}: {e}", self.space)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::config("workers must be at least 1"));
        }
        for (name, f) in [
            ("data.val_fraction", self.data.val_fraction),
            ("data.test_fraction", self.data.test_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::config(format!("{name} = {f} must lie in (0, 1)")));
            }
        }
        if let Some(p) = &self.data.external {
            if !p.exists() {
                return Err(Error::config(format!("data.external {} does not exist", p.display())));
            }
        }
        if self.data.classes < 2 {
            return Err(Error::config("data.classes must be at least 2"));
        }
        if self.rank.sample_size < 2 {
            return Err(Error::config("rank.sample_size must be at least 2"));
        }
        if self.diagnose.probe_batch == 0 || self.diagnose.histogram_samples == 0 {
            return Err(Error::config("diagnose.probe_batch and diagnose.histogram_samples must be positive"));
        }
        if self.fold.probes == 0 {
            return Err(Error::config("fold.probes must be positive"));
        }
        self.train.validate()?;
        self.search.validate()?;
        self.oracle.validate()?;
        let space = self.base_space()?;
        if space.classes != self.data.classes {
            return Err(Error::config(format!(
                "space {} has {} classes but data.classes = {}",
                space.name, space.classes, self.data.classes
            )));
        }
        if self.data.external.is_none() && space.resolution != self.data.size {
            return Err(Error::config(format!(
                "space {} expects {}px inputs but data.size = {}",
                space.name, space.resolution, self.data.size
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap(), "mem").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn unknown_field_names_the_key() {
        let e = ExperimentConfig::from_toml("[train]\nepochz = 3\n", "x.toml").unwrap_err();
        assert!(e.is_config());
        assert!(e.to_string().contains("epochz"), "{e}");
    }

    #[test]
    fn bad_values_are_config_errors() {
        let mut c = ExperimentConfig::default();
        c.search.w_acc = 0.9;
        assert!(c.validate().unwrap_err().is_config());
        let mut c = ExperimentConfig::default();
        c.data.size = 32;
        assert!(c.validate().unwrap_err().is_config());
    }
}
