//! One TOML file driving a whole experiment.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pipeline::FeatureConfig;
use crate::sim::{BgmEntry, DatasetConfig, Motion, SceneConfig, SplitKind, SplitPolicy, SplitTag};
use crate::train::TrainConfig;

/// `[dataset]`: everything of [`DatasetConfig`] except scene, music and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub motions: Vec<Motion>,
    pub clips_per_combo: usize,
    pub clip_duration_s: f64,
    pub subjects: usize,
    pub snr_db: Option<f64>,
    pub split: SplitPolicy,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            motions: d.motions,
            clips_per_combo: d.clips_per_combo,
            clip_duration_s: d.clip_duration_s,
            subjects: d.subjects,
            snr_db: d.snr_db,
            split: d.split,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Which split protocol features, training and evaluation follow.
    pub split_kind: SplitKind,
    /// Partition scored by `eval`.
    pub tag: SplitTag,
    pub batch: usize,
    /// Also render the separability scatter plot as SVG.
    pub svg: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split_kind: SplitKind::SingleMusic,
            tag: SplitTag::Test,
            batch: 64,
            svg: true,
        }
    }
}

/// Top-level `seed` drives dataset generation, weight init and batching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub bgm: Vec<BgmEntry>,
    pub dataset: DatasetSection,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneConfig::default(),
            bgm: DatasetConfig::default().bgms,
            dataset: DatasetSection::default(),
            features: FeatureConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the resolved config as `config.resolved.toml` in `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(SNAPSHOT_FILE);
        fs::write(&path, self.resolved().to_toml()?).map_err(|e| Error::io(&path, e))
    }

    /// Copy with the top-level seed pushed into sections that carry their own.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.train.seed = c.seed;
        c
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolved()
    }

    pub fn validate(&self) -> Result<()> {
        if i64::try_from(self.seed).is_err() || i64::try_from(self.train.seed).is_err() {
            return Err(Error::Config(format!("seed must not exceed {}", i64::MAX)));
        }
        self.dataset_config().validate()?;
        self.features.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.bins != self.features.bins || self.model.frames != self.features.window {
            return Err(Error::Config(format!(
                "model expects {}x{} inputs but features produce {}x{}",
                self.model.bins, self.model.frames, self.features.bins, self.features.window
            )));
        }
        if self.eval.batch == 0 {
            return Err(Error::Config("eval batch must be positive".into()));
        }
        Ok(())
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        let d = &self.dataset;
        DatasetConfig {
            scene: self.scene.clone(),
            bgms: self.bgm.clone(),
            motions: d.motions.clone(),
            clips_per_combo: d.clips_per_combo,
            clip_duration_s: d.clip_duration_s,
            subjects: d.subjects,
            snr_db: d.snr_db,
            split: d.split.clone(),
            seed: self.seed,
        }
    }
}

pub const SNAPSHOT_FILE: &str = "config.resolved.toml";
