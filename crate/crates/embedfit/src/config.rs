//! Run configuration: one TOML document, overridden by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use embedfit_core::baseline::RansacConfig;
use embedfit_core::datagen::{Composition, DatasetSpec, ShapeRanges};
use embedfit_core::geometry::BoundingBox;
use embedfit_core::inference::{InferenceConfig, KMeansConfig, KMode};
use embedfit_core::seed;
use embedfit_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

/// Generator settings shared by all splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub composition: Composition,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub points_per_structure: (usize, usize),
    pub noise_sigma: f64,
    pub outlier_fraction: f64,
    pub bounding_box: BoundingBox,
    pub shapes: ShapeRanges,
}

impl Default for DataConfig {
    fn default() -> Self {
        let spec = DatasetSpec::default();
        Self {
            composition: spec.composition,
            n_train: 8000,
            n_val: 200,
            n_test: 200,
            points_per_structure: spec.points_per_structure,
            noise_sigma: spec.noise_sigma,
            outlier_fraction: spec.outlier_fraction,
            bounding_box: spec.bounding_box,
            shapes: spec.shapes,
        }
    }
}

impl DataConfig {
    /// Generator spec for one split; split seeds are derived from `master_seed`.
    pub fn spec(&self, split: Split, master_seed: u64) -> DatasetSpec {
        DatasetSpec {
            n_samples: match split {
                Split::Train => self.n_train,
                Split::Val => self.n_val,
                Split::Test => self.n_test,
            },
            composition: self.composition,
            points_per_structure: self.points_per_structure,
            noise_sigma: self.noise_sigma,
            bounding_box: self.bounding_box,
            shapes: self.shapes,
            outlier_fraction: self.outlier_fraction,
            seed: seed::derive(master_seed, split.stream()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceSection {
    pub k_mode: KMode,
    pub kmeans: KMeansConfig,
    pub sod_range: (usize, usize),
    pub silhouette_range: (usize, usize),
}

impl Default for InferenceSection {
    fn default() -> Self {
        let d = InferenceConfig::default();
        Self {
            k_mode: KMode::GroundTruthK,
            kmeans: d.kmeans,
            sod_range: d.sod_range,
            silhouette_range: d.silhouette_range,
        }
    }
}

impl InferenceSection {
    pub fn config(&self, seed: u64) -> InferenceConfig {
        InferenceConfig {
            kmeans: self.kmeans,
            sod_range: self.sod_range,
            silhouette_range: self.silhouette_range,
            model_selection: true,
            seed,
        }
    }
}

/// Everything a command needs. Component seeds are replaced by the master
/// `seed` on resolution so one number reproduces a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Where datasets live; defaults to `out_dir`.
    pub data_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub inference: InferenceSection,
    pub baseline: RansacConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data_dir: None,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceSection::default(),
            baseline: RansacConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn data_dir(&self) -> &Path {
        self.data_dir.as_deref().unwrap_or(&self.out_dir)
    }

    pub fn dataset_path(&self, split: Split) -> PathBuf {
        self.data_dir().join(format!("{}.jsonl", split.name()))
    }

    pub fn inference_config(&self) -> InferenceConfig {
        self.inference.config(self.seed)
    }

    /// Propagates the master seed and checks every section.
    pub fn resolve(mut self) -> Result<Self> {
        if self.seed > i64::MAX as u64 {
            bail!("seed must be at most {}", i64::MAX);
        }
        self.train.seed = self.seed;
        self.train.validation.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        for split in Split::ALL {
            let spec = self.data.spec(split, self.seed);
            // an empty split is allowed; the generator itself needs n >= 1
            let spec = DatasetSpec {
                n_samples: spec.n_samples.max(1),
                ..spec
            };
            spec.validate().context("[data]")?;
        }
        self.train.validate().context("[train]")?;
        self.baseline.validate().context("[baseline]")?;
        let (lo, hi) = self.inference.sod_range;
        if lo == 0 || hi < lo + 2 {
            bail!("[inference] sod_range must start at 1 or more and span at least 3 values");
        }
        let (lo, hi) = self.inference.silhouette_range;
        if lo < 2 || hi < lo {
            bail!("[inference] silhouette_range must start at 2 or more");
        }
        if self.inference.kmeans.restarts == 0 || self.inference.kmeans.max_iter == 0 {
            bail!("[inference] kmeans restarts and max_iter must be >= 1");
        }
        Ok(())
    }
}
