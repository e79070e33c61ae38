//! Experiment configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use qml_core::dataspace::{generate_synthetic, load_features, zero_shot_split, Dataset, SplitSpec, SynthConfig};
use qml_core::trainer::{EmbeddingMode, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SynthConfig),
    /// CSV with header `id,modality,class,f0,...`.
    Features(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub unseen_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            unseen_fraction: 0.4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Photo queries against a sketch gallery.
    pub reverse: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    /// Desk-scale synthetic run: 5 classes, 2 unseen, every seen class in
    /// each batch.
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic(SynthConfig::default()),
            split: SplitConfig::default(),
            train: TrainConfig {
                p: 3,
                k: 4,
                embedding: EmbeddingMode::LinearProjection { out_dim: 16 },
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    /// A harder synthetic regime where retrieval is far from saturated:
    /// 20 classes, heavier noise and a larger modality gap.
    pub fn ablation_preset() -> Self {
        let base = Self::default();
        Self {
            data: DataSource::Synthetic(SynthConfig {
                num_classes: 20,
                intra_std: 0.8,
                modality_offset: 5.0,
                ..SynthConfig::default()
            }),
            train: TrainConfig { p: 6, ..base.train },
            output_dir: PathBuf::from("runs/ablation"),
            ..base
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).context("invalid experiment config")?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Ok((Self::parse(&text)?, text))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        if !(self.split.unseen_fraction > 0.0 && self.split.unseen_fraction < 1.0) {
            bail!("split.unseen_fraction must lie in (0, 1)");
        }
        self.train.validate()?;
        Ok(())
    }

    /// Sets every seed (data, split, training) to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        if let DataSource::Synthetic(s) = &mut self.data {
            s.seed = seed;
        }
        self.split.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Loads or generates the dataset. Relative feature paths resolve
    /// against `base`.
    pub fn dataset(&self, base: &Path) -> Result<Dataset> {
        Ok(match &self.data {
            DataSource::Synthetic(s) => generate_synthetic(s)?,
            DataSource::Features(p) => {
                let p = if p.is_relative() { base.join(p) } else { p.clone() };
                load_features(&p).with_context(|| format!("loading features {}", p.display()))?
            }
        })
    }

    pub fn split(&self, dataset: &Dataset) -> Result<SplitSpec> {
        Ok(zero_shot_split(dataset, self.split.unseen_fraction, self.split.seed)?)
    }
}
