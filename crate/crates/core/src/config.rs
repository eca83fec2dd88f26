//! The merged run configuration echoed next to every artifact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{GridSpec, SplitSizes};
use crate::eval::Fill;
use crate::maskgen::GateConfig;
use crate::training::{TrainConfig, VitRecipe};
use crate::vit::ViTConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub fill: Fill,
    pub bootstrap_resamples: usize,
    /// Evaluate only the first `limit` images when set.
    pub limit: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fill: Fill::Mean,
            bootstrap_resamples: 1000,
            limit: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: GridSpec,
    pub splits: SplitSizes,
    pub vit: ViTConfig,
    pub recipe: VitRecipe,
    pub gates: GateConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Defaults overlaid with a (possibly partial) JSON file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Propagates the master seed and derives the classifier shape from the grid.
    pub fn resolved(mut self) -> Self {
        self.train.seed = self.seed;
        self.recipe.seed = self.seed;
        self.vit.image_size = self.grid.image_size();
        self.vit.patch_size = self.grid.patch_px;
        self.vit.n_classes = self.grid.n_classes();
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.vit.validate()?;
        self.gates.validate()?;
        self.train.validate()?;
        if self.vit.image_size != self.grid.image_size() || self.vit.n_classes != self.grid.n_classes() {
            return Err(Error::Config("classifier shape does not match the grid".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&serde_json::to_value(self)?)? + "\n")
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("config.json"), self.to_json()?)?;
        Ok(())
    }
}
