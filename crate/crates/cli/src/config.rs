//! The JSON run configuration and its flag overrides.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use bvos_core::model::ModelConfig;
use bvos_core::synthetic::{generate_sequence, make_scene_set, Category, Sequence, SuiteScene};
use bvos_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Which synthetic scenes a command works on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub categories: Vec<Category>,
    pub seed: u64,
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            categories: Category::ALL.to_vec(),
            seed: 1,
            count: 200,
            width: 64,
            height: 64,
            frames: 8,
        }
    }
}

impl DataConfig {
    pub fn scenes(&self) -> Result<Vec<SuiteScene>> {
        if self.categories.is_empty() || self.count == 0 {
            bail!("data needs at least one category and one scene");
        }
        Ok(make_scene_set(&self.categories, self.seed, self.count, self.width, self.height, self.frames))
    }

    pub fn sequences(&self) -> Result<Vec<Sequence>> {
        self.scenes()?
            .iter()
            .map(|s| generate_sequence(&s.scene, &s.name).map_err(Into::into))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Training scenes.
    pub data: DataConfig,
    /// Held-out scenes for `eval`.
    pub eval: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: DataConfig {
                seed: 7,
                count: 8,
                ..DataConfig::default()
            },
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            }
        }
    }
}

pub fn preset(name: &str) -> Result<ModelConfig> {
    Ok(match name {
        "toy" => ModelConfig::toy(),
        "tiny" => ModelConfig::tiny(),
        "full" => ModelConfig::full_scale(),
        other => bail!("unknown preset {other:?} (expected toy, tiny or full)"),
    })
}

pub fn parse_category(s: &str) -> Result<Category, String> {
    Category::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Category::ALL.iter().map(|c| c.name()).collect();
        format!("unknown category {s:?} (expected one of {})", names.join(", "))
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}
