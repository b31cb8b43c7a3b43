use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use segadapt::network::ModelConfig;
use segadapt::trainer::TrainConfig;

/// Size preset of data, model and preprocessing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Scale {
    Desk,
    Paper,
}

/// Everything a command needs besides its paths. Loaded from TOML with
/// unknown keys rejected; missing keys take the values of the chosen preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Remove small connected components from predictions.
    pub postprocess: bool,
    /// Dataset directory, used when `--data` is not given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_scale(Scale::Desk)
    }
}

impl RunConfig {
    pub fn for_scale(scale: Scale) -> Self {
        let model = match scale {
            Scale::Desk => ModelConfig::desk(),
            Scale::Paper => ModelConfig::paper(),
        };
        let mut train = match scale {
            Scale::Desk => TrainConfig::desk(),
            Scale::Paper => TrainConfig::default(),
        };
        train.preprocess.target_size = model.input_size;
        if scale == Scale::Paper {
            train.folds = 5;
        }
        Self {
            postprocess: true,
            data: None,
            model,
            train,
        }
    }

    /// The file if given, otherwise the preset of `scale`.
    pub fn load(path: Option<&Path>, scale: Scale) -> Result<Self> {
        let cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text, scale).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Self::for_scale(scale),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse `text` over the preset of `scale`, table by table.
    pub fn parse(text: &str, scale: Scale) -> Result<Self> {
        let user: toml::Table = toml::from_str(text)?;
        let mut merged = toml::Table::try_from(Self::for_scale(scale))?;
        merge(&mut merged, user);
        Ok(merged.try_into()?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        anyhow::ensure!(
            self.model.input_size == self.train.preprocess.target_size,
            "model.input_size = {} but train.preprocess.target_size = {}",
            self.model.input_size,
            self.train.preprocess.target_size
        );
        Ok(())
    }

    pub fn to_text(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Write the resolved config as `run_config.toml` under `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("run_config.toml");
        fs::write(&path, self.to_text()?).with_context(|| format!("writing {}", path.display()))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
