use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, DatasetConfig};
use crate::decoding::BeamConfig;
use crate::error::{Error, Result};
use crate::features::Snr;
use crate::model::{Mode, ModelConfig};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub runs_dir: PathBuf,
    /// Training mode: was, las or wlas.
    pub mode: String,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 1,
            data_dir: PathBuf::from("data"),
            runs_dir: PathBuf::from("runs"),
            mode: "wlas".into(),
        }
    }
}

/// A named preset, optionally replaced wholesale by an explicit geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: String,
    pub custom: Option<ModelConfig>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: "tiny".into(),
            custom: None,
        }
    }
}

impl ModelSection {
    /// Geometry for `ds`: frame size and vocabulary come from the dataset.
    pub fn resolve(&self, ds: &Dataset) -> Result<ModelConfig> {
        let (h, w) = (ds.config.synth.height, ds.config.synth.width);
        let cfg = match &self.custom {
            Some(c) => c.clone(),
            None => ModelConfig::preset(&self.preset, ds.vocab.len(), h, w)?,
        };
        if cfg.input_height != h || cfg.input_width != w || cfg.vocab_size != ds.vocab.len() {
            return Err(Error::Config(format!(
                "model expects {}x{} frames and {} tokens; dataset has {h}x{w} and {}",
                cfg.input_height,
                cfg.input_width,
                cfg.vocab_size,
                ds.vocab.len()
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub modes: Vec<Mode>,
    pub snrs: Vec<Snr>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            modes: Mode::ALL.to_vec(),
            snrs: vec![Snr::Clean, Snr::Db(10.0), Snr::Db(0.0)],
        }
    }
}

/// The complete declarative configuration of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub dataset: DatasetConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub decode: BeamConfig,
    pub evaluate: EvalSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(d) => Error::Config(format!("{}: {d}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        if self.decode.width == 0 || self.decode.max_len == 0 {
            return Err(Error::Config("decode width and max_len must be positive".into()));
        }
        if self.model.custom.is_none() && !["full", "desk", "tiny"].contains(&self.model.preset.as_str()) {
            return Err(Error::Config(format!("unknown model preset '{}'", self.model.preset)));
        }
        match self.run.mode.to_ascii_lowercase().as_str() {
            "was" | "las" | "wlas" | "audio" | "lips" | "both" => {}
            other => return Err(Error::Config(format!("unknown training mode '{other}' (was, las, wlas)"))),
        }
        if self.evaluate.modes.is_empty() || self.evaluate.snrs.is_empty() {
            return Err(Error::Config("evaluate needs at least one mode and one SNR".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[run]\nsed = 3\n").is_err());
        assert!(RunConfig::from_toml("[training]\n").is_err());
        assert!(RunConfig::from_toml("[train]\nbatch_size = 8\n").is_ok());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nlearning_rate = 2.0\n").is_err());
        assert!(RunConfig::from_toml("[run]\nmode = \"video\"\n").is_err());
        assert!(RunConfig::from_toml("[dataset]\ntrain = 64000\n").is_err());
    }
}
