use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Snr;
use crate::model::Mode;

use super::schedule::{CurriculumConfig, SamplingRamp};

/// Share of audio-bearing examples trained at one SNR.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseMixEntry {
    pub snr: Snr,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    /// Iterations without training-loss improvement before a decay.
    pub lr_patience: usize,
    pub plateau_delta: f64,
    /// Moving-average width applied to batch losses before plateau checks.
    pub loss_window: usize,
    /// Iterations without validation improvement before stopping.
    pub stop_patience: usize,
    pub validation_interval: usize,
    /// Leading validation utterances used per round; all when absent.
    pub validation_size: Option<usize>,
    pub validation_mode: Mode,
    pub max_iterations: usize,
    pub clip_norm: Option<f64>,
    pub label_smoothing: f64,
    pub curriculum: CurriculumConfig,
    pub sampling: SamplingRamp,
    pub noise_mix: Vec<NoiseMixEntry>,
    /// Modes drawn uniformly per example.
    pub modes: Vec<Mode>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 0.1,
            lr_decay: 0.9,
            lr_patience: 200,
            plateau_delta: 1e-4,
            loss_window: 10,
            stop_patience: 500,
            validation_interval: 100,
            validation_size: None,
            validation_mode: Mode::Both,
            max_iterations: 20_000,
            clip_norm: Some(5.0),
            label_smoothing: 0.1,
            curriculum: CurriculumConfig::default(),
            sampling: SamplingRamp::default(),
            noise_mix: vec![NoiseMixEntry {
                snr: Snr::Clean,
                weight: 1.0,
            }],
            modes: Mode::ALL.to_vec(),
            seed: 1,
        }
    }
}

impl TrainConfig {
    /// Schedule lengths used by the full-scale runs.
    pub fn full_schedule() -> Self {
        TrainConfig {
            lr_patience: 2000,
            stop_patience: 5000,
            curriculum: CurriculumConfig {
                patience: 2000,
                ..CurriculumConfig::default()
            },
            max_iterations: 500_000,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} {v} outside (0, 1]")))
            }
        };
        unit("learning_rate", self.learning_rate)?;
        unit("lr_decay", self.lr_decay)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.lr_patience == 0 || self.curriculum.patience == 0 {
            return Err(Error::Config("plateau patience must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("at least one training mode is required".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("clip_norm {c} must be positive")));
            }
        }
        if self.noise_mix.is_empty() || self.noise_mix.iter().any(|e| !(e.weight >= 0.0 && e.weight.is_finite())) {
            return Err(Error::Config("noise_mix needs nonnegative finite weights".into()));
        }
        if self.noise_mix.iter().map(|e| e.weight).sum::<f64>() <= 0.0 {
            return Err(Error::Config("noise_mix weights sum to zero".into()));
        }
        Ok(())
    }

    /// SNR for one audio-bearing example, drawn by `noise_mix` weight.
    pub fn draw_snr<R: Rng + ?Sized>(&self, rng: &mut R) -> Snr {
        let total: f64 = self.noise_mix.iter().map(|e| e.weight).sum();
        let mut u = rng.gen::<f64>() * total;
        for e in &self.noise_mix {
            if u < e.weight {
                return e.snr;
            }
            u -= e.weight;
        }
        self.noise_mix.last().expect("validated nonempty").snr
    }
}
