//! Curriculum, scheduled-sampling ramp, learning-rate decay and modality draws.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::Mode;

/// Hard ceiling on the scheduled-sampling probability.
pub const MAX_SAMPLING_PROB: f64 = 0.25;

/// True when the best loss in the last `patience` entries fails to beat the
/// best loss before them by at least `rel_delta` (relative).
pub fn plateaued(history: &[f64], patience: usize, rel_delta: f64) -> bool {
    if patience == 0 || history.len() <= patience {
        return false;
    }
    let split = history.len() - patience;
    let before = history[..split].iter().copied().fold(f64::INFINITY, f64::min);
    let recent = history[split..].iter().copied().fold(f64::INFINITY, f64::min);
    recent > before - rel_delta * before.abs()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    pub enabled: bool,
    pub start_words: usize,
    /// Iterations without improvement before the length grows.
    pub patience: usize,
    pub rel_delta: f64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            enabled: true,
            start_words: 1,
            patience: 200,
            rel_delta: 1e-4,
        }
    }
}

/// Current maximum target length in words.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub max_words: usize,
    /// Length at which whole sentences are used.
    pub full_words: usize,
    /// Growth events so far.
    pub advances: usize,
}

impl CurriculumState {
    pub fn new(cfg: &CurriculumConfig, full_words: usize) -> Self {
        let full_words = full_words.max(1);
        CurriculumState {
            max_words: if cfg.enabled { cfg.start_words.clamp(1, full_words) } else { full_words },
            full_words,
            advances: 0,
        }
    }

    pub fn is_full(&self) -> bool {
        self.max_words >= self.full_words
    }
}

/// Grows the length by one word when `history` (losses since the last
/// change) has plateaued.
pub fn curriculum_next(state: &CurriculumState, history: &[f64], cfg: &CurriculumConfig) -> CurriculumState {
    if !cfg.enabled || state.is_full() || !plateaued(history, cfg.patience, cfg.rel_delta) {
        return *state;
    }
    CurriculumState {
        max_words: state.max_words + 1,
        advances: state.advances + 1,
        ..*state
    }
}

/// Step ramp for the scheduled-sampling probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingRamp {
    /// Final probability, clamped to [`MAX_SAMPLING_PROB`].
    pub max: f64,
    pub steps: usize,
    /// Iterations per ramp step once whole sentences are in use.
    pub interval: usize,
}

impl Default for SamplingRamp {
    fn default() -> Self {
        SamplingRamp {
            max: MAX_SAMPLING_PROB,
            steps: 5,
            interval: 200,
        }
    }
}

impl SamplingRamp {
    /// Probability after `step` ramp steps.
    pub fn at_step(&self, step: usize) -> f64 {
        if self.steps == 0 {
            return 0.0;
        }
        let max = self.max.clamp(0.0, MAX_SAMPLING_PROB);
        (max * step.min(self.steps) as f64 / self.steps as f64).min(MAX_SAMPLING_PROB)
    }
}

/// Zero before the full-sentence stage, then the ramp value for the number
/// of iterations spent at that stage.
pub fn sampling_probability(curriculum: &CurriculumState, iterations_at_full: usize, ramp: &SamplingRamp) -> f64 {
    if !curriculum.is_full() {
        return 0.0;
    }
    let step = if ramp.interval == 0 { ramp.steps } else { iterations_at_full / ramp.interval };
    ramp.at_step(step)
}

/// Learning rate as `initial · decay^events`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    pub events: u32,
}

impl LrSchedule {
    pub fn new(initial: f64, decay: f64) -> Self {
        LrSchedule {
            initial,
            decay,
            events: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.initial * self.decay.powi(self.events as i32)
    }
}

/// Applies one decay when `history` has plateaued; returns whether it fired.
pub fn lr_schedule(schedule: &mut LrSchedule, history: &[f64], patience: usize, rel_delta: f64) -> bool {
    if plateaued(history, patience, rel_delta) {
        schedule.events += 1;
        true
    } else {
        false
    }
}

/// Uniform draw over `modes`.
pub fn select_modality<R: Rng + ?Sized>(rng: &mut R, modes: &[Mode]) -> Mode {
    modes[rng.gen_range(0..modes.len())]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_series_plateaus() {
        let flat = vec![1.0; 11];
        assert!(plateaued(&flat, 10, 1e-4));
        let improving: Vec<f64> = (0..11).map(|i| 1.0 - 0.01 * i as f64).collect();
        assert!(!plateaued(&improving, 10, 1e-4));
        assert!(!plateaued(&flat[..10], 10, 1e-4));
    }

    #[test]
    fn tiny_improvement_below_delta_still_plateaus() {
        let mut h = vec![1.0; 5];
        h.extend([0.99999; 5]);
        assert!(plateaued(&h, 5, 1e-4));
        assert!(!plateaued(&h, 5, 1e-6));
    }

    #[test]
    fn ramp_arithmetic() {
        let r = SamplingRamp {
            max: 0.25,
            steps: 5,
            interval: 100,
        };
        assert!((r.at_step(3) - 0.15).abs() < 1e-15);
        assert_eq!(r.at_step(50), 0.25);
        let greedy = SamplingRamp { max: 0.9, ..r };
        assert_eq!(greedy.at_step(5), MAX_SAMPLING_PROB);
    }

    #[test]
    fn lr_after_events() {
        let mut s = LrSchedule::new(0.1, 0.9);
        let flat = vec![2.0; 4];
        assert!(lr_schedule(&mut s, &flat, 3, 1e-4));
        assert_eq!(s.lr(), 0.1 * 0.9);
    }
}
