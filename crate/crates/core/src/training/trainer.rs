use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::synth::derive_seed;
use crate::corpus::Utterance;
use crate::decoding::BeamConfig;
use crate::error::{Error, Result};
use crate::evaluation::{condition_inputs, evaluate, Condition};
use crate::features::{add_awgn_features, NoiseConfig, Snr, AUDIO_PER_VIDEO_FRAME};
use crate::model::{Checkpoint, LossOptions, Mode, Model, ModelInputs};
use crate::tensor::NdArray;

use super::config::TrainConfig;
use super::schedule::{
    curriculum_next, lr_schedule, sampling_probability, select_modality, CurriculumState, LrSchedule,
};
use super::sgd::sgd_update;

/// Corpora used by one run.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub train: &'a [Utterance],
    /// Drawn from whenever audio-only mode is selected; falls back to
    /// `train` with video removed when empty.
    pub audio_only: &'a [Utterance],
    pub val: &'a [Utterance],
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    pub curriculum_words: usize,
    pub sampling_prob: f64,
    pub grad_norm: f64,
    /// Tokens predicted correctly under teacher forcing, over the batch.
    pub token_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_cer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_wer: Option<f64>,
    /// Teacher-forced loss on the validation subset.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<IterationRecord>,
}

impl RunLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Number of audio-bearing examples trained at each SNR label.
pub type NoiseCounts = BTreeMap<String, usize>;

/// Resumable loop state, stored in checkpoint metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub iteration: usize,
    pub lr: LrSchedule,
    pub curriculum: CurriculumState,
    /// Losses since the last learning-rate event.
    pub lr_history: Vec<f64>,
    /// Losses since the last curriculum change.
    pub curriculum_history: Vec<f64>,
    pub iterations_at_full: usize,
    pub best_val_cer: Option<f64>,
    /// Validation loss of the best model; breaks ties in CER.
    #[serde(default)]
    pub best_val_loss: Option<f64>,
    pub best_iteration: usize,
    /// Iteration from which the stop window is measured.
    pub stop_clock: usize,
    pub noise_counts: NoiseCounts,
    pub mode_counts: BTreeMap<Mode, usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ValidationPatience,
    MaxIterations,
}

pub struct TrainOutcome {
    /// Parameters with the best validation CER (or the final ones when no
    /// validation ran).
    pub best: Model,
    pub last: Model,
    pub state: TrainState,
    pub log: RunLog,
    pub stop: StopReason,
}

pub struct Trainer<'a> {
    pub model: Model,
    pub config: TrainConfig,
    pub state: TrainState,
    data: TrainData<'a>,
    best: Option<Model>,
    log: RunLog,
}

/// Relative drop in validation loss that counts as progress when CER ties.
pub const VAL_LOSS_GAIN: f64 = 1e-3;

fn full_words(utts: &[Utterance]) -> usize {
    utts.iter().map(|u| u.words.len()).max().unwrap_or(1)
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model, config: TrainConfig, data: TrainData<'a>) -> Result<Self> {
        config.validate()?;
        if data.train.is_empty() {
            return Err(Error::InvalidInput("training corpus is empty".into()));
        }
        let state = TrainState {
            iteration: 0,
            lr: LrSchedule::new(config.learning_rate, config.lr_decay),
            curriculum: CurriculumState::new(&config.curriculum, full_words(data.train)),
            lr_history: Vec::new(),
            curriculum_history: Vec::new(),
            iterations_at_full: 0,
            best_val_cer: None,
            best_val_loss: None,
            best_iteration: 0,
            stop_clock: 0,
            noise_counts: NoiseCounts::new(),
            mode_counts: BTreeMap::new(),
        };
        Ok(Trainer {
            model,
            config,
            state,
            data,
            best: None,
            log: RunLog::default(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: Checkpoint, data: TrainData<'a>) -> Result<Self> {
        let meta = &ckpt.metadata;
        let config: TrainConfig = serde_json::from_value(
            meta.get("train_config")
                .cloned()
                .ok_or_else(|| Error::Config("checkpoint lacks train_config".into()))?,
        )?;
        let state: TrainState = serde_json::from_value(
            meta.get("train_state")
                .cloned()
                .ok_or_else(|| Error::Config("checkpoint lacks train_state".into()))?,
        )?;
        let mut t = Trainer::new(ckpt.model, config, data)?;
        t.state = state;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::new(
            self.model.clone(),
            serde_json::json!({
                "train_config": serde_json::to_value(&self.config)?,
                "train_state": serde_json::to_value(&self.state)?,
            }),
        ))
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    /// Draws one training example for iteration-local `rng`.
    fn example(&self, rng: &mut ChaCha8Rng) -> Result<(ModelInputs, String, Mode, Option<Snr>)> {
        let mode = select_modality(rng, &self.config.modes);
        let from_audio_only = mode == Mode::Audio && !self.data.audio_only.is_empty();
        let pool = if from_audio_only { self.data.audio_only } else { self.data.train };
        let utt = &pool[rng.gen_range(0..pool.len())];
        let words = self.state.curriculum.max_words;
        let cut;
        let utt = if words < utt.words.len() {
            let first = rng.gen_range(0..=utt.words.len() - words);
            cut = utt.sub_utterance(first, first + words - 1, AUDIO_PER_VIDEO_FRAME)?;
            &cut
        } else {
            utt
        };
        let mut snr = None;
        let audio = if mode.uses_audio() {
            let s = self.config.draw_snr(rng);
            snr = Some(s);
            match s {
                Snr::Clean => utt.audio.clone(),
                Snr::Db(_) => add_awgn_features(
                    &utt.audio,
                    &NoiseConfig {
                        snr: s,
                        seed: rng.gen(),
                    },
                )?,
            }
        } else {
            utt.audio.clone()
        };
        let video = if mode == Mode::Audio { None } else { utt.video.as_ref() };
        let inputs = ModelInputs::new(video, &audio, mode, &self.model.config)?;
        Ok((inputs, utt.transcript.clone(), mode, snr))
    }

    fn iteration_seed(&self, iteration: usize) -> u64 {
        derive_seed(self.config.seed, &format!("iteration-{iteration}"))
    }

    /// Mean loss and gradient over the batch of `iteration`, without updating.
    pub fn batch_loss(&self, iteration: usize) -> Result<(f64, BTreeMap<String, NdArray>, f64, Vec<(Mode, Option<Snr>)>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.iteration_seed(iteration));
        let sampling_prob = sampling_probability(
            &self.state.curriculum,
            self.state.iterations_at_full,
            &self.config.sampling,
        );
        let mut items = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let (inputs, transcript, mode, snr) = self.example(&mut rng)?;
            items.push((inputs, transcript, mode, snr, rng.gen::<u64>()));
        }
        let losses: Vec<_> = items
            .par_iter()
            .map(|(inputs, transcript, _, _, seed)| {
                let targets = crate::corpus::encode_transcript(transcript, &self.model.vocab)?;
                let out = self.model.loss(
                    inputs,
                    &targets,
                    &LossOptions {
                        sampling_prob,
                        label_smoothing: self.config.label_smoothing,
                        train: true,
                        seed: *seed,
                    },
                )?;
                let correct = out.argmax.iter().zip(&targets[1..]).filter(|(a, b)| a == b).count();
                Ok((out, correct))
            })
            .collect::<Result<_>>()?;
        let n = items.len() as f64;
        let mut grads: BTreeMap<String, NdArray> = BTreeMap::new();
        let mut total = 0.0;
        let (mut correct, mut steps) = (0usize, 0usize);
        for (out, c) in losses {
            total += out.loss;
            correct += c;
            steps += out.steps;
            for (name, g) in out.gradients {
                match grads.get_mut(&name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        grads.insert(name, g);
                    }
                }
            }
        }
        for g in grads.values_mut() {
            g.scale_assign(1.0 / n);
        }
        let tags = items.iter().map(|(_, _, m, s, _)| (*m, *s)).collect();
        Ok((total / n, grads, correct as f64 / steps.max(1) as f64, tags))
    }

    /// Greedy CER and WER plus teacher-forced loss on the validation subset.
    fn validate(&self) -> Result<Option<(f64, f64, f64)>> {
        if self.data.val.is_empty() {
            return Ok(None);
        }
        let n = self.config.validation_size.unwrap_or(self.data.val.len()).min(self.data.val.len());
        let beam = BeamConfig {
            width: 1,
            ..BeamConfig::default()
        };
        let cond = Condition {
            mode: self.config.validation_mode,
            snr: Snr::Clean,
        };
        let val = &self.data.val[..n];
        let r = evaluate(&self.model, val, &cond, &beam, self.config.seed)?;
        let losses: Vec<f64> = val
            .par_iter()
            .map(|u| {
                let inputs = condition_inputs(&self.model, u, &cond, self.config.seed)?;
                let targets = crate::corpus::encode_transcript(&u.transcript, &self.model.vocab)?;
                self.model.loss_value(&inputs, &targets, &LossOptions::default())
            })
            .collect::<Result<_>>()?;
        let loss = losses.iter().sum::<f64>() / n as f64;
        Ok(Some((r.scores.cer, r.scores.wer, loss)))
    }

    /// One SGD iteration plus scheduling; returns its log record.
    pub fn step(&mut self) -> Result<IterationRecord> {
        let it = self.state.iteration;
        let sampling_prob = sampling_probability(
            &self.state.curriculum,
            self.state.iterations_at_full,
            &self.config.sampling,
        );
        let (loss, grads, token_accuracy, tags) = self.batch_loss(it)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                detail: format!("batch loss {loss}"),
            });
        }
        let lr = self.state.lr.lr();
        let grad_norm = sgd_update(&mut self.model.params, &grads, lr, self.config.clip_norm).map_err(|e| {
            Error::Diverged {
                iteration: it,
                detail: e.to_string(),
            }
        })?;
        for (m, s) in tags {
            *self.state.mode_counts.entry(m).or_default() += 1;
            if let Some(s) = s {
                *self.state.noise_counts.entry(s.label()).or_default() += 1;
            }
        }
        self.state.iteration += 1;
        if self.state.curriculum.is_full() {
            self.state.iterations_at_full += 1;
        }
        let window = self.config.loss_window.max(1);
        self.state.lr_history.push(loss);
        self.state.curriculum_history.push(loss);
        let smooth = |h: &[f64]| -> Vec<f64> {
            h.windows(window.min(h.len()).max(1)).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect()
        };
        if lr_schedule(
            &mut self.state.lr,
            &smooth(&self.state.lr_history),
            self.config.lr_patience,
            self.config.plateau_delta,
        ) {
            self.state.lr_history.clear();
        }
        let next = curriculum_next(
            &self.state.curriculum,
            &smooth(&self.state.curriculum_history),
            &self.config.curriculum,
        );
        if next != self.state.curriculum {
            self.state.curriculum = next;
            self.state.curriculum_history.clear();
            self.state.lr_history.clear();
            self.state.stop_clock = self.state.iteration;
            self.state.best_val_cer = None;
            self.state.best_val_loss = None;
        }
        let mut record = IterationRecord {
            iteration: it,
            loss,
            lr,
            curriculum_words: self.state.curriculum.max_words,
            sampling_prob,
            grad_norm,
            token_accuracy,
            val_cer: None,
            val_wer: None,
            val_loss: None,
        };
        let interval = self.config.validation_interval;
        if interval > 0 && self.state.iteration % interval == 0 {
            if let Some((cer, wer, loss)) = self.validate()? {
                record.val_cer = Some(cer);
                record.val_wer = Some(wer);
                record.val_loss = Some(loss);
                let better = match (self.state.best_val_cer, self.state.best_val_loss) {
                    (Some(b), Some(l)) => cer < b || (cer == b && loss < l * (1.0 - VAL_LOSS_GAIN)),
                    (Some(b), None) => cer < b,
                    _ => true,
                };
                if better {
                    self.state.best_val_cer = Some(cer);
                    self.state.best_val_loss = Some(loss);
                    self.state.best_iteration = self.state.iteration;
                    self.state.stop_clock = self.state.iteration;
                    self.best = Some(self.model.clone());
                }
            }
        }
        self.log.records.push(record.clone());
        Ok(record)
    }

    fn should_stop(&self, validated: bool) -> Option<StopReason> {
        if validated && self.state.iteration - self.state.stop_clock >= self.config.stop_patience {
            return Some(StopReason::ValidationPatience);
        }
        if self.state.iteration >= self.config.max_iterations {
            return Some(StopReason::MaxIterations);
        }
        None
    }

    /// Runs until the stop rule fires, streaming records to `sink`.
    pub fn run(mut self, mut sink: Option<&mut dyn Write>) -> Result<TrainOutcome> {
        loop {
            let r = self.step()?;
            if let Some(w) = sink.as_deref_mut() {
                let line = serde_json::to_string(&r)?;
                writeln!(w, "{line}").map_err(|source| Error::Io {
                    path: "<run log>".into(),
                    source,
                })?;
            }
            if let Some(stop) = self.should_stop(r.val_cer.is_some()) {
                let best = self.best.take().unwrap_or_else(|| self.model.clone());
                return Ok(TrainOutcome {
                    best,
                    last: self.model,
                    state: self.state,
                    log: self.log,
                    stop,
                });
            }
        }
    }
}

/// Convenience wrapper: fresh trainer, full run.
pub fn train(model: Model, config: &TrainConfig, data: TrainData<'_>) -> Result<TrainOutcome> {
    Trainer::new(model, config.clone(), data)?.run(None)
}
