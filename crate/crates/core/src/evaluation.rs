//! Decoding a split under a (mode, SNR) condition and scoring it.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::synth::derive_seed;
use crate::corpus::{CharVocabulary, Utterance};
use crate::decoding::{decode, BeamConfig, Decoded};
use crate::error::{Error, Result};
use crate::features::{add_awgn_features, NoiseConfig, Snr, AUDIO_FRAME_RATE_HZ};
use crate::metrics::{score_corpus, CorpusScores};
use crate::model::{Mode, Model, ModelInputs};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub mode: Mode,
    pub snr: Snr,
}

/// Encoder inputs for `utt` under `cond`, with feature noise seeded by the
/// utterance id so every run sees the same corruption.
pub fn condition_inputs(model: &Model, utt: &Utterance, cond: &Condition, seed: u64) -> Result<ModelInputs> {
    let audio = match cond.snr {
        Snr::Db(_) if cond.mode.uses_audio() => {
            let noise = NoiseConfig {
                snr: cond.snr,
                seed: derive_seed(seed, &format!("{}/{}", utt.id, cond.snr.label())),
            };
            add_awgn_features(&utt.audio, &noise)?
        }
        _ => utt.audio.clone(),
    };
    ModelInputs::new(utt.video.as_ref(), &audio, cond.mode, &model.config)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceDecode {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub log_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: Condition,
    pub beam_width: usize,
    pub scores: CorpusScores,
    pub decodes: Vec<UtteranceDecode>,
    pub decode_seconds: f64,
    /// Duration of the decoded audio at the feature frame rate.
    pub input_seconds: f64,
}

pub fn check_vocabulary(model: &Model, vocab: &CharVocabulary) -> Result<()> {
    if model.vocab != *vocab {
        return Err(Error::Config(format!(
            "checkpoint vocabulary ({} tokens) differs from the dataset vocabulary ({} tokens)",
            model.vocab.len(),
            vocab.len()
        )));
    }
    Ok(())
}

/// Decodes every utterance (in parallel, order preserved).
pub fn decode_all(
    model: &Model,
    utts: &[Utterance],
    cond: &Condition,
    beam: &BeamConfig,
    seed: u64,
) -> Result<Vec<Decoded>> {
    utts.par_iter()
        .map(|u| decode(model, &condition_inputs(model, u, cond, seed)?, beam))
        .collect()
}

pub fn evaluate(
    model: &Model,
    utts: &[Utterance],
    cond: &Condition,
    beam: &BeamConfig,
    seed: u64,
) -> Result<ConditionReport> {
    let start = Instant::now();
    let decoded = decode_all(model, utts, cond, beam, seed)?;
    let decode_seconds = start.elapsed().as_secs_f64();
    let scores = score_corpus(utts.iter().zip(&decoded).map(|(u, d)| (u.transcript.as_str(), d.text.as_str())))?;
    Ok(ConditionReport {
        condition: *cond,
        beam_width: beam.width,
        scores,
        decodes: utts
            .iter()
            .zip(decoded)
            .map(|(u, d)| UtteranceDecode {
                id: u.id.clone(),
                reference: u.transcript.clone(),
                hypothesis: d.text,
                log_prob: d.log_prob,
            })
            .collect(),
        decode_seconds,
        input_seconds: utts.iter().map(|u| u.audio.len() as f64).sum::<f64>() / AUDIO_FRAME_RATE_HZ,
    })
}

/// Rows per mode, a CER/WER/BLEU column group per SNR.
pub fn report_table(reports: &[ConditionReport]) -> String {
    let mut snrs: Vec<Snr> = Vec::new();
    let mut modes: Vec<Mode> = Vec::new();
    for r in reports {
        if !snrs.contains(&r.condition.snr) {
            snrs.push(r.condition.snr);
        }
        if !modes.contains(&r.condition.mode) {
            modes.push(r.condition.mode);
        }
    }
    let mut out = String::new();
    let _ = write!(out, "{:<16}", "");
    for s in &snrs {
        let _ = write!(out, "| {:^23} ", s.label());
    }
    out.push('\n');
    let _ = write!(out, "{:<16}", "mode");
    for _ in &snrs {
        let _ = write!(out, "| {:>7}{:>8}{:>8} ", "CER", "WER", "BLEU");
    }
    out.push('\n');
    for m in &modes {
        let _ = write!(out, "{:<16}", format!("{} ({})", m, m.variant()));
        for s in &snrs {
            match reports.iter().find(|r| r.condition.mode == *m && r.condition.snr == *s) {
                Some(r) => {
                    let _ = write!(
                        out,
                        "| {:>6.1}%{:>7.1}%{:>8.3} ",
                        100.0 * r.scores.cer,
                        100.0 * r.scores.wer,
                        r.scores.bleu
                    );
                }
                None => {
                    let _ = write!(out, "| {:>23} ", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}
