//! Greedy and beam-search character decoding.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DecoderState, Model, ModelInputs, Session};

/// Output length cap in characters.
pub const DEFAULT_MAX_LEN: usize = 100;
pub const DEFAULT_BEAM_WIDTH: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamConfig {
    pub width: usize,
    pub max_len: usize,
    /// Rank by mean per-token log-probability instead of the total.
    pub length_normalize: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            width: DEFAULT_BEAM_WIDTH,
            max_len: DEFAULT_MAX_LEN,
            length_normalize: false,
        }
    }
}

/// A decoded token sequence. `tokens` starts after `[sos]` and ends with
/// `[eos]` when `finished`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub text: String,
    pub log_prob: f64,
    pub finished: bool,
    /// One row per output step, one column per encoder step.
    pub alpha_video: Vec<Vec<f64>>,
    pub alpha_audio: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
struct Hypothesis {
    tokens: Vec<usize>,
    log_prob: f64,
    /// Ready for the next step: `prev_token` is the last emitted token.
    state: DecoderState,
    finished: bool,
    alpha_video: Vec<Vec<f64>>,
    alpha_audio: Vec<Vec<f64>>,
}

impl Hypothesis {
    fn rank(&self, normalize: bool) -> f64 {
        if normalize && !self.tokens.is_empty() {
            self.log_prob / self.tokens.len() as f64
        } else {
            self.log_prob
        }
    }

    fn into_decoded(self, model: &Model) -> Decoded {
        Decoded {
            text: model.vocab.decode(&self.tokens),
            tokens: self.tokens,
            log_prob: self.log_prob,
            finished: self.finished,
            alpha_video: self.alpha_video,
            alpha_audio: self.alpha_audio,
        }
    }
}

/// Best hypothesis first, then the rest of the final beam in rank order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamResult {
    pub nbest: Vec<Decoded>,
}

impl BeamResult {
    pub fn best(&self) -> &Decoded {
        &self.nbest[0]
    }
}

/// Keeps the `width` best expansions per step. Finished hypotheses keep
/// their slots; ties go to the earlier candidate (lower beam slot, then lower
/// token id).
pub fn beam_search(model: &Model, inputs: &ModelInputs, cfg: &BeamConfig) -> Result<BeamResult> {
    if cfg.width < 1 {
        return Err(Error::InvalidInput("beam width must be at least 1".into()));
    }
    if cfg.max_len < 1 {
        return Err(Error::InvalidInput("max decode length must be at least 1".into()));
    }
    let vocab = &model.vocab;
    let eos = vocab.eos();
    let emittable: Vec<usize> = (0..vocab.len()).filter(|&t| vocab.is_emittable(t)).collect();
    let mut session = Session::new(model, inputs)?;
    let mut beam = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: session.initial_state(),
        finished: false,
        alpha_video: Vec::new(),
        alpha_audio: Vec::new(),
    }];
    for _ in 0..cfg.max_len {
        if beam.iter().all(|h| h.finished) {
            break;
        }
        let mut candidates = Vec::with_capacity(beam.len() * emittable.len());
        for h in beam {
            if h.finished {
                candidates.push(h);
                continue;
            }
            let out = session.step(&h.state)?;
            for &t in &emittable {
                let mut tokens = h.tokens.clone();
                tokens.push(t);
                let mut alpha_video = h.alpha_video.clone();
                alpha_video.push(out.alpha_video.clone());
                let mut alpha_audio = h.alpha_audio.clone();
                alpha_audio.push(out.alpha_audio.clone());
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: h.log_prob + out.log_probs[t],
                    state: out.state.with_token(t),
                    finished: t == eos,
                    alpha_video,
                    alpha_audio,
                });
            }
        }
        candidates.sort_by(|a, b| b.rank(cfg.length_normalize).total_cmp(&a.rank(cfg.length_normalize)));
        candidates.truncate(cfg.width);
        beam = candidates;
    }
    Ok(BeamResult {
        nbest: beam.into_iter().map(|h| h.into_decoded(model)).collect(),
    })
}

/// Argmax over emittable tokens at every step (lowest id on ties) until
/// `[eos]` or `max_len`.
pub fn greedy_decode(model: &Model, inputs: &ModelInputs, max_len: usize) -> Result<Decoded> {
    let vocab = &model.vocab;
    let mut session = Session::new(model, inputs)?;
    let mut state = session.initial_state();
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: state.clone(),
        finished: false,
        alpha_video: Vec::new(),
        alpha_audio: Vec::new(),
    };
    while h.tokens.len() < max_len {
        let out = session.step(&state)?;
        let mut best = None::<(usize, f64)>;
        for (t, &lp) in out.log_probs.iter().enumerate() {
            if vocab.is_emittable(t) && best.map_or(true, |(_, b)| lp > b) {
                best = Some((t, lp));
            }
        }
        let (t, lp) = best.expect("vocabulary has an emittable token");
        h.tokens.push(t);
        h.log_prob += lp;
        h.alpha_video.push(out.alpha_video);
        h.alpha_audio.push(out.alpha_audio);
        state = out.state.with_token(t);
        if t == vocab.eos() {
            h.finished = true;
            break;
        }
    }
    Ok(h.into_decoded(model))
}

/// Width 1 runs the greedy decoder; wider beams run [`beam_search`].
pub fn decode(model: &Model, inputs: &ModelInputs, cfg: &BeamConfig) -> Result<Decoded> {
    if cfg.width == 1 && !cfg.length_normalize {
        return greedy_decode(model, inputs, cfg.max_len);
    }
    Ok(beam_search(model, inputs, cfg)?.nbest.swap_remove(0))
}

/// Writes an attention matrix (rows = output steps) as an 8-bit PGM, each
/// value scaled by the matrix maximum.
pub fn write_attention_pgm(matrix: &[Vec<f64>], path: &Path) -> Result<()> {
    let rows = matrix.len();
    let cols = matrix.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 || matrix.iter().any(|r| r.len() != cols) {
        return Err(Error::InvalidInput("attention matrix must be nonempty and rectangular".into()));
    }
    let max = matrix.iter().flatten().copied().fold(0.0, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let pixels = matrix
        .iter()
        .flatten()
        .map(|&v| (v * scale).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img = image::GrayImage::from_raw(cols as u32, rows as u32, pixels).expect("buffer matches dimensions");
    img.save_with_format(path, image::ImageFormat::Pnm).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}
