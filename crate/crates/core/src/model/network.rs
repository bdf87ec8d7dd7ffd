//! Watch, Listen and Spell recorded on an autodiff [`Tape`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_in_place, Tape, Var};
use crate::corpus::{encode_transcript, CharVocabulary, Utterance, VideoClip};
use crate::error::{Error, Result};
use crate::features::{window_frames, AudioFeatures, VideoWindows, AUDIO_PER_VIDEO_FRAME, MFCC_DIM, WINDOW_FRAMES};
use crate::tensor::NdArray;

use super::config::ModelConfig;
use super::params::ParamStore;

/// Which input streams reach the encoders; the other is replaced by zeros.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Audio,
    Lips,
    Both,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Audio, Mode::Lips, Mode::Both];

    pub fn uses_video(self) -> bool {
        self != Mode::Audio
    }

    pub fn uses_audio(self) -> bool {
        self != Mode::Lips
    }

    /// Name of the network variant evaluated in this mode.
    pub fn variant(self) -> &'static str {
        match self {
            Mode::Audio => "LAS",
            Mode::Lips => "WAS",
            Mode::Both => "WLAS",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Audio => "audio",
            Mode::Lips => "lips",
            Mode::Both => "both",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "audio" | "las" => Ok(Mode::Audio),
            "lips" | "was" => Ok(Mode::Lips),
            "both" | "wlas" => Ok(Mode::Both),
            other => Err(Error::Config(format!("unknown mode '{other}' (audio|lips|both, las|was|wlas)"))),
        }
    }
}

/// Encoder-ready inputs with the disabled modality already zeroed.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInputs {
    pub video: VideoWindows,
    pub audio: AudioFeatures,
}

impl ModelInputs {
    /// `video` may be absent (audio-only data); the window count is then
    /// implied by the audio length.
    pub fn new(video: Option<&VideoClip>, audio: &AudioFeatures, mode: Mode, cfg: &ModelConfig) -> Result<Self> {
        let raw_frames = match video {
            Some(v) => v.frames,
            None => audio.len() / AUDIO_PER_VIDEO_FRAME,
        };
        let windows = raw_frames.saturating_sub(WINDOW_FRAMES - 1).max(1);
        let video = match video {
            Some(v) if mode.uses_video() => {
                if v.height != cfg.input_height || v.width != cfg.input_width {
                    return Err(Error::shape(
                        "video input",
                        format!(
                            "frames are {}x{}, model expects {}x{}",
                            v.height, v.width, cfg.input_height, cfg.input_width
                        ),
                    ));
                }
                window_frames(&v.to_raw())?
            }
            _ => VideoWindows::zeros(windows, cfg.input_height, cfg.input_width),
        };
        let audio = if mode.uses_audio() {
            audio.clone()
        } else {
            AudioFeatures::zeros(audio.len())
        };
        Ok(ModelInputs { video, audio })
    }

    pub fn from_utterance(utt: &Utterance, mode: Mode, cfg: &ModelConfig) -> Result<Self> {
        Self::new(utt.video.as_ref(), &utt.audio, mode, cfg)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LstmVars {
    wx: Var,
    wh: Var,
    b: Var,
    peep: Option<Var>,
    hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnVars {
    w_dec: Var,
    v_enc: Var,
    w: Var,
    b: Var,
}

#[derive(Clone, Debug)]
struct Bound {
    conv: Vec<(Var, Var)>,
    fc: (Var, Var),
    watch: Vec<LstmVars>,
    listen: Vec<LstmVars>,
    spell: Vec<LstmVars>,
    embed: Var,
    attn_video: AttnVars,
    attn_audio: AttnVars,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// Tape handles for one encoder's result.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    /// Final hidden state of the top layer, `[1, H]`.
    pub state: Var,
    /// Top-layer outputs in original time order, `[T, H]`.
    pub outputs: Var,
}

/// Both encoders plus the attention projections `V·o_i + b`, which do not
/// depend on the decoder and are computed once per utterance.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub video: EncoderVars,
    pub audio: EncoderVars,
    proj_video: Var,
    proj_audio: Var,
}

/// Decoder recurrent state. Handles refer to the [`Graph`] that made them.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub hidden: Vec<Var>,
    pub cell: Vec<Var>,
    pub context_video: Var,
    pub context_audio: Var,
    /// `y_{k-1}`, the token fed at the next step.
    pub prev_token: usize,
}

impl DecoderState {
    pub fn with_token(&self, token: usize) -> Self {
        DecoderState {
            prev_token: token,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepVars {
    pub logits: Var,
    pub state: DecoderState,
    pub alpha_video: Var,
    pub alpha_audio: Var,
}

/// One forward recording: parameters bound as tape leaves plus layer helpers.
pub struct Graph<'m> {
    pub tape: Tape,
    cfg: &'m ModelConfig,
    b: Bound,
    dropout: f64,
    rng: ChaCha8Rng,
}

fn bind_lstm(tape: &Tape, prefix: &str, layers: usize, hidden: usize, peephole: bool) -> Result<Vec<LstmVars>> {
    (0..layers)
        .map(|l| {
            let get = |s: &str| {
                tape.lookup(&format!("{prefix}.lstm{l}.{s}"))
                    .ok_or_else(|| Error::Config(format!("missing parameter '{prefix}.lstm{l}.{s}'")))
            };
            Ok(LstmVars {
                wx: get("wx")?,
                wh: get("wh")?,
                b: get("b")?,
                peep: if peephole { Some(get("peep")?) } else { None },
                hidden,
            })
        })
        .collect()
}

impl<'m> Graph<'m> {
    /// Binds every parameter. `dropout` is the inter-layer rate (0 at eval).
    pub fn new(cfg: &'m ModelConfig, params: &ParamStore, dropout: f64, seed: u64) -> Result<Self> {
        let mut tape = Tape::new();
        for (name, value) in params.iter() {
            tape.param(name, value.clone())?;
        }
        let get = |n: &str| {
            tape.lookup(n)
                .ok_or_else(|| Error::Config(format!("missing parameter '{n}'")))
        };
        let attn = |name: &str| -> Result<AttnVars> {
            Ok(AttnVars {
                w_dec: get(&format!("attend.{name}.w_dec"))?,
                v_enc: get(&format!("attend.{name}.v_enc"))?,
                w: get(&format!("attend.{name}.w"))?,
                b: get(&format!("attend.{name}.b"))?,
            })
        };
        let b = Bound {
            conv: (0..cfg.conv.len())
                .map(|i| Ok((get(&format!("watch.conv{i}.w"))?, get(&format!("watch.conv{i}.b"))?)))
                .collect::<Result<_>>()?,
            fc: (get("watch.fc.w")?, get("watch.fc.b")?),
            watch: bind_lstm(&tape, "watch", cfg.watch_layers, cfg.watch_hidden, cfg.peephole)?,
            listen: bind_lstm(&tape, "listen", cfg.listen_layers, cfg.listen_hidden, cfg.peephole)?,
            spell: bind_lstm(&tape, "spell", cfg.spell_layers, cfg.spell_hidden(), cfg.peephole)?,
            embed: get("spell.embed")?,
            attn_video: attn("video")?,
            attn_audio: attn("audio")?,
            w1: get("output.w1")?,
            b1: get("output.b1")?,
            w2: get("output.w2")?,
            b2: get("output.b2")?,
        };
        Ok(Graph {
            tape,
            cfg,
            b,
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn value(&self, v: Var) -> &NdArray {
        self.tape.value(v)
    }

    fn zeros(&mut self, cols: usize) -> Var {
        self.tape.constant(NdArray::zeros(&[1, cols]))
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        if self.dropout <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.dropout;
        let shape = self.tape.value(x).shape().to_vec();
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.tape.constant(NdArray::new(shape, mask)?);
        self.tape.mul(x, m)
    }

    /// One LSTM step from a precomputed input projection row `xw = x·W_x + b`.
    fn lstm_cell(&mut self, xw: Var, h: Var, c: Var, l: &LstmVars) -> Result<(Var, Var)> {
        let hw = self.tape.matmul(h, l.wh)?;
        let z = self.tape.add(xw, hw)?;
        let hc = self.tape.lstm_cell(z, c, l.peep)?;
        let h = self.tape.slice_cols(hc, 0, l.hidden)?;
        let c = self.tape.slice_cols(hc, l.hidden, 2 * l.hidden)?;
        Ok((h, c))
    }

    /// Stacked LSTM over `x: [T, in]`, consuming time in reverse.
    fn reverse_stack(&mut self, x: Var, layers: &[LstmVars]) -> Result<EncoderVars> {
        let steps = self.tape.value(x).rows();
        let mut input = x;
        let mut state = None;
        for (li, l) in layers.iter().enumerate() {
            if li > 0 {
                input = self.dropout(input)?;
            }
            let xw = self.tape.matmul(input, l.wx)?;
            let xw = self.tape.add_row(xw, l.b)?;
            let mut h = self.zeros(l.hidden);
            let mut c = self.zeros(l.hidden);
            let mut outs = vec![h; steps];
            for t in (0..steps).rev() {
                let row = self.tape.row(xw, t)?;
                (h, c) = self.lstm_cell(row, h, c, l)?;
                outs[t] = h;
            }
            input = self.tape.concat_rows(&outs)?;
            state = Some(h);
        }
        Ok(EncoderVars {
            state: state.ok_or_else(|| Error::Config("encoder has no layers".into()))?,
            outputs: input,
        })
    }

    /// The conv stack on one `[5, H, W]` window, returning `[1, visual_dim]`.
    /// Conv stack and projection for one window; pixels are centred on the
    /// window mean first, so an all-zero window stays zero.
    pub fn conv_window(&mut self, window: NdArray) -> Result<Var> {
        let mean = window.data().iter().sum::<f64>() / window.len().max(1) as f64;
        let mut x = self.tape.constant(window.map(|v| v - mean));
        for (i, spec) in self.cfg.conv.clone().iter().enumerate() {
            let (w, b) = self.b.conv[i];
            x = self.tape.conv2d(x, w, b, spec.stride, spec.pad)?;
            x = self.tape.relu(x)?;
            if let Some(p) = spec.pool {
                x = self.tape.max_pool2d(x, p.size, p.stride)?;
            }
        }
        let flat = self.tape.value(x).len();
        let x = self.tape.reshape(x, &[1, flat])?;
        let (fw, fb) = self.b.fc;
        let y = self.tape.matmul(x, fw)?;
        let y = self.tape.add(y, fb)?;
        self.tape.relu(y)
    }

    pub fn watch(&mut self, video: &VideoWindows) -> Result<EncoderVars> {
        if video.height != self.cfg.input_height || video.width != self.cfg.input_width {
            return Err(Error::shape(
                "watch input",
                format!(
                    "windows are {}x{}, model expects {}x{}",
                    video.height, video.width, self.cfg.input_height, self.cfg.input_width
                ),
            ));
        }
        let feats = if video.is_all_zero() {
            let f = self.conv_window(video.window(0))?;
            vec![f; video.len()]
        } else {
            (0..video.len())
                .map(|i| self.conv_window(video.window(i)))
                .collect::<Result<Vec<_>>>()?
        };
        let x = self.tape.concat_rows(&feats)?;
        let layers = self.b.watch.clone();
        self.reverse_stack(x, &layers)
    }

    pub fn listen(&mut self, audio: &AudioFeatures) -> Result<EncoderVars> {
        let x = self.tape.constant(audio.frames().clone());
        let layers = self.b.listen.clone();
        self.reverse_stack(x, &layers)
    }

    /// `V·o_i + b` for every encoder step, `[T, A]`.
    fn attention_projection(&mut self, outputs: Var, a: &AttnVars) -> Result<Var> {
        let p = self.tape.matmul(outputs, a.v_enc)?;
        self.tape.add_row(p, a.b)
    }

    pub fn encode(&mut self, inputs: &ModelInputs) -> Result<Encoded> {
        let video = self.watch(&inputs.video)?;
        let audio = self.listen(&inputs.audio)?;
        let (av, aa) = (self.b.attn_video, self.b.attn_audio);
        let proj_video = self.attention_projection(video.outputs, &av)?;
        let proj_audio = self.attention_projection(audio.outputs, &aa)?;
        Ok(Encoded {
            video,
            audio,
            proj_video,
            proj_audio,
        })
    }

    /// `h^d_0 = concat(s^a, s^v)` on the first layer; everything else zero.
    pub fn initial_state(&mut self, enc: &Encoded, sos: usize) -> Result<DecoderState> {
        let hd = self.cfg.spell_hidden();
        let mut hidden = Vec::with_capacity(self.cfg.spell_layers);
        let mut cell = Vec::with_capacity(self.cfg.spell_layers);
        for l in 0..self.cfg.spell_layers {
            hidden.push(if l == 0 {
                self.tape.concat(&[enc.audio.state, enc.video.state])?
            } else {
                self.zeros(hd)
            });
            cell.push(self.zeros(hd));
        }
        Ok(DecoderState {
            hidden,
            cell,
            context_video: self.zeros(self.cfg.watch_hidden),
            context_audio: self.zeros(self.cfg.listen_hidden),
            prev_token: sos,
        })
    }

    /// One decoder step: LSTM stack, both attentions, then the output MLP.
    pub fn spell_step(&mut self, enc: &Encoded, state: &DecoderState) -> Result<StepVars> {
        if state.prev_token >= self.cfg.vocab_size {
            return Err(Error::InvalidInput(format!(
                "token {} outside vocabulary of {}",
                state.prev_token, self.cfg.vocab_size
            )));
        }
        let emb = self.tape.row(self.b.embed, state.prev_token)?;
        let mut x = self.tape.concat(&[emb, state.context_video, state.context_audio])?;
        let layers = self.b.spell.clone();
        let mut hidden = Vec::with_capacity(layers.len());
        let mut cell = Vec::with_capacity(layers.len());
        for (li, l) in layers.iter().enumerate() {
            if li > 0 {
                x = self.dropout(x)?;
            }
            let xw = self.tape.matmul(x, l.wx)?;
            let xw = self.tape.add(xw, l.b)?;
            let (h, c) = self.lstm_cell(xw, state.hidden[li], state.cell[li], l)?;
            hidden.push(h);
            cell.push(c);
            x = h;
        }
        let (av, aa) = (self.b.attn_video, self.b.attn_audio);
        let (alpha_video, cv) = attend_vars(&mut self.tape, x, enc.proj_video, enc.video.outputs, &av)?;
        let (alpha_audio, ca) = attend_vars(&mut self.tape, x, enc.proj_audio, enc.audio.outputs, &aa)?;
        let m = self.tape.concat(&[x, cv, ca])?;
        let m = self.tape.matmul(m, self.b.w1)?;
        let m = self.tape.add(m, self.b.b1)?;
        let m = self.tape.tanh(m)?;
        let logits = self.tape.matmul(m, self.b.w2)?;
        let logits = self.tape.add(logits, self.b.b2)?;
        Ok(StepVars {
            logits,
            state: DecoderState {
                hidden,
                cell,
                context_video: cv,
                context_audio: ca,
                prev_token: state.prev_token,
            },
            alpha_video,
            alpha_audio,
        })
    }
}

/// `α = softmax_i(wᵀ tanh(W s + V o_i + b))`, context `= α · O`.
fn attend_vars(tape: &mut Tape, query: Var, proj: Var, outputs: Var, a: &AttnVars) -> Result<(Var, Var)> {
    let q = tape.matmul(query, a.w_dec)?;
    let pre = tape.add_row(proj, q)?;
    let t = tape.tanh(pre)?;
    let e = tape.matmul(t, a.w)?;
    let n = tape.value(e).rows();
    let e = tape.reshape(e, &[1, n])?;
    let alpha = tape.softmax(e)?;
    let ctx = tape.matmul(alpha, outputs)?;
    Ok((alpha, ctx))
}

/// Weights of one additive attention head: `W` is `[S, A]`, `V` is
/// `[D, A]`, `w` is `[A, 1]` and `b` is `[1, A]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_dec: NdArray,
    pub v_enc: NdArray,
    pub w: NdArray,
    pub b: NdArray,
}

/// Value-level attention of one decoder state `[1, S]` over encoder
/// outputs `[T, D]`. Returns the weights and the context vector.
pub fn attend(query: &NdArray, outputs: &NdArray, params: &AttentionParams) -> Result<(Vec<f64>, Vec<f64>)> {
    if outputs.shape().len() != 2 || outputs.rows() == 0 {
        return Err(Error::InvalidInput("attention needs at least one encoder output".into()));
    }
    let mut tape = Tape::new();
    let q = tape.constant(query.clone());
    let o = tape.constant(outputs.clone());
    let a = AttnVars {
        w_dec: tape.constant(params.w_dec.clone()),
        v_enc: tape.constant(params.v_enc.clone()),
        w: tape.constant(params.w.clone()),
        b: tape.constant(params.b.clone()),
    };
    let p = tape.matmul(o, a.v_enc)?;
    let proj = tape.add_row(p, a.b)?;
    let (alpha, ctx) = attend_vars(&mut tape, q, proj, o, &a)?;
    Ok((tape.value(alpha).data().to_vec(), tape.value(ctx).data().to_vec()))
}

/// Log-softmax of a logit row, computed with max subtraction.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}

/// Options for [`Model::loss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    /// Probability of feeding a token sampled from the previous prediction
    /// instead of the ground truth.
    pub sampling_prob: f64,
    pub label_smoothing: f64,
    /// Enables dropout.
    pub train: bool,
    pub seed: u64,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            sampling_prob: 0.0,
            label_smoothing: 0.0,
            train: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub gradients: BTreeMap<String, NdArray>,
    /// Output steps, equal to transcript length plus one for `[eos]`.
    pub steps: usize,
    /// Per-step argmax, for token accuracy.
    pub argmax: Vec<usize>,
}

/// Value-level view of one encoder result.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub state: NdArray,
    pub outputs: NdArray,
}

/// Parameters, configuration and vocabulary of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: CharVocabulary,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: CharVocabulary, seed: u64) -> Result<Self> {
        if config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "model vocab_size {} but vocabulary has {} tokens",
                config.vocab_size,
                vocab.len()
            )));
        }
        let params = ParamStore::init(&config, seed)?;
        Ok(Model { config, vocab, params })
    }

    pub fn from_parts(config: ModelConfig, vocab: CharVocabulary, params: ParamStore) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::Config("vocabulary size differs from the model configuration".into()));
        }
        params.check_against(&config)?;
        Ok(Model { config, vocab, params })
    }

    pub fn graph(&self, dropout: f64, seed: u64) -> Result<Graph<'_>> {
        Graph::new(&self.config, &self.params, dropout, seed)
    }

    pub fn inputs(&self, utt: &Utterance, mode: Mode) -> Result<ModelInputs> {
        ModelInputs::from_utterance(utt, mode, &self.config)
    }

    /// `f^v = CNN(x^v)` for a single `[5, H, W]` window.
    pub fn conv_encode(&self, window: &NdArray) -> Result<NdArray> {
        let expect = [WINDOW_FRAMES, self.config.input_height, self.config.input_width];
        if window.shape() != expect {
            return Err(Error::shape("conv input", format!("expected {expect:?}, got {:?}", window.shape())));
        }
        let mut g = self.graph(0.0, 0)?;
        let v = g.conv_window(window.clone())?;
        Ok(g.value(v).clone())
    }

    pub fn watch_encode(&self, video: &VideoWindows) -> Result<EncoderOutput> {
        let mut g = self.graph(0.0, 0)?;
        let e = g.watch(video)?;
        Ok(EncoderOutput {
            state: g.value(e.state).clone(),
            outputs: g.value(e.outputs).clone(),
        })
    }

    pub fn listen_encode(&self, audio: &AudioFeatures) -> Result<EncoderOutput> {
        let mut g = self.graph(0.0, 0)?;
        let e = g.listen(audio)?;
        Ok(EncoderOutput {
            state: g.value(e.state).clone(),
            outputs: g.value(e.outputs).clone(),
        })
    }

    /// Smoothed cross-entropy averaged over output steps, and its gradient.
    ///
    /// `targets` is the full `[sos] … [eos]` id sequence.
    pub fn loss(&self, inputs: &ModelInputs, targets: &[usize], opts: &LossOptions) -> Result<LossOutput> {
        self.run_loss(inputs, targets, opts, true)
    }

    /// The value of [`Model::loss`] without the backward pass.
    pub fn loss_value(&self, inputs: &ModelInputs, targets: &[usize], opts: &LossOptions) -> Result<f64> {
        Ok(self.run_loss(inputs, targets, opts, false)?.loss)
    }

    fn run_loss(&self, inputs: &ModelInputs, targets: &[usize], opts: &LossOptions, backward: bool) -> Result<LossOutput> {
        if targets.len() < 2 || targets[0] != self.vocab.sos() {
            return Err(Error::InvalidInput("targets must start with [sos] and hold at least one output".into()));
        }
        let v = self.config.vocab_size;
        let eps = opts.label_smoothing;
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::InvalidInput(format!("label smoothing {eps} outside [0, 1)")));
        }
        let dropout = if opts.train { self.config.dropout } else { 0.0 };
        let mut g = self.graph(dropout, opts.seed)?;
        let mut sampler = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5EED_5A3F);
        let enc = g.encode(inputs)?;
        let mut state = g.initial_state(&enc, self.vocab.sos())?;
        let steps = targets.len() - 1;
        let mut logits = Vec::with_capacity(steps);
        let mut q = Vec::with_capacity(steps * v);
        let mut argmax = Vec::with_capacity(steps);
        for k in 0..steps {
            let mut token = targets[k];
            if k > 0 && opts.sampling_prob > 0.0 && sampler.gen::<f64>() < opts.sampling_prob {
                let mut p = g.value(logits[k - 1]).data().to_vec();
                softmax_in_place(&mut p);
                token = sample_index(&p, sampler.gen::<f64>());
            }
            let out = g.spell_step(&enc, &state.with_token(token))?;
            argmax.push(g.value(out.logits).argmax());
            logits.push(out.logits);
            state = out.state;
            let y = targets[k + 1];
            q.extend((0..v).map(|i| eps / v as f64 + if i == y { 1.0 - eps } else { 0.0 }));
        }
        let all = g.tape.concat_rows(&logits)?;
        let lp = g.tape.log_softmax(all)?;
        let qv = g.tape.constant(NdArray::new(vec![steps, v], q)?);
        let weighted = g.tape.mul(lp, qv)?;
        let total = g.tape.sum(weighted)?;
        let loss = g.tape.scale(total, -1.0 / steps as f64)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite("sequence loss".into()));
        }
        let gradients = if backward {
            g.tape.backward_scalar(loss)?.params()
        } else {
            BTreeMap::new()
        };
        Ok(LossOutput {
            loss: value,
            gradients,
            steps,
            argmax,
        })
    }

    /// Transcript-level loss: zeroes the disabled modality and encodes the
    /// transcript before calling [`Model::loss`].
    pub fn sequence_loss(&self, utt: &Utterance, mode: Mode, opts: &LossOptions) -> Result<LossOutput> {
        let targets = encode_transcript(&utt.transcript, &self.vocab)?;
        let inputs = self.inputs(utt, mode)?;
        self.loss(&inputs, &targets, opts)
    }

    /// Teacher-forced `log P(y_k | y_<k)` for every token of `tokens`
    /// (which excludes the leading `[sos]`).
    pub fn score(&self, inputs: &ModelInputs, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut s = Session::new(self, inputs)?;
        let mut state = s.initial_state();
        let mut out = Vec::with_capacity(tokens.len());
        for &t in tokens {
            let step = s.step(&state)?;
            out.push(step.log_probs[t]);
            state = step.state.with_token(t);
        }
        Ok(out)
    }
}

/// Smallest index whose cumulative probability exceeds `u`.
pub fn sample_index(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Output of one inference step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub log_probs: Vec<f64>,
    pub state: DecoderState,
    pub alpha_video: Vec<f64>,
    pub alpha_audio: Vec<f64>,
}

/// Inference over one utterance: encoders run once, then any number of
/// decoder steps from any states created by this session.
pub struct Session<'m> {
    graph: Graph<'m>,
    enc: Encoded,
    sos: usize,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model, inputs: &ModelInputs) -> Result<Self> {
        let mut graph = model.graph(0.0, 0)?;
        let enc = graph.encode(inputs)?;
        Ok(Session {
            graph,
            enc,
            sos: model.vocab.sos(),
        })
    }

    pub fn initial_state(&mut self) -> DecoderState {
        self.graph
            .initial_state(&self.enc, self.sos)
            .expect("encoder states match the decoder geometry")
    }

    pub fn step(&mut self, state: &DecoderState) -> Result<StepOutput> {
        let out = self.graph.spell_step(&self.enc, state)?;
        Ok(StepOutput {
            log_probs: log_softmax(self.graph.value(out.logits).data()),
            alpha_video: self.graph.value(out.alpha_video).data().to_vec(),
            alpha_audio: self.graph.value(out.alpha_audio).data().to_vec(),
            state: out.state,
        })
    }

    pub fn value(&self, v: Var) -> &NdArray {
        self.graph.value(v)
    }

    pub fn encoded(&self) -> &Encoded {
        &self.enc
    }

    pub fn video_steps(&self) -> usize {
        self.graph.value(self.enc.video.outputs).rows()
    }

    pub fn audio_steps(&self) -> usize {
        self.graph.value(self.enc.audio.outputs).rows()
    }
}

/// Audio features as a `[T, 13]` array, for callers building inputs by hand.
pub fn audio_from_rows(rows: &[Vec<f64>]) -> Result<AudioFeatures> {
    if rows.iter().any(|r| r.len() != MFCC_DIM) {
        return Err(Error::shape("audio rows", format!("every row needs {MFCC_DIM} values")));
    }
    AudioFeatures::new(NdArray::from_rows(rows)?)
}
