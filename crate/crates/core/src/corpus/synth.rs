//! Procedural audio-visual rendering of transcripts.
//!
//! Every character owns a fixed mouth pattern and a fixed 13-dim audio
//! signature. Video patterns are a viseme-class ellipse plus a faint
//! per-character blob, so characters in one class are separable only by
//! fine detail. Audio signatures share a large common offset, which keeps
//! the per-character differences small relative to total signal power.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{compute_mfcc, AudioFeatures, MfccConfig, RawVideo, Snr, MFCC_DIM};
use crate::tensor::NdArray;

use super::vocab::CharVocabulary;

/// Silent frames rendered before and after the transcript.
pub const EDGE_FRAMES: usize = 2;
/// Viseme index used for spaces, punctuation and silence.
pub const REST_VISEME: usize = 8;
pub const VISEME_COUNT: usize = 9;

const VISEME_GROUPS: [&str; 8] = ["BMP", "FV45", "TDNL239", "SZCJ067", "KGHX", "AEI8", "OUWQ1", "RY"];

/// Mouth half-width and half-height (fractions of the frame) per viseme.
const VISEME_SHAPES: [(f64, f64); VISEME_COUNT] = [
    (0.30, 0.04),
    (0.28, 0.09),
    (0.26, 0.14),
    (0.34, 0.10),
    (0.22, 0.18),
    (0.32, 0.22),
    (0.14, 0.16),
    (0.18, 0.12),
    (0.24, 0.06),
];

pub fn viseme_class(c: char) -> usize {
    VISEME_GROUPS
        .iter()
        .position(|g| g.contains(c))
        .unwrap_or(REST_VISEME)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AudioMode {
    /// Signatures are emitted directly as MFCC-space frames.
    Features,
    /// Per-character tones are rendered at 16 kHz and passed through MFCC.
    Waveform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Mean video frames per character.
    pub frames_per_char: usize,
    /// Uniform jitter applied to each character's duration.
    pub duration_jitter: usize,
    /// Audio frames per video frame (100 Hz / 25 Hz).
    pub audio_per_video: usize,
    pub video_sigma: f64,
    pub audio_sigma: f64,
    /// Peak of the per-character blob drawn over the mouth.
    pub blob_amplitude: f64,
    /// Maximum per-utterance mouth displacement in pixels.
    pub position_jitter: usize,
    pub audio_offset: f64,
    pub audio_scale: f64,
    /// Seed of the character patterns, shared by every utterance.
    pub pattern_seed: u64,
    pub audio_mode: AudioMode,
    pub sample_rate_hz: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 32,
            width: 32,
            frames_per_char: 3,
            duration_jitter: 1,
            audio_per_video: 4,
            video_sigma: 0.1,
            audio_sigma: 0.1,
            blob_amplitude: 0.05,
            position_jitter: 1,
            audio_offset: 3.0,
            audio_scale: 1.0,
            pattern_seed: 0x57_4c_41_53,
            audio_mode: AudioMode::Features,
            sample_rate_hz: 16000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config(format!("frame size {}x{} is below 4x4", self.height, self.width)));
        }
        if self.frames_per_char == 0 || self.duration_jitter >= self.frames_per_char {
            return Err(Error::Config(format!(
                "frames_per_char {} must exceed duration_jitter {}",
                self.frames_per_char, self.duration_jitter
            )));
        }
        if self.audio_per_video == 0 {
            return Err(Error::Config("audio_per_video must be positive".into()));
        }
        for (name, v) in [
            ("video_sigma", self.video_sigma),
            ("audio_sigma", self.audio_sigma),
            ("blob_amplitude", self.blob_amplitude),
            ("audio_scale", self.audio_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !self.audio_offset.is_finite() {
            return Err(Error::Config("audio_offset must be finite".into()));
        }
        if self.audio_mode == AudioMode::Waveform && self.sample_rate_hz < 8000 {
            return Err(Error::Config("waveform mode needs sample_rate_hz >= 8000".into()));
        }
        Ok(())
    }
}

/// Word position inside an utterance, in characters and in frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSpan {
    pub char_start: usize,
    pub char_end: usize,
    pub frame_start: usize,
    pub frame_end: usize,
}

/// 8-bit grayscale frames, `T × H × W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl VideoClip {
    pub fn to_raw(&self) -> RawVideo {
        let data = self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
        RawVideo::new(self.frames, self.height, self.width, data).expect("clip geometry is consistent")
    }

    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames {
            return Err(Error::InvalidInput(format!("video slice [{start}, {end}) of {} frames", self.frames)));
        }
        let n = self.height * self.width;
        Ok(VideoClip {
            frames: end - start,
            height: self.height,
            width: self.width,
            pixels: self.pixels[start * n..end * n].to_vec(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
    AudioOnly,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::AudioOnly];

    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::AudioOnly => "audio-only",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub transcript: String,
    pub video: Option<VideoClip>,
    pub audio: AudioFeatures,
    pub split: Split,
    pub snr: Snr,
    pub words: Vec<WordSpan>,
}

impl Utterance {
    /// Raw video frame count, or the count the audio implies when absent.
    pub fn video_frames(&self, audio_per_video: usize) -> usize {
        match &self.video {
            Some(v) => v.frames,
            None => self.audio.len() / audio_per_video,
        }
    }

    /// The utterance cut down to words `[first, last]`, with the edge
    /// context frames on each side so the clip keeps at least 5 frames.
    pub fn sub_utterance(&self, first: usize, last: usize, audio_per_video: usize) -> Result<Utterance> {
        if first > last || last >= self.words.len() {
            return Err(Error::InvalidInput(format!(
                "word range [{first}, {last}] of {} words",
                self.words.len()
            )));
        }
        let (a, b) = (self.words[first], self.words[last]);
        let total = self.video_frames(audio_per_video);
        let start = a.frame_start.saturating_sub(EDGE_FRAMES);
        let end = (b.frame_end + EDGE_FRAMES).min(total);
        let video = self.video.as_ref().map(|v| v.slice(start, end)).transpose()?;
        let audio = self.audio.slice(start * audio_per_video, end * audio_per_video)?;
        let chars: Vec<char> = self.transcript.chars().collect();
        let transcript: String = chars[a.char_start..b.char_end].iter().collect();
        let words = self.words[first..=last]
            .iter()
            .map(|w| WordSpan {
                char_start: w.char_start - a.char_start,
                char_end: w.char_end - a.char_start,
                frame_start: w.frame_start - start,
                frame_end: w.frame_end - start,
            })
            .collect();
        Ok(Utterance {
            id: format!("{}[{first}..={last}]", self.id),
            transcript,
            video,
            audio,
            split: self.split,
            snr: self.snr,
            words,
        })
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of one named item under a run seed, independent of generation order.
pub fn derive_seed(run_seed: u64, key: &str) -> u64 {
    let mut h = splitmix64(run_seed);
    for b in key.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    h
}

/// Clean (noise-free) rendering of one character.
#[derive(Clone, Debug, PartialEq)]
pub struct CharPattern {
    pub viseme: usize,
    /// `H × W` intensities before jitter, centred mouth.
    pub image: Vec<f64>,
    pub audio: [f64; MFCC_DIM],
    /// Pair of tone frequencies for waveform mode.
    pub tones: (f64, f64),
}

/// Fixed character patterns for a vocabulary under a [`SynthConfig`].
#[derive(Clone, Debug)]
pub struct PatternBank {
    config: SynthConfig,
    chars: Vec<char>,
    patterns: Vec<CharPattern>,
    silence: CharPattern,
}

fn shared_direction() -> [f64; MFCC_DIM] {
    let mut u = [0.0; MFCC_DIM];
    for (i, x) in u.iter_mut().enumerate() {
        *x = 1.0 - 0.5 * (i as f64 / (MFCC_DIM - 1) as f64);
    }
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    u.map(|x| x / norm * (MFCC_DIM as f64).sqrt())
}

impl PatternBank {
    pub fn new(vocab: &CharVocabulary, config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut chars = vocab.characters();
        if !chars.contains(&' ') {
            chars.push(' ');
        }
        let patterns = chars.iter().map(|&c| Self::render(config, Some(c))).collect();
        Ok(PatternBank {
            config: config.clone(),
            chars,
            patterns,
            silence: Self::render(config, None),
        })
    }

    fn render(cfg: &SynthConfig, c: Option<char>) -> CharPattern {
        let (h, w) = (cfg.height, cfg.width);
        let viseme = c.map_or(REST_VISEME, viseme_class);
        let key = c.map_or_else(|| "silence".to_string(), |c| format!("char:{c}"));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.pattern_seed, &key));

        let (hw, hh) = VISEME_SHAPES[viseme];
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (ry, rx) = ((hh * h as f64).max(0.5), hw * w as f64);
        let mut image = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let d = ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2);
                // smooth lip edge: skin 0.65, mouth interior 0.1
                let inside = 1.0 / (1.0 + ((d - 1.0) * 6.0).exp());
                image[y * w + x] = 0.65 - 0.55 * inside;
            }
        }
        if c.is_some() {
            let by = rng.gen_range(0.25..0.75) * h as f64;
            let bx = rng.gen_range(0.2..0.8) * w as f64;
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let radius = (h.min(w) as f64 / 10.0).max(1.0);
            for y in 0..h {
                for x in 0..w {
                    let r2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
                    image[y * w + x] += sign * cfg.blob_amplitude * (-r2 / (2.0 * radius * radius)).exp();
                }
            }
        }
        for p in &mut image {
            *p = p.clamp(0.0, 1.0);
        }

        let u = shared_direction();
        let mut audio = [0.0; MFCC_DIM];
        for (i, a) in audio.iter_mut().enumerate() {
            let z: f64 = if c.is_some() { StandardNormal.sample(&mut rng) } else { 0.0 };
            *a = cfg.audio_offset * u[i] + cfg.audio_scale * z;
        }
        let tones = match c {
            Some(_) => (rng.gen_range(200.0..1500.0), rng.gen_range(1500.0..5000.0)),
            None => (0.0, 0.0),
        };
        CharPattern {
            viseme,
            image,
            audio,
            tones,
        }
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    pub fn pattern(&self, c: char) -> Option<&CharPattern> {
        self.chars.iter().position(|&x| x == c).map(|i| &self.patterns[i])
    }

    pub fn silence(&self) -> &CharPattern {
        &self.silence
    }

    /// Smallest pairwise (video, audio) Euclidean distance between patterns.
    pub fn min_pattern_distances(&self) -> (f64, f64) {
        let mut dv = f64::INFINITY;
        let mut da = f64::INFINITY;
        for i in 0..self.patterns.len() {
            for j in i + 1..self.patterns.len() {
                let (p, q) = (&self.patterns[i], &self.patterns[j]);
                dv = dv.min(euclid(&p.image, &q.image));
                da = da.min(euclid(&p.audio, &q.audio));
            }
        }
        (dv, da)
    }

    /// Renders `transcript` with jitter drawn from `seed`.
    pub fn synthesize(&self, id: &str, transcript: &str, split: Split, seed: u64, with_video: bool) -> Result<Utterance> {
        let cfg = &self.config;
        let text = CharVocabulary::normalize(transcript);
        let chars: Vec<char> = text.chars().collect();
        if chars.is_empty() {
            return Err(Error::InvalidInput("cannot synthesize an empty transcript".into()));
        }
        let missing: Vec<char> = chars.iter().copied().filter(|&c| self.pattern(c).is_none()).collect();
        if !missing.is_empty() {
            let mut uniq = missing;
            uniq.dedup();
            return Err(Error::Vocabulary {
                text: transcript.to_string(),
                chars: uniq,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        // per-frame character sequence, with silence at both ends
        let mut timeline: Vec<Option<char>> = vec![None; EDGE_FRAMES];
        let mut char_frames = Vec::with_capacity(chars.len());
        for &c in &chars {
            let lo = cfg.frames_per_char - cfg.duration_jitter;
            let hi = cfg.frames_per_char + cfg.duration_jitter;
            let d = rng.gen_range(lo..=hi);
            char_frames.push((timeline.len(), timeline.len() + d));
            timeline.extend(std::iter::repeat(Some(c)).take(d));
        }
        timeline.extend(std::iter::repeat(None).take(EDGE_FRAMES));
        let words = word_spans(&chars, &char_frames);

        let pj = cfg.position_jitter as i64;
        let (dy, dx) = (rng.gen_range(-pj..=pj), rng.gen_range(-pj..=pj));
        let video = with_video.then(|| self.render_video(&timeline, dy, dx, &mut rng));
        let audio = match cfg.audio_mode {
            AudioMode::Features => self.render_audio_features(&timeline, &mut rng)?,
            AudioMode::Waveform => self.render_audio_waveform(&timeline, &mut rng)?,
        };
        Ok(Utterance {
            id: id.to_string(),
            transcript: text,
            video,
            audio,
            split,
            snr: Snr::Clean,
            words,
        })
    }

    fn lookup(&self, c: Option<char>) -> &CharPattern {
        c.and_then(|c| self.pattern(c)).unwrap_or(&self.silence)
    }

    fn render_video(&self, timeline: &[Option<char>], dy: i64, dx: i64, rng: &mut ChaCha8Rng) -> VideoClip {
        let cfg = &self.config;
        let (h, w) = (cfg.height, cfg.width);
        let jitter = Normal::new(0.0, cfg.video_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
        let mut pixels = Vec::with_capacity(timeline.len() * h * w);
        for &c in timeline {
            let img = &self.lookup(c).image;
            for y in 0..h {
                for x in 0..w {
                    let sy = (y as i64 - dy).clamp(0, h as i64 - 1) as usize;
                    let sx = (x as i64 - dx).clamp(0, w as i64 - 1) as usize;
                    let mut v = img[sy * w + sx];
                    if cfg.video_sigma > 0.0 {
                        v += jitter.sample(rng);
                    }
                    pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        VideoClip {
            frames: timeline.len(),
            height: h,
            width: w,
            pixels,
        }
    }

    fn render_audio_features(&self, timeline: &[Option<char>], rng: &mut ChaCha8Rng) -> Result<AudioFeatures> {
        let cfg = &self.config;
        let jitter = Normal::new(0.0, cfg.audio_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
        let t_a = timeline.len() * cfg.audio_per_video;
        let mut data = Vec::with_capacity(t_a * MFCC_DIM);
        for &c in timeline {
            let sig = &self.lookup(c).audio;
            for _ in 0..cfg.audio_per_video {
                for &s in sig {
                    let v = if cfg.audio_sigma > 0.0 { s + jitter.sample(rng) } else { s };
                    data.push(f64::from(v as f32));
                }
            }
        }
        AudioFeatures::new(NdArray::new(vec![t_a, MFCC_DIM], data)?)
    }

    /// Tones at 16 kHz sized so MFCC yields exactly one frame per audio slot.
    fn render_audio_waveform(&self, timeline: &[Option<char>], rng: &mut ChaCha8Rng) -> Result<AudioFeatures> {
        let cfg = &self.config;
        let mfcc = MfccConfig::default();
        let sr = f64::from(cfg.sample_rate_hz);
        let hop = (mfcc.hop_ms / 1000.0 * sr).round() as usize;
        let win = (mfcc.window_ms / 1000.0 * sr).round() as usize;
        let t_a = timeline.len() * cfg.audio_per_video;
        let n = (t_a - 1) * hop + win;
        let jitter = Normal::new(0.0, cfg.audio_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
        let mut wave = Vec::with_capacity(n);
        for s in 0..n {
            let slot = (s / hop).min(t_a - 1) / cfg.audio_per_video;
            let (f1, f2) = self.lookup(timeline[slot]).tones;
            let t = s as f64 / sr;
            let mut v = 0.5 * (2.0 * PI * f1 * t).sin() + 0.3 * (2.0 * PI * f2 * t).sin();
            if cfg.audio_sigma > 0.0 {
                v += jitter.sample(rng);
            }
            wave.push(f64::from(v as f32));
        }
        let feats = compute_mfcc(&wave, cfg.sample_rate_hz, &mfcc)?;
        let data = feats.frames().data().iter().map(|&x| f64::from(x as f32)).collect();
        AudioFeatures::new(NdArray::new(feats.frames().shape().to_vec(), data)?)
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn word_spans(chars: &[char], char_frames: &[(usize, usize)]) -> Vec<WordSpan> {
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    for i in 0..=chars.len() {
        let boundary = i == chars.len() || chars[i] == ' ';
        match (start, boundary) {
            (None, false) => start = Some(i),
            (Some(s), true) => {
                spans.push(WordSpan {
                    char_start: s,
                    char_end: i,
                    frame_start: char_frames[s].0,
                    frame_end: char_frames[i - 1].1,
                });
                start = None;
            }
            _ => {}
        }
    }
    spans
}

/// Convenience wrapper building a fresh [`PatternBank`] for one utterance.
pub fn synthesize_utterance(
    transcript: &str,
    vocab: &CharVocabulary,
    config: &SynthConfig,
    seed: u64,
    with_video: bool,
) -> Result<Utterance> {
    vocab.encode_chars(transcript)?;
    let bank = PatternBank::new(vocab, config)?;
    let split = if with_video { Split::Train } else { Split::AudioOnly };
    bank.synthesize("utt", transcript, split, seed, with_video)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(cfg: &SynthConfig) -> PatternBank {
        PatternBank::new(&CharVocabulary::standard(), cfg).unwrap()
    }

    #[test]
    fn grid_sentence_durations() {
        let cfg = SynthConfig {
            duration_jitter: 0,
            ..SynthConfig::default()
        };
        let u = bank(&cfg).synthesize("u", "BIN BLUE AT A 1 NOW", Split::Train, 1, true).unwrap();
        let n = u.transcript.chars().count();
        let v = u.video.as_ref().unwrap();
        assert_eq!(v.frames, 3 * n + 2 * EDGE_FRAMES);
        assert_eq!(u.audio.len(), 4 * v.frames);
        assert_eq!(u.words.len(), 6);
    }

    #[test]
    fn zero_jitter_is_bit_identical() {
        let cfg = SynthConfig {
            video_sigma: 0.0,
            audio_sigma: 0.0,
            ..SynthConfig::default()
        };
        let b = bank(&cfg);
        let x = b.synthesize("u", "SET RED", Split::Train, 5, true).unwrap();
        let y = b.synthesize("u", "SET RED", Split::Train, 5, true).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn audio_only_has_no_video() {
        let u = bank(&SynthConfig::default()).synthesize("u", "NOW", Split::AudioOnly, 2, false).unwrap();
        assert!(u.video.is_none());
        assert!(!u.audio.is_empty());
    }

    #[test]
    fn out_of_vocabulary_is_an_error() {
        let r = bank(&SynthConfig::default()).synthesize("u", "A#", Split::Train, 0, true);
        assert!(matches!(r, Err(Error::Vocabulary { .. })));
    }

    #[test]
    fn patterns_are_separated() {
        let cfg = SynthConfig::default();
        let b = bank(&cfg);
        let (dv, da) = b.min_pattern_distances();
        assert!(dv > 0.0, "video {dv}");
        assert!(da > 5.0 * cfg.audio_sigma, "audio {da}");
        // viseme classes stay far apart; characters within one are faint
        let mut across = f64::INFINITY;
        for p in &b.patterns {
            for q in &b.patterns {
                if p.viseme != q.viseme {
                    across = across.min(euclid(&p.image, &q.image));
                }
            }
        }
        assert!(across > 5.0 * cfg.video_sigma, "across visemes {across}");
    }

    #[test]
    fn waveform_mode_matches_frame_count() {
        let cfg = SynthConfig {
            audio_mode: AudioMode::Waveform,
            ..SynthConfig::default()
        };
        let u = bank(&cfg).synthesize("u", "LAY", Split::Train, 3, true).unwrap();
        assert_eq!(u.audio.len(), 4 * u.video.unwrap().frames);
    }

    #[test]
    fn sub_utterance_cuts_both_streams() {
        let u = bank(&SynthConfig::default())
            .synthesize("u", "BIN BLUE AT A 1 NOW", Split::Train, 9, true)
            .unwrap();
        let s = u.sub_utterance(3, 3, 4).unwrap();
        assert_eq!(s.transcript, "A");
        let frames = s.video.as_ref().unwrap().frames;
        assert!(frames >= 5);
        assert_eq!(s.audio.len(), 4 * frames);
        let two = u.sub_utterance(1, 2, 4).unwrap();
        assert_eq!(two.transcript, "BLUE AT");
        assert_eq!(two.words.len(), 2);
    }

    #[test]
    fn derived_seeds_depend_on_key() {
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
        assert_eq!(derive_seed(7, "train-00001"), derive_seed(7, "train-00001"));
    }
}
