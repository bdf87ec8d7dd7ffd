//! Input featurization: MFCC extraction, 5-frame video windows and
//! SNR-controlled additive white Gaussian noise.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::NdArray;

/// Coefficients kept per audio frame.
pub const MFCC_DIM: usize = 13;
/// Raw frames stacked into one visual input window.
pub const WINDOW_FRAMES: usize = 5;
pub const AUDIO_FRAME_RATE_HZ: f64 = 100.0;
pub const VIDEO_FRAME_RATE_HZ: f64 = 25.0;
/// Audio frames per video frame at the two rates above.
pub const AUDIO_PER_VIDEO_FRAME: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MfccConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub pre_emphasis: f64,
    /// FFT length; `None` picks the next power of two at or above the window.
    pub fft_size: Option<usize>,
    pub mel_filters: usize,
    pub log_floor: f64,
    pub low_hz: f64,
    /// Upper filterbank edge; `None` means Nyquist.
    pub high_hz: Option<f64>,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            window_ms: 25.0,
            hop_ms: 10.0,
            pre_emphasis: 0.97,
            fft_size: None,
            mel_filters: 26,
            log_floor: 1e-10,
            low_hz: 0.0,
            high_hz: None,
        }
    }
}

/// `T × 13` MFCC matrix at 100 Hz.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatures {
    frames: NdArray,
}

impl AudioFeatures {
    pub fn new(frames: NdArray) -> Result<Self> {
        if frames.rank() != 2 || frames.cols() != MFCC_DIM {
            return Err(Error::shape("audio features", format!("expected [T, {MFCC_DIM}], got {:?}", frames.shape())));
        }
        if !frames.is_finite() {
            return Err(Error::NonFinite("audio features".into()));
        }
        Ok(AudioFeatures { frames })
    }

    pub fn zeros(frames: usize) -> Self {
        AudioFeatures {
            frames: NdArray::zeros(&[frames.max(1), MFCC_DIM]),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frames(&self) -> &NdArray {
        &self.frames
    }

    pub fn frame_rate_hz(&self) -> f64 {
        AUDIO_FRAME_RATE_HZ
    }

    /// Frames `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::InvalidInput(format!("audio slice [{start}, {end}) of {} frames", self.len())));
        }
        let data = self.frames.data()[start * MFCC_DIM..end * MFCC_DIM].to_vec();
        AudioFeatures::new(NdArray::new(vec![end - start, MFCC_DIM], data)?)
    }
}

/// Grayscale frames in `[0, 1]`, `T × H × W`, at 25 Hz.
#[derive(Clone, Debug, PartialEq)]
pub struct RawVideo {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RawVideo {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 || data.len() != frames * height * width {
            return Err(Error::shape(
                "raw video",
                format!("{frames}x{height}x{width} frames with {} pixels", data.len()),
            ));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("pixel values must lie in [0, 1]".into()));
        }
        Ok(RawVideo { frames, height, width, data })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        RawVideo {
            frames,
            height,
            width,
            data: vec![0.0; frames * height * width],
        }
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames {
            return Err(Error::InvalidInput(format!("video slice [{start}, {end}) of {} frames", self.frames)));
        }
        let n = self.height * self.width;
        Ok(RawVideo {
            frames: end - start,
            height: self.height,
            width: self.width,
            data: self.data[start * n..end * n].to_vec(),
        })
    }
}

/// `T × (5·H·W)` stacked windows, one per raw frame position.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoWindows {
    pub height: usize,
    pub width: usize,
    windows: NdArray,
}

impl VideoWindows {
    pub fn len(&self) -> usize {
        self.windows.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn windows(&self) -> &NdArray {
        &self.windows
    }

    pub fn frame_rate_hz(&self) -> f64 {
        VIDEO_FRAME_RATE_HZ
    }

    /// Window `i` as a `[5, H, W]` array.
    pub fn window(&self, i: usize) -> NdArray {
        NdArray::from_parts(
            vec![WINDOW_FRAMES, self.height, self.width],
            self.windows.row_slice(i).to_vec(),
        )
    }

    pub fn zeros(count: usize, height: usize, width: usize) -> Self {
        VideoWindows {
            height,
            width,
            windows: NdArray::zeros(&[count.max(1), WINDOW_FRAMES * height * width]),
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.windows.data().iter().all(|&v| v == 0.0)
    }
}

/// Stacks every run of 5 consecutive frames (stride 1) into one window.
pub fn window_frames(video: &RawVideo) -> Result<VideoWindows> {
    if video.frames < WINDOW_FRAMES {
        return Err(Error::InvalidInput(format!(
            "need at least {WINDOW_FRAMES} frames to form a window, got {}",
            video.frames
        )));
    }
    let count = video.frames - (WINDOW_FRAMES - 1);
    let frame_len = video.height * video.width;
    let mut data = Vec::with_capacity(count * WINDOW_FRAMES * frame_len);
    for i in 0..count {
        data.extend_from_slice(&video.data[i * frame_len..(i + WINDOW_FRAMES) * frame_len]);
    }
    Ok(VideoWindows {
        height: video.height,
        width: video.width,
        windows: NdArray::from_parts(vec![count, WINDOW_FRAMES * frame_len], data),
    })
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Resolved framing and filterbank for one sample rate.
#[derive(Clone, Debug)]
pub struct MfccExtractor {
    config: MfccConfig,
    sample_rate: f64,
    window_len: usize,
    hop_len: usize,
    fft_size: usize,
    hamming: Vec<f64>,
    /// `[filters][fft_size / 2 + 1]` triangular weights.
    filters: Vec<Vec<f64>>,
    centers_hz: Vec<f64>,
}

impl MfccExtractor {
    pub fn new(sample_rate_hz: u32, config: &MfccConfig) -> Result<Self> {
        if sample_rate_hz < 8000 {
            return Err(Error::InvalidInput(format!("sample rate must be at least 8000 Hz, got {sample_rate_hz}")));
        }
        let sr = f64::from(sample_rate_hz);
        let window_len = (config.window_ms * sr / 1000.0).round() as usize;
        let hop_len = (config.hop_ms * sr / 1000.0).round() as usize;
        if window_len == 0 || hop_len == 0 || config.mel_filters < MFCC_DIM {
            return Err(Error::Config(format!("unusable MFCC config {config:?}")));
        }
        let fft_size = config.fft_size.unwrap_or_else(|| window_len.next_power_of_two());
        if fft_size < window_len {
            return Err(Error::Config(format!("FFT size {fft_size} shorter than window {window_len}")));
        }
        let high = config.high_hz.unwrap_or(sr / 2.0).min(sr / 2.0);
        if config.low_hz < 0.0 || config.low_hz >= high {
            return Err(Error::Config(format!("filterbank edges {}..{high} Hz", config.low_hz)));
        }
        let hamming = (0..window_len)
            .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (window_len - 1) as f64).cos())
            .collect();

        let (mel_lo, mel_hi) = (hz_to_mel(config.low_hz), hz_to_mel(high));
        let edges: Vec<f64> = (0..config.mel_filters + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (config.mel_filters + 1) as f64))
            .collect();
        let bins = fft_size / 2 + 1;
        let filters = (0..config.mel_filters)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..bins)
                    .map(|k| {
                        let f = k as f64 * sr / fft_size as f64;
                        if f <= lo || f >= hi {
                            0.0
                        } else if f <= mid {
                            (f - lo) / (mid - lo)
                        } else {
                            (hi - f) / (hi - mid)
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(MfccExtractor {
            config: config.clone(),
            sample_rate: sr,
            window_len,
            hop_len,
            fft_size,
            hamming,
            filters,
            centers_hz: edges[1..=config.mel_filters].to_vec(),
        })
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn hop_len(&self) -> usize {
        self.hop_len
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    /// Center frequency of each mel filter.
    pub fn filter_centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Triangular weights of filter `m` over the one-sided spectrum bins.
    pub fn filter_weights(&self, m: usize) -> &[f64] {
        &self.filters[m]
    }

    pub fn frame_count(&self, samples: usize) -> usize {
        if samples < self.window_len {
            0
        } else {
            (samples - self.window_len) / self.hop_len + 1
        }
    }

    /// Pre-emphasised, Hamming-windowed frames.
    pub fn windowed_frames(&self, waveform: &[f64]) -> Result<Vec<Vec<f64>>> {
        let count = self.frame_count(waveform.len());
        if count == 0 {
            return Err(Error::InvalidInput(format!(
                "waveform of {} samples is shorter than one {}-sample window",
                waveform.len(),
                self.window_len
            )));
        }
        let k = self.config.pre_emphasis;
        let emphasized: Vec<f64> = waveform
            .iter()
            .enumerate()
            .map(|(n, &x)| if n == 0 { x } else { x - k * waveform[n - 1] })
            .collect();
        Ok((0..count)
            .map(|t| {
                let start = t * self.hop_len;
                emphasized[start..start + self.window_len]
                    .iter()
                    .zip(&self.hamming)
                    .map(|(x, w)| x * w)
                    .collect()
            })
            .collect())
    }

    /// Filterbank energies from a one-sided power spectrum.
    pub fn filterbank(&self, power: &[f64]) -> Vec<f64> {
        self.filters
            .iter()
            .map(|w| w.iter().zip(power).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// One-sided power spectrum `|X_k|² / N` of a windowed frame.
    pub fn power_spectrum(&self, frame: &[f64], planner: &mut FftPlanner<f64>) -> Vec<f64> {
        let fft = planner.plan_fft_forward(self.fft_size);
        let mut buf: Vec<Complex<f64>> = frame.iter().map(|&x| Complex::new(x, 0.0)).collect();
        buf.resize(self.fft_size, Complex::new(0.0, 0.0));
        fft.process(&mut buf);
        buf[..self.fft_size / 2 + 1]
            .iter()
            .map(|c| c.norm_sqr() / self.fft_size as f64)
            .collect()
    }

    /// Orthonormal DCT-II of the log filterbank energies, first 13 terms.
    pub fn cepstrum(&self, energies: &[f64]) -> Vec<f64> {
        let m = energies.len();
        let logs: Vec<f64> = energies.iter().map(|&e| e.max(self.config.log_floor).ln()).collect();
        (0..MFCC_DIM)
            .map(|k| {
                let scale = if k == 0 { (1.0 / m as f64).sqrt() } else { (2.0 / m as f64).sqrt() };
                scale
                    * logs
                        .iter()
                        .enumerate()
                        .map(|(n, &l)| l * (PI * k as f64 * (2 * n + 1) as f64 / (2 * m) as f64).cos())
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn extract(&self, waveform: &[f64]) -> Result<AudioFeatures> {
        let frames = self.windowed_frames(waveform)?;
        let mut planner = FftPlanner::new();
        let mut data = Vec::with_capacity(frames.len() * MFCC_DIM);
        for frame in &frames {
            let power = self.power_spectrum(frame, &mut planner);
            data.extend(self.cepstrum(&self.filterbank(&power)));
        }
        AudioFeatures::new(NdArray::new(vec![frames.len(), MFCC_DIM], data)?)
    }
}

/// MFCCs over 25 ms windows with a 10 ms hop.
pub fn compute_mfcc(waveform: &[f64], sample_rate_hz: u32, config: &MfccConfig) -> Result<AudioFeatures> {
    MfccExtractor::new(sample_rate_hz, config)?.extract(waveform)
}

/// Target signal-to-noise ratio; serialized as `"clean"` or e.g. `"10dB"`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Snr {
    Clean,
    Db(f64),
}

impl Snr {
    pub fn label(&self) -> String {
        match self {
            Snr::Clean => "clean".into(),
            Snr::Db(db) => format!("{db}dB"),
        }
    }
}

impl From<Snr> for String {
    fn from(s: Snr) -> String {
        s.label()
    }
}

impl TryFrom<String> for Snr {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl std::str::FromStr for Snr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        if t == "clean" {
            return Ok(Snr::Clean);
        }
        let num = t.strip_suffix("db").unwrap_or(&t);
        num.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(Snr::Db)
            .ok_or_else(|| Error::InvalidInput(format!("unparseable SNR '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub snr: Snr,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn clean() -> Self {
        NoiseConfig { snr: Snr::Clean, seed: 0 }
    }

    pub fn at_db(snr_db: f64, seed: u64) -> Self {
        NoiseConfig {
            snr: Snr::Db(snr_db),
            seed,
        }
    }
}

pub fn mean_power(signal: &[f64]) -> f64 {
    signal.iter().map(|x| x * x).sum::<f64>() / signal.len() as f64
}

/// Adds i.i.d. Gaussian noise with variance `P_signal / 10^(snr/10)`.
pub fn add_awgn(signal: &[f64], noise: &NoiseConfig) -> Result<Vec<f64>> {
    if signal.is_empty() {
        return Err(Error::InvalidInput("cannot add noise to an empty signal".into()));
    }
    let snr_db = match noise.snr {
        Snr::Clean => return Ok(signal.to_vec()),
        Snr::Db(db) if db.is_finite() => db,
        Snr::Db(db) => return Err(Error::InvalidInput(format!("SNR must be finite, got {db}"))),
    };
    let power = mean_power(signal);
    if power <= 0.0 {
        return Err(Error::InvalidInput("signal has zero power; a finite SNR is undefined".into()));
    }
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    Ok(signal.iter().map(|&x| x + normal.sample(&mut rng)).collect())
}

/// Feature-space noise with the SNR defined over feature energy.
pub fn add_awgn_features(features: &AudioFeatures, noise: &NoiseConfig) -> Result<AudioFeatures> {
    let noisy = add_awgn(features.frames().data(), noise)?;
    AudioFeatures::new(NdArray::new(features.frames().shape().to_vec(), noisy)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_second_at_16k_gives_98_frames() {
        let wave = vec![0.1; 16000];
        let f = compute_mfcc(&wave, 16000, &MfccConfig::default()).unwrap();
        assert_eq!(f.len(), 98);
        assert_eq!(f.frames().cols(), MFCC_DIM);
    }

    #[test]
    fn silence_sits_at_the_log_floor() {
        let cfg = MfccConfig::default();
        let f = compute_mfcc(&vec![0.0; 4000], 16000, &cfg).unwrap();
        let expected_c0 = (cfg.mel_filters as f64).sqrt() * cfg.log_floor.ln();
        for t in 0..f.len() {
            assert_eq!(f.frames().row_slice(t), f.frames().row_slice(0));
            assert!((f.frames().get2(t, 0) - expected_c0).abs() < 1e-9);
            assert!(f.frames().row_slice(t)[1..].iter().all(|c| c.abs() < 1e-9));
        }
    }

    #[test]
    fn short_waveform_and_low_rate_are_rejected() {
        assert!(compute_mfcc(&vec![0.0; 399], 16000, &MfccConfig::default()).is_err());
        assert!(compute_mfcc(&vec![0.0; 4000], 4000, &MfccConfig::default()).is_err());
    }

    #[test]
    fn window_counts() {
        let v = |t| RawVideo::zeros(t, 2, 2);
        assert_eq!(window_frames(&v(5)).unwrap().len(), 1);
        assert_eq!(window_frames(&v(29)).unwrap().len(), 25);
        assert!(window_frames(&v(4)).is_err());
    }

    #[test]
    fn clean_noise_is_identity() {
        let s = vec![0.5, -0.25, 1.0];
        assert_eq!(add_awgn(&s, &NoiseConfig::clean()).unwrap(), s);
    }

    #[test]
    fn zero_power_with_finite_snr_fails() {
        assert!(add_awgn(&[0.0; 10], &NoiseConfig::at_db(10.0, 1)).is_err());
        assert!(add_awgn(&[], &NoiseConfig::clean()).is_err());
    }

    #[test]
    fn snr_parsing() {
        assert_eq!("clean".parse::<Snr>().unwrap(), Snr::Clean);
        assert_eq!("10dB".parse::<Snr>().unwrap(), Snr::Db(10.0));
        assert_eq!("0".parse::<Snr>().unwrap(), Snr::Db(0.0));
        assert!("loud".parse::<Snr>().is_err());
    }
}
