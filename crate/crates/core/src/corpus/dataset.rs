//! Split bookkeeping, manifests and `.npy` payloads.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use npyz::WriterBuilder;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{AudioFeatures, Snr, MFCC_DIM};
use crate::tensor::NdArray;

use super::grammar::Grammar;
use super::synth::{derive_seed, PatternBank, Split, SynthConfig, Utterance, VideoClip, WordSpan};
use super::vocab::{CharVocabulary, VocabMode};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub audio_only: usize,
    pub seed: u64,
    pub vocab: VocabMode,
    pub grammar: Grammar,
    pub synth: SynthConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train: 200,
            val: 20,
            test: 20,
            audio_only: 100,
            seed: 1,
            vocab: VocabMode::WithSpace,
            grammar: Grammar::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
            Split::AudioOnly => self.audio_only,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        if self.grammar.slots.is_empty() || self.grammar.slots.iter().any(Vec::is_empty) {
            return Err(Error::Config("grammar slots must be nonempty".into()));
        }
        let total: u64 = Split::ALL.iter().map(|&s| self.size(s) as u64).sum();
        let available = self.grammar.sentence_count();
        if total > available {
            return Err(Error::Config(format!(
                "splits request {total} distinct sentences but the grammar yields only {available}; splits would overlap"
            )));
        }
        if self.train == 0 {
            return Err(Error::Config("train split must be nonempty".into()));
        }
        Ok(())
    }
}

/// An in-memory corpus: four disjoint splits sharing one vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub vocab: CharVocabulary,
    pub train: Vec<Utterance>,
    pub val: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub audio_only: Vec<Utterance>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
            Split::AudioOnly => &self.audio_only,
        }
    }

    pub fn find(&self, id: &str) -> Option<&Utterance> {
        Split::ALL.iter().flat_map(|&s| self.split(s)).find(|u| u.id == id)
    }
}

fn utterance_id(split: Split, index: usize) -> String {
    format!("{}-{index:05}", split.label())
}

/// Draws disjoint sentence sets for every split and renders them.
pub fn build_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let vocab = CharVocabulary::new(config.vocab);
    let bank = PatternBank::new(&vocab, &config.synth)?;
    let total: usize = Split::ALL.iter().map(|&s| config.size(s)).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let count = config.grammar.sentence_count() as usize;
    let picks = rand::seq::index::sample(&mut rng, count, total).into_vec();

    let mut offset = 0;
    let mut splits = Vec::with_capacity(4);
    for split in Split::ALL {
        let n = config.size(split);
        let mut utts = Vec::with_capacity(n);
        for (i, &pick) in picks[offset..offset + n].iter().enumerate() {
            let id = utterance_id(split, i);
            let text = config.grammar.sentence_at(pick as u64);
            vocab.encode_chars(&text)?;
            let seed = derive_seed(config.seed, &id);
            utts.push(bank.synthesize(&id, &text, split, seed, split != Split::AudioOnly)?);
        }
        offset += n;
        splits.push(utts);
    }
    let mut it = splits.into_iter();
    Ok(Dataset {
        config: config.clone(),
        vocab,
        train: it.next().unwrap_or_default(),
        val: it.next().unwrap_or_default(),
        test: it.next().unwrap_or_default(),
        audio_only: it.next().unwrap_or_default(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Payload {
    pub path: String,
    pub sha256: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub id: String,
    pub transcript: String,
    pub snr: Snr,
    pub words: Vec<WordSpan>,
    pub video: Option<Payload>,
    pub audio: Payload,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub vocabulary: CharVocabulary,
    pub config: DatasetConfig,
    pub train: Vec<UtteranceRecord>,
    pub val: Vec<UtteranceRecord>,
    pub test: Vec<UtteranceRecord>,
    pub audio_only: Vec<UtteranceRecord>,
}

impl DatasetManifest {
    pub fn section(&self, split: Split) -> &[UtteranceRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
            Split::AudioOnly => &self.audio_only,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Config(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn npy_error(e: std::io::Error) -> Error {
    Error::InvalidInput(format!("npy encoding: {e}"))
}

pub fn encode_npy_u8(shape: &[usize], data: &[u8]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let shape: Vec<u64> = shape.iter().map(|&d| d as u64).collect();
    let mut w = npyz::WriteOptions::<u8>::new()
        .default_dtype()
        .shape(&shape)
        .writer(&mut buf)
        .begin_nd()
        .map_err(npy_error)?;
    w.extend(data.iter().copied()).map_err(npy_error)?;
    w.finish().map_err(npy_error)?;
    Ok(buf)
}

pub fn encode_npy_f32(shape: &[usize], data: &[f64]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let shape: Vec<u64> = shape.iter().map(|&d| d as u64).collect();
    let mut w = npyz::WriteOptions::<f32>::new()
        .default_dtype()
        .shape(&shape)
        .writer(&mut buf)
        .begin_nd()
        .map_err(npy_error)?;
    w.extend(data.iter().map(|&x| x as f32)).map_err(npy_error)?;
    w.finish().map_err(npy_error)?;
    Ok(buf)
}

fn decode_npy<T: npyz::Deserialize>(bytes: &[u8], path: &Path) -> Result<(Vec<usize>, Vec<T>)> {
    let bad = |e: std::io::Error| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let file = npyz::NpyFile::new(bytes).map_err(bad)?;
    let shape = file.shape().iter().map(|&d| d as usize).collect();
    Ok((shape, file.into_vec::<T>().map_err(bad)?))
}

fn payload(root: &Path, rel: String, bytes: &[u8], shape: Vec<usize>, dtype: &str) -> Result<Payload> {
    let full = root.join(&rel);
    fs::write(&full, bytes).map_err(|e| Error::io(&full, e))?;
    Ok(Payload {
        path: rel,
        sha256: sha256_hex(bytes),
        shape,
        dtype: dtype.into(),
    })
}

fn write_payloads(ds: &Dataset, root: &Path) -> Result<DatasetManifest> {
    for sub in ["video", "audio"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut sections: Vec<Vec<UtteranceRecord>> = Vec::new();
    for split in Split::ALL {
        let mut recs = Vec::new();
        for u in ds.split(split) {
            let video = match &u.video {
                Some(v) => {
                    let shape = vec![v.frames, v.height, v.width];
                    let bytes = encode_npy_u8(&shape, &v.pixels)?;
                    Some(payload(root, format!("video/{}.npy", u.id), &bytes, shape, "u8")?)
                }
                None => None,
            };
            let shape = vec![u.audio.len(), MFCC_DIM];
            let bytes = encode_npy_f32(&shape, u.audio.frames().data())?;
            let audio = payload(root, format!("audio/{}.npy", u.id), &bytes, shape, "f32")?;
            recs.push(UtteranceRecord {
                id: u.id.clone(),
                transcript: u.transcript.clone(),
                snr: u.snr,
                words: u.words.clone(),
                video,
                audio,
            });
        }
        sections.push(recs);
    }
    let mut it = sections.into_iter();
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        vocabulary: ds.vocab.clone(),
        config: ds.config.clone(),
        train: it.next().unwrap_or_default(),
        val: it.next().unwrap_or_default(),
        test: it.next().unwrap_or_default(),
        audio_only: it.next().unwrap_or_default(),
    };
    manifest.write(&root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Writes the dataset under `dir`, via a sibling staging directory that is
/// renamed into place only once every file is complete.
pub fn write_dataset(ds: &Dataset, dir: &Path, overwrite: bool) -> Result<DatasetManifest> {
    if dir.exists() && !overwrite {
        return Err(Error::Config(format!("{} already exists; pass --force to replace it", dir.display())));
    }
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into());
    let staging: PathBuf = parent.join(format!(".{name}.partial-{}", std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    let manifest = match write_payloads(ds, &staging) {
        Ok(m) => m,
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
    };
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
    Ok(manifest)
}

fn read_payload(root: &Path, p: &Payload) -> Result<Vec<u8>> {
    let full = root.join(&p.path);
    let bytes = fs::read(&full).map_err(|e| Error::io(&full, e))?;
    let digest = sha256_hex(&bytes);
    if digest != p.sha256 {
        return Err(Error::Format {
            path: full,
            detail: format!("checksum mismatch: manifest {} vs file {digest}", p.sha256),
        });
    }
    Ok(bytes)
}

/// Loads a dataset written by [`write_dataset`], verifying every checksum.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::read(&dir.join(MANIFEST_FILE))?;
    let mut splits = Vec::new();
    for split in Split::ALL {
        let mut utts = Vec::new();
        for rec in manifest.section(split) {
            let video = match &rec.video {
                Some(p) => {
                    let path = dir.join(&p.path);
                    let (shape, pixels) = decode_npy::<u8>(&read_payload(dir, p)?, &path)?;
                    if shape.len() != 3 || shape != p.shape {
                        return Err(Error::Format {
                            path,
                            detail: format!("video shape {shape:?} vs manifest {:?}", p.shape),
                        });
                    }
                    Some(VideoClip {
                        frames: shape[0],
                        height: shape[1],
                        width: shape[2],
                        pixels,
                    })
                }
                None => None,
            };
            let path = dir.join(&rec.audio.path);
            let (shape, data) = decode_npy::<f32>(&read_payload(dir, &rec.audio)?, &path)?;
            if shape != rec.audio.shape {
                return Err(Error::Format {
                    path,
                    detail: format!("audio shape {shape:?} vs manifest {:?}", rec.audio.shape),
                });
            }
            let audio = AudioFeatures::new(NdArray::new(shape, data.into_iter().map(f64::from).collect())?)?;
            utts.push(Utterance {
                id: rec.id.clone(),
                transcript: rec.transcript.clone(),
                video,
                audio,
                split,
                snr: rec.snr,
                words: rec.words.clone(),
            });
        }
        splits.push(utts);
    }
    let mut it = splits.into_iter();
    Ok(Dataset {
        config: manifest.config.clone(),
        vocab: manifest.vocabulary.clone(),
        train: it.next().unwrap_or_default(),
        val: it.next().unwrap_or_default(),
        test: it.next().unwrap_or_default(),
        audio_only: it.next().unwrap_or_default(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub split: Split,
    pub utterances: usize,
    pub word_tokens: usize,
    pub word_types: usize,
    pub characters: usize,
}

/// Per-split sizes plus how much of the test vocabulary was seen in training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub splits: Vec<SplitStats>,
    pub test_types_in_train: usize,
    pub test_tokens_in_train: usize,
}

fn word_types(utts: &[Utterance]) -> BTreeSet<&str> {
    utts.iter().flat_map(|u| u.transcript.split(' ')).filter(|w| !w.is_empty()).collect()
}

pub fn coverage_report(ds: &Dataset) -> CoverageReport {
    let splits = Split::ALL
        .iter()
        .map(|&s| {
            let utts = ds.split(s);
            SplitStats {
                split: s,
                utterances: utts.len(),
                word_tokens: utts.iter().map(|u| u.transcript.split_whitespace().count()).sum(),
                word_types: word_types(utts).len(),
                characters: utts.iter().map(|u| u.transcript.chars().count()).sum(),
            }
        })
        .collect();
    let train = word_types(&ds.train);
    let test = word_types(&ds.test);
    CoverageReport {
        splits,
        test_types_in_train: test.intersection(&train).count(),
        test_tokens_in_train: ds
            .test
            .iter()
            .flat_map(|u| u.transcript.split_whitespace())
            .filter(|w| train.contains(w))
            .count(),
    }
}

impl fmt::Display for CoverageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>10} {:>12} {:>10} {:>10}", "set", "sentences", "word tokens", "vocab", "chars")?;
        for s in &self.splits {
            writeln!(
                f,
                "{:<12} {:>10} {:>12} {:>10} {:>10}",
                s.split.label(),
                s.utterances,
                s.word_tokens,
                s.word_types,
                s.characters
            )?;
        }
        let test = self.splits.iter().find(|s| s.split == Split::Test);
        if let Some(t) = test {
            writeln!(
                f,
                "test vocabulary in train: {}/{} types, {}/{} tokens",
                self.test_types_in_train, t.word_types, self.test_tokens_in_train, t.word_tokens
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            train: 6,
            val: 2,
            test: 2,
            audio_only: 3,
            synth: SynthConfig {
                height: 8,
                width: 8,
                ..SynthConfig::default()
            },
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let ds = build_dataset(&small()).unwrap();
        assert_eq!(ds.train.len(), 6);
        assert_eq!(ds.audio_only.len(), 3);
        let texts: BTreeSet<&str> = Split::ALL.iter().flat_map(|&s| ds.split(s)).map(|u| u.transcript.as_str()).collect();
        assert_eq!(texts.len(), 13);
        assert!(ds.audio_only.iter().all(|u| u.video.is_none()));
        assert!(ds.test.iter().all(|u| u.video.is_some()));
    }

    #[test]
    fn oversized_request_is_rejected() {
        let cfg = DatasetConfig {
            train: 64_000,
            ..small()
        };
        assert!(matches!(build_dataset(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn npy_round_trip() {
        let bytes = encode_npy_f32(&[2, 2], &[1.0, 2.5, -3.0, 0.125]).unwrap();
        let (shape, data) = decode_npy::<f32>(&bytes, Path::new("x")).unwrap();
        assert_eq!(shape, vec![2, 2]);
        assert_eq!(data, vec![1.0, 2.5, -3.0, 0.125]);
    }
}
