use std::collections::HashSet;

use proptest::prelude::*;
use wlas::corpus::*;
use wlas::model::{Mode, ModelConfig, ModelInputs};

fn config() -> DatasetConfig {
    let mut c = DatasetConfig {
        train: 20,
        val: 5,
        test: 5,
        audio_only: 5,
        ..DatasetConfig::default()
    };
    c.synth.height = 16;
    c.synth.width = 16;
    c
}

#[test]
fn vocabulary_sizes() {
    assert_eq!(CharVocabulary::standard().len(), 46);
    assert_eq!(CharVocabulary::strict().len(), 45);
    let v = CharVocabulary::custom("ABC").unwrap();
    assert_eq!(v.len(), 6);
    assert!(!v.is_emittable(v.sos()) && !v.is_emittable(v.pad()) && v.is_emittable(v.eos()));
}

#[test]
fn transcript_encoding_roundtrips() {
    let v = CharVocabulary::standard();
    let ids = encode_transcript("bin blue at f 2 now", &v).unwrap();
    assert_eq!(ids[0], v.sos());
    assert_eq!(*ids.last().unwrap(), v.eos());
    assert_eq!(v.decode(&ids[1..]), "BIN BLUE AT F 2 NOW");
    assert!(encode_transcript("BIN #", &v).is_err());
}

#[test]
fn grammar_is_six_slots_and_indexable() {
    let g = Grammar::default();
    assert_eq!(g.sentence_count(), 4 * 4 * 4 * 25 * 10 * 4);
    assert_eq!(g.sentence_at(0), "BIN BLUE AT A 0 AGAIN");
    let all: HashSet<String> = (0..500).map(|i| g.sentence_at(i)).collect();
    assert_eq!(all.len(), 500);
}

#[test]
fn dataset_is_deterministic_and_disjoint() {
    let a = build_dataset(&config()).unwrap();
    let b = build_dataset(&config()).unwrap();
    assert_eq!(a, b);
    let mut seen = HashSet::new();
    for s in Split::ALL {
        for u in a.split(s) {
            assert!(seen.insert(u.transcript.clone()), "duplicate {}", u.transcript);
            assert_eq!(u.split, s);
            assert_eq!(u.video.is_some(), s != Split::AudioOnly);
            assert_eq!(u.words.len(), 6);
        }
    }
    assert!(a.find("test-00002").is_some());
    assert!(build_dataset(&DatasetConfig {
        train: 100_000,
        ..config()
    })
    .is_err());
}

#[test]
fn audio_and_video_are_aligned() {
    let ds = build_dataset(&config()).unwrap();
    for u in &ds.train {
        let v = u.video.as_ref().unwrap();
        assert_eq!(u.audio.len(), 4 * v.frames);
        assert_eq!((v.height, v.width), (16, 16));
    }
}

#[test]
fn sub_utterance_keeps_words_and_alignment() {
    let ds = build_dataset(&config()).unwrap();
    let u = &ds.train[0];
    let words: Vec<&str> = u.transcript.split(' ').collect();
    for first in 0..6 {
        for last in first..6 {
            let s = u.sub_utterance(first, last, 4).unwrap();
            assert_eq!(s.transcript, words[first..=last].join(" "));
            let v = s.video.as_ref().unwrap();
            assert!(v.frames >= 5);
            assert_eq!(s.audio.len(), 4 * v.frames);
            assert_eq!(s.words.len(), last - first + 1);
        }
    }
    assert!(u.sub_utterance(3, 2, 4).is_err());
    assert!(u.sub_utterance(0, 6, 4).is_err());
}

#[test]
fn disabled_modality_is_zeroed() {
    let ds = build_dataset(&config()).unwrap();
    let cfg = ModelConfig::tiny(ds.vocab.len(), 16, 16);
    let u = &ds.train[1];
    let lips = ModelInputs::from_utterance(u, Mode::Lips, &cfg).unwrap();
    assert!(lips.audio.frames().data().iter().all(|&x| x == 0.0));
    assert!(!lips.video.is_all_zero());
    let audio = ModelInputs::from_utterance(u, Mode::Audio, &cfg).unwrap();
    assert!(audio.video.is_all_zero());
    assert_eq!(audio.video.len(), lips.video.len());
    let both = ModelInputs::from_utterance(u, Mode::Both, &cfg).unwrap();
    assert_eq!(both.audio, u.audio);
    let wrong = ModelConfig::tiny(ds.vocab.len(), 32, 32);
    assert!(ModelInputs::from_utterance(u, Mode::Both, &wrong).is_err());
}

#[test]
fn written_dataset_reads_back() {
    let ds = build_dataset(&config()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("data");
    let manifest = write_dataset(&ds, &dir, false).unwrap();
    assert_eq!(manifest.section(Split::Train).len(), 20);
    let back = read_dataset(&dir).unwrap();
    assert_eq!(back.vocab, ds.vocab);
    assert_eq!(back.train.len(), ds.train.len());
    for (a, b) in back.train.iter().zip(&ds.train) {
        assert_eq!(a.transcript, b.transcript);
        assert_eq!(a.video, b.video);
        for (x, y) in a.audio.frames().data().iter().zip(b.audio.frames().data()) {
            assert!((x - y).abs() <= 1e-5 * y.abs().max(1.0));
        }
    }
    let err = write_dataset(&ds, &dir, false).unwrap_err();
    assert!(err.to_string().contains("--force"));
    write_dataset(&ds, &dir, true).unwrap();
}

#[test]
fn tampered_payload_is_detected() {
    let ds = build_dataset(&DatasetConfig {
        train: 2,
        val: 0,
        test: 0,
        audio_only: 0,
        ..config()
    })
    .unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("data");
    let m = write_dataset(&ds, &dir, false).unwrap();
    let rec = &m.section(Split::Train)[0];
    let path = dir.join(&rec.audio.path);
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 0xFF;
    std::fs::write(&path, bytes).unwrap();
    assert!(read_dataset(&dir).is_err());
}

#[test]
fn coverage_counts_splits() {
    let ds = build_dataset(&config()).unwrap();
    let r = coverage_report(&ds);
    assert_eq!(r.splits.len(), 4);
    assert_eq!(r.splits[0].word_tokens, 120);
    assert!(r.test_types_in_train <= r.splits[2].word_types);
    assert!(r.to_string().contains("train"));
}

proptest! {
    #[test]
    fn derived_seeds_depend_on_key(seed in any::<u64>(), a in "[a-z]{1,8}", b in "[a-z]{1,8}") {
        prop_assume!(a != b);
        prop_assert_ne!(wlas::corpus::synth::derive_seed(seed, &a), wlas::corpus::synth::derive_seed(seed, &b));
    }

    #[test]
    fn sentences_encode(i in 0u64..64_000) {
        let s = Grammar::default().sentence_at(i);
        let v = CharVocabulary::standard();
        let ids = encode_transcript(&s, &v).unwrap();
        prop_assert_eq!(v.decode(&ids[1..]), s);
    }
}
