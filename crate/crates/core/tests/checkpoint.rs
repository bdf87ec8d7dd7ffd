use wlas::corpus::{build_dataset, DatasetConfig};
use wlas::model::{Checkpoint, Model, ModelConfig};
use wlas::training::{TrainConfig, TrainData, Trainer};

#[test]
fn save_load_save_is_byte_identical() {
    let vocab = wlas::corpus::CharVocabulary::standard();
    let model = Model::new(ModelConfig::tiny(vocab.len(), 16, 16), vocab, 9).unwrap();
    let ckpt = Checkpoint::new(model, serde_json::json!({"note": "x", "n": 3}));
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    ckpt.save(&p1).unwrap();
    let loaded = Checkpoint::load(&p1).unwrap();
    assert_eq!(loaded.model, ckpt.model);
    assert_eq!(loaded.metadata, ckpt.metadata);
    loaded.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn truncated_or_foreign_files_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.ckpt");
    std::fs::write(&p, b"not a checkpoint").unwrap();
    assert!(Checkpoint::load(&p).is_err());
    assert!(Checkpoint::load(&dir.path().join("missing.ckpt")).is_err());
    let vocab = wlas::corpus::CharVocabulary::custom("AB").unwrap();
    let bytes = Checkpoint::new(Model::new(ModelConfig::micro(vocab.len()), vocab, 1).unwrap(), serde_json::Value::Null)
        .to_bytes()
        .unwrap();
    for cut in [8, 12, bytes.len() / 2, bytes.len() - 1] {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
}

#[test]
fn resumed_training_continues_exactly() {
    let mut c = DatasetConfig {
        train: 10,
        val: 2,
        test: 2,
        audio_only: 4,
        ..DatasetConfig::default()
    };
    c.synth.height = 16;
    c.synth.width = 16;
    let ds = build_dataset(&c).unwrap();
    let data = TrainData {
        train: &ds.train,
        audio_only: &ds.audio_only,
        val: &ds.val,
    };
    let cfg = TrainConfig {
        batch_size: 4,
        learning_rate: 0.5,
        validation_interval: 0,
        ..TrainConfig::default()
    };
    let model = Model::new(ModelConfig::tiny(ds.vocab.len(), 16, 16), ds.vocab.clone(), 2).unwrap();
    let mut t = Trainer::new(model, cfg, data).unwrap();
    for _ in 0..4 {
        t.step().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    t.checkpoint().unwrap().save(&path).unwrap();
    let pre_save = t.batch_loss(t.state.iteration).unwrap().0;
    let next = t.step().unwrap();

    let mut r = Trainer::resume(Checkpoint::load(&path).unwrap(), data).unwrap();
    assert_eq!(r.state.iteration, 4);
    assert_eq!(r.config, t.config);
    let resumed = r.step().unwrap();
    assert!((resumed.loss - pre_save).abs() <= 0.05 * pre_save.abs());
    assert_eq!(resumed.loss, next.loss);
    assert_eq!(r.model.params, t.model.params);
}
